"""Exception types shared across the package."""


class DomainError(ValueError):
    """An elementary operation was applied outside its mathematical domain."""


class ShapeError(ValueError):
    """Incompatible dimensions between a model and its input."""


class FormatError(ValueError):
    """A binary or text file does not conform to its documented format."""


class ConfigError(ValueError):
    """An invalid or inconsistent run configuration."""


class TrainingError(RuntimeError):
    """Training diverged. Carries the history collected up to the failure."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
