"""Joint out-of-distribution generalization and detection from wild mixture data.

Trains a K-class classifier together with an energy-threshold OOD detector
on unlabeled wild data (a mixture of in-distribution, covariate-shifted and
semantic-shifted samples), enforcing a negative energy margin on ID data via
an augmented Lagrangian solver. Includes evaluation metrics, the out-fraction
margin-selection heuristic, and an empirical checker for the Lipschitz margin
guarantee.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
