"""K-class MLP classifier, free-energy score and energy-threshold detector.

The model owns the classifier parameters plus ``ood_scale``, the learnable
scalar multiplying energies inside the sigmoid OOD losses. Differentiable
forward passes run on a :class:`scone.tape.Tape`; metric-time inference uses
the no-tape kernels, which replicate the tape arithmetic exactly so both
paths agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels.ops import ACT_BY_NAME
from .errors import FormatError, ShapeError

IN = "in"
OUT = "out"

SNAPSHOT_HEADER = "scone-model 1"


@dataclass
class DetectorConfig:
    """Energy threshold of the binary detector; OUT iff energy > threshold."""

    energy_threshold: float = 0.0


@dataclass
class MlpModel:
    """Fully-connected classifier: ``layer_dims[0]`` inputs, K outputs.

    ``weights[l]`` has shape (layer_dims[l+1], layer_dims[l]); hidden layers
    use ``activation``, the output layer is linear. ``ood_scale`` is the
    learnable scalar of the sigmoid OOD losses (shared by the wild objective
    term and the margin constraint term).
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    ood_scale: float = 1.0

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2:
            raise ShapeError("need at least an input and an output layer")
        if dims[-1] < 2:
            raise ShapeError(f"need K >= 2 output classes, got {dims[-1]}")
        if any(d < 1 for d in dims):
            raise ShapeError(f"layer dims must be positive: {dims}")
        if self.activation not in ACT_BY_NAME:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("one weight matrix and bias vector per layer required")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ShapeError(
                    f"layer {l}: weight shape {W.shape} / bias shape {b.shape} "
                    f"incompatible with dims {dims[l]}->{dims[l + 1]}"
                )
        if not all(np.all(np.isfinite(W)) for W in self.weights) or not all(
            np.all(np.isfinite(b)) for b in self.biases
        ):
            raise ValueError("non-finite parameter")
        if not math.isfinite(self.ood_scale):
            raise ValueError("non-finite ood_scale")

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases)) + 1

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.ood_scale,
        )


def init_model(layer_dims, activation: str = "tanh", seed: int = 0) -> MlpModel:
    """Glorot-uniform initialized model: U(-a, a), a = sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        a = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpModel(list(layer_dims), weights, biases, activation, ood_scale=1.0)


@dataclass
class BoundParams:
    """Model parameters lifted onto a tape, reusable across a batch.

    Binding once per tape makes every sample in a batch share the same
    parameter nodes, so ``backward`` accumulates batch gradients in place.
    """

    model: MlpModel
    tape: object
    w_starts: list[int]
    b_starts: list[int]
    scale: int  # handle of ood_scale

    def forward(self, x) -> np.ndarray:
        """Logit handles for one input vector (length K array of handles)."""
        model = self.model
        tape = self.tape
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (model.layer_dims[0],):
            raise ShapeError(
                f"input shape {x.shape} incompatible with input dim {model.layer_dims[0]}"
            )
        start = tape.lift_many(x)
        h = np.arange(start, start + x.shape[0], dtype=np.int64)
        n_layers = len(model.weights)
        for l in range(n_layers):
            h = tape.affine(self.w_starts[l], self.b_starts[l], h, model.layer_dims[l + 1])
            if l < n_layers - 1:
                h = tape.unary_many(model.activation, h)
        return h

    def grads(self, adjoints):
        """Split a backward() result into per-parameter gradient arrays."""
        dW, db = [], []
        for l, (W, b) in enumerate(zip(self.model.weights, self.model.biases)):
            ws = self.w_starts[l]
            bs = self.b_starts[l]
            dW.append(np.asarray(adjoints[ws : ws + W.size]).reshape(W.shape).copy())
            db.append(np.asarray(adjoints[bs : bs + b.size]).copy())
        return dW, db, float(adjoints[self.scale])


def bind(model: MlpModel, tape) -> BoundParams:
    """Lift all model parameters (and ood_scale) onto the tape once."""
    w_starts, b_starts = [], []
    for W, b in zip(model.weights, model.biases):
        w_starts.append(tape.lift_many(np.ascontiguousarray(W).ravel()))
        b_starts.append(tape.lift_many(b))
    scale = tape.lift(model.ood_scale)
    return BoundParams(model, tape, w_starts, b_starts, scale)


def forward(model: MlpModel, x, tape) -> np.ndarray:
    """Logit handles for one input; binds parameters on the given tape.

    For batches, bind once with :func:`bind` and call
    :meth:`BoundParams.forward` per sample so parameters are shared.
    """
    return bind(model, tape).forward(x)


def forward_values(model: MlpModel, X) -> np.ndarray:
    """(n, K) logits without a tape; bit-identical to the tape forward."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.layer_dims[0]:
        raise ShapeError(
            f"input dim {X.shape[1]} incompatible with model input {model.layer_dims[0]}"
        )
    return _kernels.forward_batch(
        model.weights, model.biases, ACT_BY_NAME[model.activation], X
    )


def predict(logits) -> int:
    """1-based index of the maximal logit; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    return int(np.argmax(logits)) + 1


def predict_batch(model: MlpModel, X) -> np.ndarray:
    """1-based predicted class per row of X."""
    return np.argmax(forward_values(model, X), axis=1) + 1


def energy(logits) -> float:
    """Free energy -log(sum_j exp(logit_j)), computed by stable log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(_kernels.energy_batch(logits[None, :])[0])


def energies(model: MlpModel, X) -> np.ndarray:
    """Free energy per row of X (no tape)."""
    return _kernels.energy_batch(forward_values(model, X))


def detect(energy_value: float, cfg: DetectorConfig = DetectorConfig()) -> str:
    """OUT iff energy strictly exceeds the threshold; the boundary is IN."""
    return OUT if energy_value > cfg.energy_threshold else IN


def energy_node(logit_handles, tape) -> int:
    """Tape node for the free energy of the given logit handles."""
    return tape.neg(tape.logsumexp(logit_handles))


def loss_cls(logit_handles, label: int, tape) -> int:
    """Cross-entropy node ``logsumexp(logits) - logits[label-1]`` (label 1-based)."""
    k = len(logit_handles)
    if not 1 <= label <= k:
        raise ValueError(f"label {label} outside 1..{k}")
    lse = tape.logsumexp(logit_handles)
    return tape.sub(lse, int(logit_handles[label - 1]))


def ce_values(model: MlpModel, X, labels) -> np.ndarray:
    """Per-sample cross-entropy without a tape (labels 1-based)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 1 or labels.max() > model.n_classes:
        raise ValueError("labels outside 1..K")
    return _kernels.ce_batch(forward_values(model, X), labels - 1)


def save_model(model: MlpModel, path) -> None:
    """Write the documented plain-text snapshot (see README: model snapshot).

    Line 1 header, then ``layer_dims``, ``activation``, ``ood_scale``, then
    per layer one ``W<l>`` line (row-major) and one ``b<l>`` line. Floats are
    written with shortest round-trip repr, so load_model restores them
    bit-exactly.
    """
    lines = [SNAPSHOT_HEADER]
    lines.append("layer_dims " + " ".join(str(d) for d in model.layer_dims))
    lines.append(f"activation {model.activation}")
    lines.append(f"ood_scale {model.ood_scale!r}")
    for l, (W, b) in enumerate(zip(model.weights, model.biases), start=1):
        lines.append(f"W{l} " + " ".join(repr(v) for v in W.ravel().tolist()))
        lines.append(f"b{l} " + " ".join(repr(v) for v in b.tolist()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    """Read a snapshot written by :func:`save_model`."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != SNAPSHOT_HEADER:
        raise FormatError(f"{path}: missing snapshot header {SNAPSHOT_HEADER!r}")

    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    try:
        dims = [int(v) for v in fields["layer_dims"].split()]
        activation = fields["activation"]
        ood_scale = float(fields["ood_scale"])
        weights, biases = [], []
        for l in range(1, len(dims)):
            W = np.array([float(v) for v in fields[f"W{l}"].split()])
            b = np.array([float(v) for v in fields[f"b{l}"].split()])
            weights.append(W.reshape(dims[l], dims[l - 1]))
            biases.append(b)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed snapshot ({exc})") from exc
    return MlpModel(dims, weights, biases, activation, ood_scale)
