"""Training objectives and the augmented Lagrangian solver.

The surrogate program being solved, over classifier parameters and the
scalar ``ood_scale`` w:

    minimize    mean_i  sigma(w * E(x_wild_i))
    subject to  mean_j  sigma(-w * (E(x_id_j) - eta))  <=  alpha
                mean_j  CE(f(x_id_j), y_j)             <=  tau

with sigma(u) = 1 / (1 + exp(u)) and E the free energy. ``eta = 0`` removes
the margin and recovers the plain wild-data program (see
:func:`constraint_no_margin`). The idealized 0/1 counterpart is available
as a non-differentiable evaluation oracle via :func:`zero_one_report`.

The constrained program is solved by an inequality-form augmented
Lagrangian: each constraint c contributes

    penalty(c) = (max(0, lambda + rho*c)^2 - lambda^2) / (2*rho)

which equals lambda*c + (rho/2)*c^2 while lambda + rho*c >= 0 and the
constant -lambda^2/(2*rho) otherwise. Multipliers update as
lambda <- max(0, lambda + rho*c) after each inner phase; rho grows
geometrically (capped) whenever the worst violation failed to shrink by
a factor of 0.9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as m
from .data import LabeledSet, WildBatch, WildMixture
from .errors import ConfigError, TrainingError
from .tape import Tape

# Energies (and the full sigmoid argument) are clamped to this band inside
# the sigmoid losses only; metric-time energies are never clamped.
ENERGY_CLAMP = 60.0


@dataclass
class ConstraintSpec:
    """Constraint levels (alpha, tau, eta) of the margin program.

    ``tau=None`` means "resolve during training": twice the mean
    cross-entropy of the warm-up ERM phase, the desk-scale stand-in for
    twice the pre-trained model's loss.
    """

    alpha: float = 0.05
    tau: float | None = None
    eta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.eta > 0.0:
            raise ConfigError(f"eta must be <= 0, got {self.eta}")
        if self.tau is not None and self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class AlmState:
    """Multipliers and penalty weight of the augmented Lagrangian."""

    lambda1: float = 0.0  # margin constraint multiplier
    lambda2: float = 0.0  # classification constraint multiplier
    rho: float = 1.0
    growth: float = 2.0
    rho_max: float = 1e4
    inner_epochs: int = 5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("multipliers must be nonnegative")
        if self.rho <= 0 or self.growth <= 1 or self.inner_epochs < 1:
            raise ConfigError("need rho > 0, growth > 1, inner_epochs >= 1")


@dataclass
class EpochRow:
    outer: int  # 0 = warm-up
    epoch: int
    loss_wild: float
    loss_total: float


@dataclass
class OuterRow:
    outer: int
    objective: float  # surrogate wild objective on the held-out wild sample
    c1: float  # margin residual on the full ID pool
    c2: float  # classification residual on the full ID pool
    lambda1: float  # multipliers and rho in effect DURING the phase
    lambda2: float
    rho: float


@dataclass
class TrainHistory:
    """Per-epoch mean losses and per-outer-iteration ALM state."""

    epochs: list = field(default_factory=list)
    outers: list = field(default_factory=list)
    resolved_tau: float | None = None  # tau actually enforced (set post warm-up)

    def to_csv(self, path) -> None:
        """Write ``outer,epoch,loss_wild,c1,c2,lambda1,lambda2,rho`` rows.

        Epoch rows of one outer iteration repeat that iteration's phase-end
        residuals and its in-effect multipliers; warm-up rows (outer 0)
        carry nan residuals.
        """
        by_outer = {o.outer: o for o in self.outers}
        with open(path, "w") as fh:
            fh.write("outer,epoch,loss_wild,c1,c2,lambda1,lambda2,rho\n")
            for row in self.epochs:
                o = by_outer.get(row.outer)
                c1 = repr(o.c1) if o else "nan"
                c2 = repr(o.c2) if o else "nan"
                l1 = repr(o.lambda1) if o else "0.0"
                l2 = repr(o.lambda2) if o else "0.0"
                rho = repr(o.rho) if o else "nan"
                fh.write(
                    f"{row.outer},{row.epoch},{row.loss_wild!r},{c1},{c2},{l1},{l2},{rho}\n"
                )


@dataclass
class TrainData:
    """Everything the trainer consumes: labeled ID data plus the wild sampler.

    ``wild_eval`` is an optional fixed feature matrix used to report the
    wild objective in the history; when absent the trainer draws one batch
    from the mixture before any training step.
    """

    id_train: LabeledSet
    wild: WildMixture
    wild_eval: np.ndarray | None = None


@dataclass
class TrainSettings:
    """Optimizer and ALM schedule knobs."""

    hidden_dims: tuple = (64, 64)
    activation: str = "tanh"
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    warmup_epochs: int = 5
    inner_epochs: int = 5
    outer_iters: int = 20
    rho0: float = 1.0
    rho_growth: float = 2.0
    rho_max: float = 1e4
    # learning rate halves when training passes these fractions of the
    # total ALM epoch budget (outer_iters * inner_epochs)
    lr_decay_at: tuple = (0.5, 0.75, 0.9)
    chunk_nodes: int = 1_500_000


# -- tape emission helpers ------------------------------------------------------


def _clamp(tape, u, lo: float, hi: float) -> int:
    # clamp(u) = -max(-max(u, lo), -hi)
    a = tape.max2(u, tape.lift(lo))
    return tape.neg(tape.max2(tape.neg(a), tape.lift(-hi)))


def _sigmoid(tape, u) -> int:
    # sigma(u) = 1 / (1 + exp(u)); note the sign convention.
    one = tape.lift(1.0)
    return tape.div(one, tape.add(one, tape.exp(u)))


def _mean(tape, handles) -> int:
    return tape.div(tape.sum_many(handles), tape.lift(float(len(handles))))


def _wild_term(tape, bound, x) -> int:
    """sigma(w * E(x)) with the energy clamped inside the sigmoid."""
    e = m.energy_node(bound.forward(x), tape)
    ec = _clamp(tape, e, -ENERGY_CLAMP, ENERGY_CLAMP)
    u = _clamp(tape, tape.mul(bound.scale, ec), -ENERGY_CLAMP, ENERGY_CLAMP)
    return _sigmoid(tape, u)


def _margin_term(tape, bound, x, eta_handle) -> int:
    """sigma(-w * (E(x) - eta)), energy clamped inside the sigmoid."""
    e = m.energy_node(bound.forward(x), tape)
    ec = _clamp(tape, e, -ENERGY_CLAMP, ENERGY_CLAMP)
    arg = tape.sub(ec, eta_handle) if eta_handle is not None else ec
    u = _clamp(tape, tape.neg(tape.mul(bound.scale, arg)), -ENERGY_CLAMP, ENERGY_CLAMP)
    return _sigmoid(tape, u)


def _features(batch):
    if isinstance(batch, WildBatch):
        return batch.features
    if isinstance(batch, LabeledSet):
        return batch.xs
    return np.atleast_2d(np.asarray(batch, dtype=np.float64))


# -- the surrogate losses (tape ops) --------------------------------------------


def loss_wild(model: m.MlpModel, wild_batch, tape, bound=None) -> int:
    """Mean sigma(w * E) over the wild batch: the surrogate objective term."""
    xs = _features(wild_batch)
    if xs.shape[0] == 0:
        raise ValueError("empty wild batch")
    if bound is None:
        bound = m.bind(model, tape)
    terms = [_wild_term(tape, bound, x) for x in xs]
    return _mean(tape, np.array(terms, dtype=np.int64))


def constraint_margin(model: m.MlpModel, id_batch, eta: float, tape, bound=None) -> int:
    """Mean sigma(-w * (E - eta)) over ID features: the margin constraint LHS."""
    xs = _features(id_batch)
    if xs.shape[0] == 0:
        raise ValueError("empty ID batch")
    if bound is None:
        bound = m.bind(model, tape)
    eta_handle = tape.lift(float(eta))
    terms = [_margin_term(tape, bound, x, eta_handle) for x in xs]
    return _mean(tape, np.array(terms, dtype=np.int64))


def constraint_no_margin(model: m.MlpModel, id_batch, tape, bound=None) -> int:
    """Mean sigma(-w * E): the margin-free constraint, written without eta.

    This is the no-margin program's own expression; ``constraint_margin``
    with ``eta=0`` must agree with it exactly.
    """
    xs = _features(id_batch)
    if xs.shape[0] == 0:
        raise ValueError("empty ID batch")
    if bound is None:
        bound = m.bind(model, tape)
    terms = [_margin_term(tape, bound, x, None) for x in xs]
    return _mean(tape, np.array(terms, dtype=np.int64))


def constraint_cls(model: m.MlpModel, id_batch: LabeledSet, tape, bound=None) -> int:
    """Mean cross-entropy over the labeled ID batch."""
    if len(id_batch) == 0:
        raise ValueError("empty ID batch")
    if bound is None:
        bound = m.bind(model, tape)
    terms = [
        m.loss_cls(bound.forward(x), int(y), tape)
        for x, y in zip(id_batch.xs, id_batch.ys)
    ]
    return _mean(tape, np.array(terms, dtype=np.int64))


def _penalty(tape, c, lam: float, rho: float) -> int:
    # (max(0, lam + rho*c)^2 - lam^2) / (2*rho); the standard inequality form.
    t = tape.max2(tape.lift(0.0), tape.add(tape.lift(lam), tape.mul(tape.lift(rho), c)))
    num = tape.sub(tape.mul(t, t), tape.lift(lam * lam))
    return tape.div(num, tape.lift(2.0 * rho))


def alm_unconstrained_loss(
    model: m.MlpModel,
    wild_batch,
    id_batch: LabeledSet,
    spec: ConstraintSpec,
    alm: AlmState,
    tape,
    bound=None,
) -> int:
    """One augmented-Lagrangian subproblem loss on a single tape.

    loss_wild + penalty(constraint_margin - alpha) + penalty(constraint_cls
    - tau), all three terms sharing one parameter binding so ``backward``
    yields the full gradient.
    """
    if spec.tau is None:
        raise ConfigError("tau unresolved; set ConstraintSpec.tau or run the warm-up")
    if bound is None:
        bound = m.bind(model, tape)
    lw = loss_wild(model, wild_batch, tape, bound=bound)
    cm = constraint_margin(model, id_batch, spec.eta, tape, bound=bound)
    cc = constraint_cls(model, id_batch, tape, bound=bound)
    c1 = tape.sub(cm, tape.lift(spec.alpha))
    c2 = tape.sub(cc, tape.lift(spec.tau))
    out = tape.add(lw, _penalty(tape, c1, alm.lambda1, alm.rho))
    return tape.add(out, _penalty(tape, c2, alm.lambda2, alm.rho))


def penalty_value(c: float, lam: float, rho: float) -> float:
    """Closed form of the inequality penalty (no tape)."""
    t = max(0.0, lam + rho * c)
    return (t * t - lam * lam) / (2.0 * rho)


# -- no-tape twins (used for residual measurement and logging) -------------------


def _sig_np(u):
    return 1.0 / (1.0 + np.exp(u))


def loss_wild_value(model: m.MlpModel, xs) -> float:
    e = np.clip(m.energies(model, _features(xs)), -ENERGY_CLAMP, ENERGY_CLAMP)
    u = np.clip(model.ood_scale * e, -ENERGY_CLAMP, ENERGY_CLAMP)
    return float(np.mean(_sig_np(u)))


def constraint_margin_value(model: m.MlpModel, xs, eta: float) -> float:
    e = np.clip(m.energies(model, _features(xs)), -ENERGY_CLAMP, ENERGY_CLAMP)
    u = np.clip(-model.ood_scale * (e - eta), -ENERGY_CLAMP, ENERGY_CLAMP)
    return float(np.mean(_sig_np(u)))


def constraint_cls_value(model: m.MlpModel, id_set: LabeledSet) -> float:
    return float(np.mean(m.ce_values(model, id_set.xs, id_set.ys)))


@dataclass
class ZeroOneReport:
    """Exact indicator counts of the idealized 0/1 program."""

    objective: float  # fraction of wild samples with E <= 0 (declared IN)
    c1_01: float  # fraction of ID samples with E >= eta
    c2_01: float  # fraction of ID samples misclassified


def zero_one_report(model: m.MlpModel, wild_xs, id_set: LabeledSet,
                    spec: ConstraintSpec) -> ZeroOneReport:
    """Evaluate the 0/1 objective and constraints (no surrogate, no clamps)."""
    e_wild = m.energies(model, _features(wild_xs))
    e_id = m.energies(model, id_set.xs)
    preds = m.predict_batch(model, id_set.xs)
    return ZeroOneReport(
        objective=float(np.mean(e_wild <= 0.0)),
        c1_01=float(np.mean(e_id >= spec.eta)),
        c2_01=float(np.mean(preds != id_set.ys)),
    )


# -- training -------------------------------------------------------------------


def _estimate_nodes_per_sample(model: m.MlpModel) -> int:
    n = 0
    for W in model.weights:
        n += 2 * W.size
    # activations, energy / CE / sigmoid scaffolding
    return n + 6 * model.n_classes + 64


class _Sgd:
    """Classic momentum SGD over the model's arrays plus ood_scale."""

    def __init__(self, model: m.MlpModel, momentum: float):
        self.momentum = momentum
        self.vW = [np.zeros_like(W) for W in model.weights]
        self.vb = [np.zeros_like(b) for b in model.biases]
        self.vs = 0.0

    def step(self, model: m.MlpModel, dW, db, dscale, lr: float):
        mu = self.momentum
        for l in range(len(model.weights)):
            self.vW[l] = mu * self.vW[l] - lr * dW[l]
            self.vb[l] = mu * self.vb[l] - lr * db[l]
            model.weights[l] += self.vW[l]
            model.biases[l] += self.vb[l]
        self.vs = mu * self.vs - lr * dscale
        model.ood_scale = float(model.ood_scale + self.vs)


def _grad_pass(model, tape, wild_xs, a_w, id_xs, id_ys, a_m, a_c, eta, chunk):
    """Accumulated gradients of a_w*loss_wild + a_m*constraint_margin +
    a_c*constraint_cls, computed over per-chunk tapes.

    Coefficients already include the 1/m and 1/n normalizations. Exact up to
    addition order: every chunk shares one parameter binding and the chunk
    losses are linear in the per-sample terms.
    """
    dW = [np.zeros_like(W) for W in model.weights]
    db = [np.zeros_like(b) for b in model.biases]
    dscale = 0.0

    def run_chunk(xs, ys, coeff_terms):
        nonlocal dscale
        tape.reset()
        bound = m.bind(model, tape)
        eta_handle = tape.lift(float(eta))
        pieces = []
        for s in range(xs.shape[0]):
            term_handles = coeff_terms(bound, xs[s], None if ys is None else int(ys[s]), eta_handle)
            pieces.extend(term_handles)
        if not pieces:
            return
        root = None
        for coeff, handles in _group_terms(pieces):
            part = tape.mul(tape.lift(coeff), tape.sum_many(np.array(handles, dtype=np.int64)))
            root = part if root is None else tape.add(root, part)
        adj = tape.backward(root)
        gW, gb, gs = bound.grads(adj)
        for l in range(len(dW)):
            dW[l] += gW[l]
            db[l] += gb[l]
        dscale += gs

    def _group_terms(pieces):
        groups = {}
        for coeff, handle in pieces:
            groups.setdefault(coeff, []).append(handle)
        return groups.items()

    if a_w != 0.0 and wild_xs is not None and wild_xs.shape[0]:
        def wild_terms(bound, x, _y, _eta):
            return [(a_w, _wild_term(tape, bound, x))]

        for lo in range(0, wild_xs.shape[0], chunk):
            run_chunk(wild_xs[lo : lo + chunk], None, wild_terms)

    if (a_m != 0.0 or a_c != 0.0) and id_xs is not None and id_xs.shape[0]:
        def id_terms(bound, x, y, eta_handle):
            out = []
            logits = None
            if a_m != 0.0:
                out.append((a_m, _margin_term(tape, bound, x, eta_handle)))
            if a_c != 0.0:
                logits = bound.forward(x)
                out.append((a_c, m.loss_cls(logits, y, tape)))
            return out

        for lo in range(0, id_xs.shape[0], chunk):
            run_chunk(id_xs[lo : lo + chunk], id_ys[lo : lo + chunk], id_terms)

    return dW, db, dscale


def train(data: TrainData, spec: ConstraintSpec, settings: TrainSettings,
          seed: int = 0):
    """Warm-up ERM, then the outer ALM loop; returns (model, history).

    Deterministic for fixed inputs and seed. Raises TrainingError (history
    attached) if the loss stops being finite.
    """
    id_set = data.id_train
    if len(id_set) == 0:
        raise ConfigError("empty ID training set")
    k = int(id_set.ys.max())
    dims = [id_set.dim, *settings.hidden_dims, max(k, 2)]
    model = m.init_model(dims, settings.activation, seed)
    rng = np.random.default_rng(seed)
    sgd = _Sgd(model, settings.momentum)
    tape = Tape()
    history = TrainHistory()
    chunk = max(1, settings.chunk_nodes // _estimate_nodes_per_sample(model))

    wild_eval = data.wild_eval
    if wild_eval is None and settings.outer_iters > 0:
        wild_eval = data.wild.sample(max(512, settings.batch_size))[0].features

    def minibatches():
        order = rng.permutation(len(id_set))
        for lo in range(0, len(order), settings.batch_size):
            yield order[lo : lo + settings.batch_size]

    def check_finite(value, phase):
        if not math.isfinite(value):
            raise TrainingError(f"loss diverged ({value}) during {phase}", history)

    # ERM warm-up: plain cross-entropy, no wild data, base learning rate.
    for ep in range(1, settings.warmup_epochs + 1):
        tot = 0.0
        nb = 0
        for idx in minibatches():
            xs, ys = id_set.xs[idx], id_set.ys[idx]
            ce = float(np.mean(m.ce_values(model, xs, ys)))
            check_finite(ce, "warm-up")
            dW, db, ds = _grad_pass(
                model, tape, None, 0.0, xs, ys, 0.0, 1.0 / len(idx), spec.eta, chunk
            )
            sgd.step(model, dW, db, ds, settings.lr)
            tot += ce
            nb += 1
        history.epochs.append(EpochRow(0, ep, float("nan"), tot / max(nb, 1)))

    if spec.tau is None:
        tau = 2.0 * constraint_cls_value(model, id_set)
        spec = ConstraintSpec(alpha=spec.alpha, tau=max(tau, 1e-8), eta=spec.eta)
    history.resolved_tau = spec.tau

    alm = AlmState(
        rho=settings.rho0,
        growth=settings.rho_growth,
        rho_max=settings.rho_max,
        inner_epochs=settings.inner_epochs,
    )
    total_epochs = settings.outer_iters * settings.inner_epochs
    decay_eps = [int(f * total_epochs) for f in settings.lr_decay_at]
    prev_viol = None
    epoch_no = 0

    for outer in range(1, settings.outer_iters + 1):
        for ep in range(1, settings.inner_epochs + 1):
            lr = settings.lr * 0.5 ** sum(1 for d in decay_eps if epoch_no >= d)
            tot_lw = 0.0
            tot_loss = 0.0
            nb = 0
            for idx in minibatches():
                xs, ys = id_set.xs[idx], id_set.ys[idx]
                wild_xs = data.wild.sample(settings.batch_size)[0].features

                # Pass A: loss value and penalty slopes from plain forwards.
                lw = loss_wild_value(model, wild_xs)
                cm = constraint_margin_value(model, xs, spec.eta)
                cc = float(np.mean(m.ce_values(model, xs, ys)))
                c1 = cm - spec.alpha
                c2 = cc - spec.tau
                loss = (
                    lw
                    + penalty_value(c1, alm.lambda1, alm.rho)
                    + penalty_value(c2, alm.lambda2, alm.rho)
                )
                check_finite(loss, f"outer {outer}")
                k1 = max(0.0, alm.lambda1 + alm.rho * c1)
                k2 = max(0.0, alm.lambda2 + alm.rho * c2)

                # Pass B: gradients of lw + k1*cm + k2*cc (the ALM gradient).
                dW, db, ds = _grad_pass(
                    model,
                    tape,
                    wild_xs,
                    1.0 / wild_xs.shape[0],
                    xs,
                    ys,
                    k1 / xs.shape[0],
                    k2 / xs.shape[0],
                    spec.eta,
                    chunk,
                )
                sgd.step(model, dW, db, ds, lr)
                tot_lw += lw
                tot_loss += loss
                nb += 1
            epoch_no += 1
            history.epochs.append(
                EpochRow(outer, ep, tot_lw / max(nb, 1), tot_loss / max(nb, 1))
            )

        # Phase end: residuals on the full pools, then multiplier updates.
        c1 = constraint_margin_value(model, id_set.xs, spec.eta) - spec.alpha
        c2 = constraint_cls_value(model, id_set) - spec.tau
        check_finite(c1, f"outer {outer} residuals")
        check_finite(c2, f"outer {outer} residuals")
        obj = loss_wild_value(model, wild_eval) if wild_eval is not None else float("nan")
        history.outers.append(
            OuterRow(outer, obj, c1, c2, alm.lambda1, alm.lambda2, alm.rho)
        )
        alm.lambda1 = max(0.0, alm.lambda1 + alm.rho * c1)
        alm.lambda2 = max(0.0, alm.lambda2 + alm.rho * c2)
        viol = max(max(c1, 0.0), max(c2, 0.0))
        if prev_viol is not None and viol > 0.9 * prev_viol:
            alm.rho = min(alm.rho * alm.growth, alm.rho_max)
        prev_viol = viol

    return model, history
