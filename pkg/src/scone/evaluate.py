"""Detector thresholding, the three headline metrics, AUROC and margin selection.

Scores are raw free energies (higher = more OOD-like), so AUROC is computed
directly over energies with no sign flip. The boundary convention is fixed
everywhere: a sample whose energy equals the threshold counts as IN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import model as m
from .data import LabeledSet

DEFAULT_ETA_GRID = (0.0, -0.1, -0.5, -1.0, -2.0, -10.0, -20.0, -50.0)

# Smallest out-fraction drop that counts as a phase transition; flatter
# grids fall back to the first (least negative) margin.
TRANSITION_FLOOR = 0.05

PAIRWISE_LIMIT = 10**6


@dataclass
class MetricsReport:
    """One trained model's evaluation summary."""

    id_acc: float
    ood_acc: float
    fpr95: float
    auroc: float
    out_frac: float
    threshold: float

    def as_dict(self):
        return asdict(self)


@dataclass
class MarginGrid:
    """Candidate margins (strictly decreasing, all <= 0) with out-fractions."""

    etas: list
    out_fracs: list

    def __post_init__(self):
        self.etas = [float(e) for e in self.etas]
        self.out_fracs = [float(v) for v in self.out_fracs]
        if len(self.etas) != len(self.out_fracs):
            raise ValueError("etas and out_fracs must align")
        if any(e > 0 for e in self.etas):
            raise ValueError("margins must be <= 0")
        if any(b >= a for a, b in zip(self.etas, self.etas[1:])):
            raise ValueError("etas must be strictly decreasing")


def threshold_at_id_quantile(id_energies, keep: float) -> float:
    """Smallest t such that at least ``keep`` of the ID energies are <= t.

    Ties sit on the IN side, so detect(E, t) keeps >= ``keep`` of ID as IN.
    """
    e = np.sort(np.asarray(id_energies, dtype=np.float64))
    if e.size == 0:
        raise ValueError("empty energy list")
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep must lie in (0, 1], got {keep}")
    k = int(math.ceil(keep * e.size - 1e-9))
    k = min(max(k, 1), e.size)
    return float(e[k - 1])


def fpr_at_tpr(id_energies, ood_energies, tpr: float = 0.95) -> float:
    """Fraction of OOD energies at or below the ID-quantile threshold."""
    ood = np.asarray(ood_energies, dtype=np.float64)
    if ood.size == 0:
        raise ValueError("empty OOD energy list")
    t = threshold_at_id_quantile(id_energies, tpr)
    return float(np.mean(ood <= t))


def auroc_pairwise(id_energies, ood_energies) -> float:
    """Exact Mann-Whitney statistic by counting every (ood, id) pair."""
    a = np.asarray(id_energies, dtype=np.float64)
    b = np.asarray(ood_energies, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both energy lists must be nonempty")
    gt = (b[:, None] > a[None, :]).sum()
    eq = (b[:, None] == a[None, :]).sum()
    return float((gt + 0.5 * eq) / (a.size * b.size))


def auroc_ranksum(id_energies, ood_energies) -> float:
    """Same statistic via midranks; ties get the average rank."""
    a = np.asarray(id_energies, dtype=np.float64)
    b = np.asarray(ood_energies, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both energy lists must be nonempty")
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="stable")
    sorted_vals = combined[order]
    ranks = np.empty(combined.size, dtype=np.float64)
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    r_ood = float(ranks[a.size :].sum())
    u = r_ood - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auroc(id_energies, ood_energies) -> float:
    """P(E_ood > E_id) + 0.5 * P(equal).

    Counts pairs exactly when n*m is small enough, otherwise uses the
    rank-sum path; the two agree to floating precision by construction.
    """
    n = len(id_energies)
    mm = len(ood_energies)
    if n * mm <= PAIRWISE_LIMIT:
        return auroc_pairwise(id_energies, ood_energies)
    return auroc_ranksum(id_energies, ood_energies)


def accuracy(model: m.MlpModel, labeled: LabeledSet) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    return float(np.mean(m.predict_batch(model, labeled.xs) == labeled.ys))


def out_fraction(model: m.MlpModel, wild_xs) -> float:
    """Fraction of a wild validation set the detector flags OUT (energy > 0)."""
    xs = np.atleast_2d(np.asarray(wild_xs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise ValueError("empty wild validation set")
    return float(np.mean(m.energies(model, xs) > 0.0))


def select_margin(grid: MarginGrid) -> float:
    """Margin at the largest consecutive out-fraction drop.

    Scanning from the least negative margin toward more negative ones, the
    chosen value sits on the far side of the biggest drop. If no drop
    reaches TRANSITION_FLOOR the first grid entry wins (no transition, no
    margin), so the result is always a member of the grid.
    """
    if len(grid.etas) < 2:
        raise ValueError("need at least two grid points")
    best_drop = -math.inf
    best_i = 0
    for i in range(1, len(grid.etas)):
        drop = grid.out_fracs[i - 1] - grid.out_fracs[i]
        if drop > best_drop:
            best_drop = drop
            best_i = i
    if best_drop < TRANSITION_FLOOR:
        return grid.etas[0]
    return grid.etas[best_i]


def energy_histogram(id_energies, cov_energies, sem_energies, n_bins: int = 60):
    """Shared-bin counts of the three test-time energy populations.

    Returns (edges, counts_id, counts_cov, counts_sem) with ``n_bins + 1``
    edges spanning the combined range.
    """
    groups = [
        np.asarray(v, dtype=np.float64)
        for v in (id_energies, cov_energies, sem_energies)
    ]
    combined = np.concatenate([g for g in groups if g.size])
    if combined.size == 0:
        raise ValueError("all energy groups empty")
    lo = float(combined.min())
    hi = float(combined.max())
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    counts = [np.histogram(g, bins=edges)[0] for g in groups]
    return edges, counts[0], counts[1], counts[2]


def write_histogram_csv(path, id_energies, cov_energies, sem_energies,
                        n_bins: int = 60) -> None:
    """``bin_left,bin_right,count_id,count_cov,count_sem`` rows."""
    edges, c_id, c_cov, c_sem = energy_histogram(
        id_energies, cov_energies, sem_energies, n_bins
    )
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count_id,count_cov,count_sem\n")
        for i in range(len(edges) - 1):
            fh.write(
                f"{float(edges[i])!r},{float(edges[i + 1])!r},"
                f"{int(c_id[i])},{int(c_cov[i])},{int(c_sem[i])}\n"
            )


def evaluate_model(model: m.MlpModel, id_test: LabeledSet, cov_test: LabeledSet,
                   sem_test_xs, wild_val_xs, keep: float = 0.95) -> MetricsReport:
    """All headline metrics for one trained model."""
    e_id = m.energies(model, id_test.xs)
    e_sem = m.energies(model, np.atleast_2d(np.asarray(sem_test_xs, dtype=np.float64)))
    t = threshold_at_id_quantile(e_id, keep)
    return MetricsReport(
        id_acc=accuracy(model, id_test),
        ood_acc=accuracy(model, cov_test),
        fpr95=float(np.mean(e_sem <= t)),
        auroc=auroc(e_id, e_sem),
        out_frac=out_fraction(model, wild_val_xs),
        threshold=t,
    )
