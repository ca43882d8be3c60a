"""Empirical checker for the two-class Lipschitz margin guarantee.

Setting: a two-class score ``fbar`` (positive = class 1, negative = class
2) that is L-Lipschitz, and covariate-shifted points each within distance
``delta`` of a same-label ID point. If every ID point is classified
correctly with energy below the margin ``eta``, and

    eta < -log(2) - L * delta / 2,

then every covariate point must be classified correctly and carry negative
energy (detected IN). The checker tests that implication pointwise: a
"violation" is a pair whose ID-side premise holds while the covariate-side
conclusion fails, which is impossible when L is a true upper bound and the
margin is below the bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def eta_bound(lipschitz: float, delta: float) -> float:
    """Margin bound -log(2) - L*delta/2; margins below it trigger the guarantee."""
    if lipschitz <= 0 or delta <= 0:
        raise ValueError("need L > 0 and delta > 0")
    return -math.log(2.0) - 0.5 * lipschitz * delta


def two_class_energy(fbar_value: float) -> float:
    """Energy -log(exp(f/2) + exp(-f/2)) of a two-class score, stably.

    Equals -(|f|/2 + log1p(exp(-|f|))); symmetric in the sign of f and
    pinned between -|f|/2 - log(2) and -|f|/2.
    """
    a = abs(float(fbar_value))
    return -(0.5 * a + math.log1p(math.exp(-a)))


def premise_margin(eta: float) -> float:
    """Score magnitude implied by an ID energy below eta: |f| > -2*eta - 2*log(2)."""
    return -2.0 * eta - 2.0 * math.log(2.0)


def empirical_lipschitz(fbar, samples) -> float:
    """Largest observed slope |f(a)-f(b)| / ||a-b|| over all sample pairs.

    A lower bound on the true Lipschitz constant; coincident points are
    skipped.
    """
    xs = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if xs.shape[0] < 2:
        raise ValueError("need at least two samples")
    vals = np.array([float(fbar(x)) for x in xs])
    best = 0.0
    for i in range(xs.shape[0]):
        for j in range(i + 1, xs.shape[0]):
            dist = float(np.linalg.norm(xs[i] - xs[j]))
            if dist == 0.0:
                continue
            slope = abs(vals[i] - vals[j]) / dist
            if slope > best:
                best = slope
    return best


@dataclass
class LipschitzCase:
    """One checkable instance of the guarantee.

    ``pairs`` holds (id_point, covariate_point, label) triples with label in
    {1, 2} and pairwise feature distance < delta. ``l_asserted`` records
    whether ``lipschitz`` is a known upper bound (constructed functions) or
    merely an empirical estimate, in which case reports are flagged
    estimate-only and a violation indicts the estimate, not the theory.
    """

    fbar: object
    lipschitz: float
    pairs: list
    delta: float
    eta: float
    l_asserted: bool = False

    def __post_init__(self):
        if self.lipschitz <= 0 or self.delta <= 0:
            raise ValueError("need L > 0 and delta > 0")
        for i, (x_id, x_cov, label) in enumerate(self.pairs):
            if label not in (1, 2):
                raise ValueError(f"pair {i}: label {label} not in {{1, 2}}")
            d = float(np.linalg.norm(np.asarray(x_id, float) - np.asarray(x_cov, float)))
            if not d < self.delta:
                raise ValueError(
                    f"pair {i}: feature distance {d} not below delta {self.delta}"
                )


@dataclass
class PropReport:
    """Outcome of one guarantee check."""

    eta: float
    eta_bound: float
    margin_below_bound: bool
    estimate_only: bool
    premises_hold: list
    conclusions_hold: list
    violations: list = field(default_factory=list)

    @property
    def n_premises_held(self):
        return sum(self.premises_hold)

    def to_json(self, path=None) -> str:
        doc = {
            "eta": self.eta,
            "eta_bound": self.eta_bound,
            "margin_below_bound": self.margin_below_bound,
            "estimate_only": self.estimate_only,
            "n_pairs": len(self.premises_hold),
            "n_premises_held": int(self.n_premises_held),
            "n_conclusions_held": int(sum(self.conclusions_hold)),
            "violations": self.violations,
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def verify_proposition(case: LipschitzCase) -> PropReport:
    """Check premise -> conclusion on every pair and collect breaches.

    Premise (ID side): correct sign and |f| above the margin-implied bound.
    Conclusion (covariate side): correct sign and negative two-class energy.
    With ``l_asserted`` and eta below eta_bound, violations cannot occur.
    """
    bound = eta_bound(case.lipschitz, case.delta)
    need = premise_margin(case.eta)
    premises, conclusions, violations = [], [], []
    for i, (x_id, x_cov, label) in enumerate(case.pairs):
        f_id = float(case.fbar(np.asarray(x_id, dtype=np.float64)))
        f_cov = float(case.fbar(np.asarray(x_cov, dtype=np.float64)))
        sign_ok_id = f_id > 0 if label == 1 else f_id < 0
        premise = sign_ok_id and abs(f_id) > need
        e_cov = two_class_energy(f_cov)
        sign_ok_cov = f_cov > 0 if label == 1 else f_cov < 0
        conclusion = sign_ok_cov and e_cov < 0
        premises.append(premise)
        conclusions.append(conclusion)
        if premise and not conclusion:
            violations.append(
                {
                    "pair": i,
                    "label": int(label),
                    "id_point": np.asarray(x_id, dtype=float).tolist(),
                    "cov_point": np.asarray(x_cov, dtype=float).tolist(),
                    "fbar_id": f_id,
                    "fbar_cov": f_cov,
                    "energy_cov": e_cov,
                }
            )
    return PropReport(
        eta=case.eta,
        eta_bound=bound,
        margin_below_bound=case.eta < bound,
        estimate_only=not case.l_asserted,
        premises_hold=premises,
        conclusions_hold=conclusions,
        violations=violations,
    )
