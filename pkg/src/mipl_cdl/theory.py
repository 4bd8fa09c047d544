"""Numerical checks of the CDL lower bound ``L_CDL >= (1 - gamma * beta) * L_MDL``.

The bound follows from Bernoulli's inequality applied to the per-bag
modulating base, and requires ``max_{c in S} p_c - 1 <= Phi <= max_{c in S} p_c``
together with an integer ``gamma`` in ``[1, 1 / beta_max)``.  Violations are
collected, never raised.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from mipl_cdl.data import make_rng
from mipl_cdl.losses import PHI, cdl_loss, max_candidate, mdl_loss

SLACK = 1e-9


def confidence_margin(probs, candidates, variant: str) -> float:
    return float(max_candidate(probs, candidates).data - PHI[variant](probs, candidates).data)


def check_phi_condition(probs, candidates, variant: str) -> bool:
    top = float(max_candidate(probs, candidates).data)
    phi = float(PHI[variant](probs, candidates).data)
    return top - 1.0 <= phi <= top


def gamma_admissible(gamma: float, beta_max: float) -> bool:
    """Integer gamma >= 1 with gamma * beta_max < 1 (beta_max = 0 admits every gamma)."""
    if gamma < 1 or gamma != int(gamma):
        return False
    return gamma * beta_max < 1.0


def largest_admissible_gamma(beta: float, cap: int = 10) -> int:
    """Largest integer gamma <= cap with gamma * beta < 1 (0 if none)."""
    if beta <= 0:
        return cap
    g = int(np.ceil(1.0 / beta)) - 1
    while g >= 1 and g * beta >= 1.0:
        g -= 1
    return min(g, cap)


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x * np.log(np.maximum(y, 1e-300)), 0.0)


def mdl_decomposition(weights, probs, candidates) -> tuple:
    """``(KL(w || p), H[w])`` over the candidate set, with 0 log 0 = 0.

    Probabilities are clamped at 1e-12 like the loss itself, so the two
    terms add up to :func:`mdl_loss`.
    """
    w = np.asarray(weights, dtype=np.float64)
    p = np.maximum(np.asarray(probs, dtype=np.float64), 1e-12)
    mask = np.asarray(candidates, dtype=bool)
    w = np.where(mask, w, 0.0)
    entropy = -float(np.sum(_xlogy(w, w)))
    kl = float(np.sum(_xlogy(w, w)) - np.sum(np.where(w > 0, w * np.log(p), 0.0)))
    return kl, entropy


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    mdl: float
    beta: float
    gamma: float
    variant: str
    phi_ok: bool
    gamma_ok: bool
    holds: bool

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs


def check_lower_bound(weights, probs, candidates, variant: str, gamma: int) -> BoundCheck:
    lhs = float(cdl_loss(weights, probs, candidates, variant=variant, gamma=gamma).data)
    mdl = float(mdl_loss(weights, probs).data)
    beta = confidence_margin(probs, candidates, variant)
    rhs = (1.0 - gamma * beta) * mdl
    return BoundCheck(lhs, rhs, mdl, beta, float(gamma), variant,
                      check_phi_condition(probs, candidates, variant),
                      gamma_admissible(gamma, max(beta, 0.0)),
                      lhs >= rhs - SLACK)


@dataclass
class SweepReport:
    tuples: int = 0
    checked: int = 0
    violations: int = 0
    max_violation: float = 0.0
    phi_violations: dict = field(default_factory=lambda: {"cc": 0, "cn": 0})
    phi_total: dict = field(default_factory=lambda: {"cc": 0, "cn": 0})
    gamma_one_checked: int = 0
    gamma_one_max_abs_gap: float = 0.0
    decomposition_max_error: float = 0.0
    beta_min: float = float("inf")
    beta_max: float = float("-inf")
    beta_mean: float = 0.0
    failures: list = field(default_factory=list)

    def phi_condition_rate(self, variant: str) -> float | None:
        n = self.phi_total[variant]
        return None if n == 0 else 1.0 - self.phi_violations[variant] / n

    def to_dict(self) -> dict:
        out = asdict(self)
        out["phi_condition_rate"] = {v: self.phi_condition_rate(v) for v in ("cc", "cn")}
        if self.checked == 0:
            out["beta_min"] = out["beta_max"] = None
        return out


def _random_tuple(rng: np.random.Generator, k_max: int):
    k = int(rng.integers(2, k_max + 1))
    size = int(rng.integers(2, k + 1))
    mask = np.zeros(k, dtype=bool)
    mask[rng.choice(k, size=size, replace=False)] = True
    probs = rng.dirichlet(np.ones(k))
    weights = np.zeros(k)
    weights[mask] = rng.dirichlet(np.ones(size))
    return probs, weights, mask


def theorem_sweep(n: int = 10_000, seed: int = 0, k_max: int = 10, variants=("cc", "cn"),
                  gamma: int | None = None, gamma_cap: int = 10, max_failures: int = 20) -> SweepReport:
    """Randomized check of the lower bound on Dirichlet(1) probabilities and weights.

    With ``gamma=None`` each tuple draws an admissible integer gamma; a fixed
    gamma is used only on tuples where it is admissible.
    """
    rng = make_rng(seed)
    report = SweepReport()
    beta_sum = 0.0
    for i in range(n):
        probs, weights, mask = _random_tuple(rng, k_max)
        variant = variants[int(rng.integers(len(variants)))]
        report.tuples += 1
        report.phi_total[variant] += 1

        kl, ent = mdl_decomposition(weights, probs, mask)
        mdl = float(mdl_loss(weights, probs).data)
        report.decomposition_max_error = max(report.decomposition_max_error, abs(kl + ent - mdl))

        if not check_phi_condition(probs, mask, variant):
            report.phi_violations[variant] += 1
            continue
        beta = confidence_margin(probs, mask, variant)
        g_hi = largest_admissible_gamma(beta, gamma_cap)
        if gamma is None:
            if g_hi < 1:
                continue
            g = int(rng.integers(1, g_hi + 1))
        else:
            if not gamma_admissible(gamma, max(beta, 0.0)):
                continue
            g = int(gamma)
        res = check_lower_bound(weights, probs, mask, variant, g)
        report.checked += 1
        beta_sum += beta
        report.beta_min = min(report.beta_min, beta)
        report.beta_max = max(report.beta_max, beta)
        if not res.holds:
            report.violations += 1
            report.max_violation = max(report.max_violation, -res.gap)
            if len(report.failures) < max_failures:
                report.failures.append({"index": i, "probs": probs.tolist(), "weights": weights.tolist(),
                                        "candidates": mask.tolist(), "variant": variant, "gamma": g,
                                        "lhs": res.lhs, "rhs": res.rhs})
        if g == 1:
            report.gamma_one_checked += 1
            report.gamma_one_max_abs_gap = max(report.gamma_one_max_abs_gap, abs(res.gap))
    report.beta_mean = beta_sum / report.checked if report.checked else 0.0
    return report


def dataset_bound_summary(weights: np.ndarray, probs: np.ndarray, candidates: np.ndarray,
                          variant: str, gamma: int) -> dict:
    """Per-dataset view: beta_max, gamma admissibility and bound violations over all bags."""
    checks = [check_lower_bound(weights[i], probs[i], candidates[i], variant, gamma)
              for i in range(len(probs))]
    betas = np.array([c.beta for c in checks])
    beta_max = float(betas.max()) if len(betas) else 0.0
    return {
        "variant": variant,
        "gamma": gamma,
        "bags": len(checks),
        "beta_max": beta_max,
        "beta_mean": float(betas.mean()) if len(betas) else 0.0,
        "gamma_admissible": gamma_admissible(gamma, max(beta_max, 0.0)),
        "phi_condition_rate": float(np.mean([c.phi_ok for c in checks])) if checks else 1.0,
        "violations": int(sum(1 for c in checks if c.phi_ok and not c.holds)),
    }
