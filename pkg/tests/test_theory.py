import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mipl_cdl.losses import mdl_loss
from mipl_cdl.theory import (
    check_lower_bound,
    check_phi_condition,
    confidence_margin,
    dataset_bound_summary,
    gamma_admissible,
    largest_admissible_gamma,
    mdl_decomposition,
    theorem_sweep,
)

P = np.array([0.6, 0.3, 0.1])
S12 = np.array([True, True, False])
W = np.array([0.5, 0.5, 0.0])
MDL_REF = -0.5 * (math.log(0.6) + math.log(0.3))


def test_confidence_margin_examples():
    assert confidence_margin([0.25, 0.25, 0.5], [True, True, False], "cc") == 0.0
    assert confidence_margin(P, S12, "cc") == pytest.approx(0.3, abs=1e-15)
    assert confidence_margin(P, S12, "cn") == pytest.approx(0.5, abs=1e-15)


def test_phi_condition():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.dirichlet(np.ones(5))
        mask = rng.random(5) < 0.5
        mask[0] = True
        assert check_phi_condition(p, mask, "cc")
    assert not check_phi_condition([0.2, 0.1, 0.7], S12, "cn")
    assert check_phi_condition([0.5, 0.5, 0.0], S12, "cn")
    assert check_phi_condition([0.5, 0.5], [True, True], "cn")


def test_gamma_admissibility():
    assert gamma_admissible(1, 0.5)
    assert not gamma_admissible(2, 0.5)
    assert gamma_admissible(3, 0.3)
    assert gamma_admissible(50, 0.0)
    assert not gamma_admissible(0, 0.1)
    assert not gamma_admissible(1.5, 0.1)


@pytest.mark.parametrize("beta", [0.05, 0.1, 0.3, 0.33, 0.5, 0.7, 0.999])
def test_largest_admissible_gamma(beta):
    g = largest_admissible_gamma(beta, cap=100)
    assert g * beta < 1
    assert (g + 1) * beta >= 1 or g == 100


def test_bound_gamma_one_is_equality():
    res = check_lower_bound(W, P, S12, "cc", 1)
    assert res.lhs == pytest.approx(0.7 * MDL_REF, abs=1e-14)
    assert res.rhs == pytest.approx(0.7 * MDL_REF, abs=1e-14)
    assert abs(res.gap) < 1e-12 and res.holds


def test_bound_gamma_two_example():
    res = check_lower_bound(W, P, S12, "cc", 2)
    assert res.lhs == pytest.approx(0.49 * MDL_REF, abs=1e-14)
    assert res.rhs == pytest.approx(0.4 * MDL_REF, abs=1e-14)
    assert round(res.lhs, 4) == 0.4201 and round(res.rhs, 4) == 0.3430
    assert res.holds and res.phi_ok and res.gamma_ok


def test_bound_zero_margin_gives_equality():
    p = np.array([0.4, 0.4, 0.2])
    res = check_lower_bound(W, p, S12, "cc", 4)
    assert res.lhs == pytest.approx(res.mdl, abs=1e-15)
    assert res.rhs == pytest.approx(res.mdl, abs=1e-15)


def test_mdl_decomposition_example():
    kl, h = mdl_decomposition(W, P, S12)
    assert kl == pytest.approx(0.5 * math.log(0.5 / 0.6) + 0.5 * math.log(0.5 / 0.3), abs=1e-15)
    assert kl == pytest.approx(0.1642, abs=1e-4)
    assert h == pytest.approx(math.log(2), abs=1e-15)
    assert kl + h == pytest.approx(mdl_loss(W, P).item(), abs=1e-12)


def test_mdl_decomposition_special_cases():
    kl, h = mdl_decomposition([0.0, 1.0, 0.0], P, S12)
    assert h == 0.0
    assert kl == pytest.approx(-math.log(0.3), abs=1e-15)
    p = np.array([0.3, 0.7, 0.0])
    kl, h = mdl_decomposition([0.3, 0.7, 0.0], p, S12)
    assert abs(kl) < 1e-15
    assert h == pytest.approx(mdl_loss([0.3, 0.7, 0.0], p).item(), abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_decomposition_sums_to_mdl(k, seed):
    rng = np.random.default_rng(seed)
    mask = np.zeros(k, dtype=bool)
    mask[rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False)] = True
    p = rng.dirichlet(np.ones(k) * 0.3)
    w = np.zeros(k)
    w[mask] = rng.dirichlet(np.ones(mask.sum()) * 0.3)
    kl, h = mdl_decomposition(w, p, mask)
    assert abs(kl + h - mdl_loss(w, p).item()) < 1e-12
    assert kl >= -1e-12 or p[mask].sum() < 1


def test_theorem_sweep_has_no_violations():
    start = time.perf_counter()
    rep = theorem_sweep(n=10_000, seed=0)
    elapsed = time.perf_counter() - start
    assert rep.tuples == 10_000
    assert rep.violations == 0, rep.failures[:3]
    assert rep.phi_violations["cc"] == 0
    assert rep.phi_condition_rate("cc") == 1.0
    assert rep.checked > 5_000
    assert rep.gamma_one_checked > 0 and rep.gamma_one_max_abs_gap < 1e-12
    assert rep.decomposition_max_error < 1e-12
    assert elapsed < 30.0


def test_sweep_with_fixed_gamma_skips_inadmissible_tuples():
    rep = theorem_sweep(n=500, seed=1, gamma=3)
    assert rep.violations == 0
    assert rep.beta_max * 3 < 1
    d = rep.to_dict()
    assert set(d["phi_condition_rate"]) == {"cc", "cn"}


def test_sweep_is_deterministic():
    assert theorem_sweep(n=300, seed=7).to_dict() == theorem_sweep(n=300, seed=7).to_dict()


def test_dataset_bound_summary():
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.1, 0.7]])
    mask = np.array([[True, True, False], [True, True, False]])
    w = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
    out = dataset_bound_summary(w, probs, mask, "cn", 1)
    assert out["bags"] == 2
    assert out["phi_condition_rate"] == 0.5
    assert out["beta_max"] == pytest.approx(0.5)
    assert out["violations"] == 0
