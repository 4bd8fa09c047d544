import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mipl_cdl.calibration import (
    PredictionRecord,
    accuracy,
    bin_index,
    ece,
    make_records,
    parse_reliability_csv,
    probability_breakdown,
    reliability_csv,
)
from mipl_cdl.errors import UsageError


def brute_force_ece(conf, correct, n_bins):
    """Loop over bins and records, testing membership from the interval definition."""
    m = len(conf)
    total = 0.0
    for r in range(1, n_bins + 1):
        lo, hi = (r - 1) / n_bins, r / n_bins
        members = [j for j in range(m) if (lo < conf[j] <= hi) or (r == 1 and conf[j] == 0.0)]
        if not members:
            continue
        a = sum(correct[j] for j in members) / len(members)
        p = sum(conf[j] for j in members) / len(members)
        total += len(members) / m * abs(a - p)
    return total


def test_worked_example_two_bins():
    rep = ece((np.array([0.3, 0.4, 0.9, 0.9]), np.array([1, 0, 1, 1])), n_bins=2)
    np.testing.assert_array_equal(rep.counts, [2, 2])
    np.testing.assert_allclose(rep.accuracy, [0.5, 1.0])
    np.testing.assert_allclose(rep.confidence, [0.35, 0.9])
    assert rep.ece == pytest.approx(0.125, abs=1e-15)
    assert brute_force_ece([0.3, 0.4, 0.9, 0.9], [1, 0, 1, 1], 2) == pytest.approx(0.125, abs=1e-15)


def test_single_bin_identity_and_perfect_bins():
    assert ece((np.full(4, 0.75), np.array([1, 1, 1, 0])), n_bins=15).ece == pytest.approx(0.0, abs=1e-15)
    conf = np.array([0.5, 0.5, 1.0, 1.0])
    assert ece((conf, np.array([1, 0, 1, 1])), n_bins=10).ece == pytest.approx(0.0, abs=1e-15)


def test_bin_edges_are_right_inclusive():
    R = 15
    edges = np.arange(1, R + 1) / R
    np.testing.assert_array_equal(bin_index(edges, R), np.arange(R))
    np.testing.assert_array_equal(bin_index(np.nextafter(edges[:-1], 2.0), R), np.arange(1, R))
    assert bin_index([0.0], R)[0] == 0


def test_empty_record_set_is_usage_error():
    with pytest.raises(UsageError):
        ece([])


@pytest.mark.parametrize("seed", range(100))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 400))
    conf = rng.uniform(size=m)
    # include exact edges and zero in some record sets
    if seed % 3 == 0:
        conf[: m // 4] = rng.integers(0, 16, size=m // 4) / 15
    correct = (rng.uniform(size=m) < conf).astype(float)
    rep = ece((conf, correct), 15)
    assert abs(rep.ece - brute_force_ece(conf, correct, 15)) < 1e-12
    assert rep.total == m
    assert 0.0 <= rep.ece <= 1.0


def test_brute_force_agreement_at_full_size():
    rng = np.random.default_rng(123)
    conf = rng.uniform(size=10_000)
    correct = (rng.uniform(size=10_000) < conf**2).astype(float)
    assert abs(ece((conf, correct), 15).ece - brute_force_ece(conf, correct, 15)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_permutation_invariance(m, seed):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(size=m)
    correct = rng.integers(0, 2, size=m).astype(float)
    perm = rng.permutation(m)
    assert ece((conf, correct)).ece == pytest.approx(ece((conf[perm], correct[perm])).ece, abs=1e-12)


def test_perfectly_calibrated_predictor():
    rng = np.random.default_rng(0)
    conf = rng.uniform(size=100_000)
    correct = (rng.uniform(size=100_000) < conf).astype(float)
    assert ece((conf, correct)).ece < 0.01


def test_records_and_accuracy():
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.4, 0.4], [1 / 3, 1 / 3, 1 / 3]])
    recs = make_records([10, 11, 12], probs, [1, 3, 1], [(1, 2), (2, 3), (1,)])
    assert [r.predicted for r in recs] == [1, 2, 1]
    assert [r.confidence for r in recs] == [0.6, 0.4, 1 / 3]
    assert accuracy(recs) == pytest.approx(2 / 3)
    rep = ece(recs, 15)
    assert rep.total == 3


def test_breakdown_single_record():
    rec = make_records([0], np.array([[0.6, 0.3, 0.1]]), [1], [(1, 2)])
    assert probability_breakdown(rec) == {"true": 0.6, "fp": 0.3, "nc": 0.1}


def test_breakdown_empty_false_positive_category():
    rec = make_records([0, 1], np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]]), [1, 2], [(1,), (2,)])
    out = probability_breakdown(rec)
    assert out["fp"] is None
    assert out["true"] == pytest.approx(0.75)
    assert out["nc"] == pytest.approx(0.125)


def test_breakdown_reconstructs_probability_mass():
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = 6
        p = rng.dirichlet(np.ones(k))
        y = int(rng.integers(1, k + 1))
        others = [c for c in range(1, k + 1) if c != y]
        fp = rng.choice(others, size=int(rng.integers(0, k - 1)), replace=False).tolist()
        rec = make_records([0], p[None], [y], [tuple(sorted([y] + fp))])
        out = probability_breakdown(rec)
        n_fp, n_nc = len(fp), k - 1 - len(fp)
        total = out["true"] + (out["fp"] or 0) * n_fp + (out["nc"] or 0) * n_nc
        assert total == pytest.approx(1.0, abs=1e-12)


def test_reliability_csv_round_trip():
    rng = np.random.default_rng(2)
    conf = rng.uniform(0.2, 0.9, size=200)
    correct = rng.integers(0, 2, size=200).astype(float)
    rep = ece((conf, correct), 15)
    text = reliability_csv(rep)
    lines = text.strip().split("\n")
    assert lines[0] == "bin,lower,upper,count,accuracy,confidence"
    assert len(lines) == 16
    back = parse_reliability_csv(text)
    np.testing.assert_array_equal(back.counts, rep.counts)
    np.testing.assert_array_equal(back.accuracy, rep.accuracy)
    np.testing.assert_array_equal(back.confidence, rep.confidence)
    assert back.ece == pytest.approx(rep.ece, abs=1e-15)
    # empty bins export zeros
    assert lines[1].endswith(",0,0.0,0.0")


def test_prediction_record_correctness_flag():
    rec = PredictionRecord(0, np.array([0.5, 0.5]), 1, 0.5, 2, (1, 2))
    assert not rec.correct
