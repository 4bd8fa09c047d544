import math

import numpy as np
import pytest

from mipl_cdl import numerics as nx
from mipl_cdl.data import Bag, GenConfig, collate, generate_synthetic
from mipl_cdl.errors import ConfigurationError
from mipl_cdl.model import (
    AttentionConfig,
    MiplModel,
    ModelConfig,
    aggregate,
    anneal_temperature,
    attention_dam,
    attention_mam,
    attention_sam,
    predict_from_probs,
)


def _sigm(x):
    return 1.0 / (1.0 + np.exp(-x))


def _model(variant="sam", d=4, k=3, hidden=(5,), seed=0, **att):
    cfg = ModelConfig(d, k, hidden=hidden, scorer_hidden=6, attention=AttentionConfig(variant, **att))
    return MiplModel(cfg, seed=seed)


def test_identity_extractor_returns_raw_instances():
    model = _model(hidden=())
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(model.extract_features(x).data, x)


def test_extractor_shapes_and_dimension_check():
    model = _model()
    assert model.extract_features(np.ones((1, 4))).shape == (1, 5)
    with pytest.raises(ConfigurationError):
        model.extract_features(np.ones((2, 3)))


def test_batch_preserves_per_bag_counts():
    model = _model()
    bags = [Bag(i, np.full((n, 4), float(i)), (1,), 1) for i, n in enumerate([1, 4, 2])]
    out = model.forward(collate(bags, 3))
    assert out.embeddings.shape == (7, 5)
    assert out.probs.shape == (3, 3)
    np.testing.assert_allclose(nx.segment_sum(out.attention, collate(bags, 3).segments, 3).data, 1.0)


def test_gated_score_matches_straight_line_evaluation():
    model = _model()
    h = np.random.default_rng(4).normal(size=(3, 5))
    got = model.score_instances(h).data
    want = (np.tanh(h @ model.w_tanh.data + model.b_tanh.data)
            * _sigm(h @ model.w_sigm.data + model.b_sigm.data)) @ model.w_out.data + model.b_out.data
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-15)


def test_zero_output_weights_give_zero_scores():
    model = _model()
    model.w_out.data[:] = 0.0
    model.b_out.data[...] = 0.0
    h = np.random.default_rng(1).normal(size=(4, 5))
    np.testing.assert_array_equal(model.score_instances(h).data, np.zeros(4))


def test_identical_instances_identical_scores():
    model = _model()
    h = np.tile(np.random.default_rng(2).normal(size=5), (3, 1))
    s = model.score_instances(h).data
    assert s[0] == s[1] == s[2]


def test_dam_weights():
    np.testing.assert_allclose(attention_dam([0.3, 0.3, 0.3, 0.3]).data, 0.25)
    assert attention_dam([5.0]).data[0] == 1.0
    np.testing.assert_allclose(attention_dam([0.0, math.log(3)]).data, [0.4, 0.6], atol=1e-15)


def test_sam_weights():
    np.testing.assert_allclose(attention_sam([1.0, 1.0], 4.0).data, 0.5)
    e = math.e
    np.testing.assert_allclose(attention_sam([0.0, 1.0], 1.0).data, [1 / (1 + e), e / (1 + e)], atol=1e-15)
    wide = attention_sam([-3.0, 0.0, 7.0], 1e12).data
    np.testing.assert_allclose(wide, 1 / 3, atol=1e-5)


def test_mam_matches_direct_evaluation():
    soft = np.exp([0.0, 1.0, 2.0]) / np.exp([0.0, 1.0, 2.0]).sum()
    want = (soft - soft.mean()) / soft.std(ddof=1)
    np.testing.assert_allclose(attention_mam([0.0, 1.0, 2.0], 1.0).data, want, atol=1e-14)


def test_mam_degenerate_cases_give_zero_weights():
    np.testing.assert_array_equal(attention_mam([0.7, 0.7, 0.7], 0.5).data, 0.0)
    np.testing.assert_array_equal(attention_mam([2.0], 0.5).data, 0.0)


def test_mam_standardization_law():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a = attention_mam(rng.normal(size=rng.integers(2, 12)), rng.uniform(0.1, 2)).data
        assert abs(a.mean()) < 1e-9
        assert abs(a.std(ddof=1) - 1.0) < 1e-9


def test_temperature_annealing():
    assert anneal_temperature(0.1, 0.1) == 0.1
    assert anneal_temperature(1.0, 0.1) == 0.95
    tau, t = 1.0, 0
    while tau > 0.1:
        tau = anneal_temperature(tau, 0.1)
        t += 1
    assert t == 45


def test_aggregate():
    h = np.random.default_rng(5).normal(size=(4, 3))
    np.testing.assert_array_equal(aggregate([0.0, 0.0, 1.0, 0.0], h).data, h[2])
    np.testing.assert_allclose(aggregate(np.full(4, 0.25), h).data, h.mean(axis=0), atol=1e-15)
    a = np.random.default_rng(6).uniform(size=4)
    want = np.array([sum(a[j] * h[j, c] for j in range(4)) for c in range(3)])
    np.testing.assert_allclose(aggregate(a, h).data, want, atol=1e-14)
    with pytest.raises(ConfigurationError):
        aggregate([1.0, 0.0], h)


def test_classifier_outputs():
    model = _model()
    model.w_cls.data[:] = 0.0
    model.b_cls.data[:] = 0.0
    np.testing.assert_allclose(model.classify(np.ones((2, 5))).data, 1 / 3)
    model.b_cls.data[:] = [0.0, math.log(2), 0.0]
    model.w_cls.data[:] = 0.0
    p = nx.softmax(np.array([0.0, math.log(2)])).data
    np.testing.assert_allclose(p, [1 / 3, 2 / 3], atol=1e-15)
    z = np.random.default_rng(0).normal(size=(50, 5)) * 10
    model.w_cls.data[:] = np.random.default_rng(1).normal(size=(5, 3))
    assert np.all(np.abs(model.classify(z).data.sum(axis=1) - 1) < 1e-12)


def test_predict_tie_break_and_confidence():
    assert predict_from_probs(np.full(4, 0.25)) == (1, 0.25)
    assert predict_from_probs(np.array([0.1, 0.7, 0.2])) == (2, 0.7)
    logits = np.array([0.3, 2.0, -1.0])
    label, conf = predict_from_probs(nx.softmax(logits).data)
    shifted_label, shifted_conf = predict_from_probs(nx.softmax(logits + 17.0).data)
    assert label == shifted_label == 2
    assert conf == pytest.approx(shifted_conf, abs=1e-15)


@pytest.mark.parametrize("variant", ["dam", "sam", "mam"])
def test_attention_invariants_on_random_bags(variant):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        s = rng.normal(size=n) * 3
        perm = rng.permutation(n)
        if variant == "dam":
            a, ap = attention_dam(s).data, attention_dam(s[perm]).data
        elif variant == "sam":
            a, ap = attention_sam(s, 8.0).data, attention_sam(s[perm], 8.0).data
        else:
            a, ap = attention_mam(s, 0.7).data, attention_mam(s[perm], 0.7).data
        np.testing.assert_allclose(ap, a[perm], atol=1e-14)
        if variant != "mam":
            assert np.all(a >= 0) and abs(a.sum() - 1) < 1e-12


@pytest.mark.parametrize("variant", ["dam", "sam", "mam"])
def test_full_forward_gradient_check(variant):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = _model(variant, seed=seed, tau0=0.8)
        bags = [Bag(i, rng.normal(size=(int(rng.integers(2, 6)), 4)), (1,), 1) for i in range(3)]
        batch = collate(bags, 3)
        c = rng.normal(size=(3, 3))
        fn = lambda: (model.forward(batch).probs * c).sum()
        fn().backward()
        for p in model.parameters():
            analytic = p.grad.copy()
            central = nx.numerical_gradient(fn, p, 1e-5)
            # entries with vanishing gradient are roundoff-limited, hence the absolute floor
            np.testing.assert_allclose(analytic, central, rtol=1e-4, atol=1e-9, err_msg=p.name)
            p.zero_grad()


def test_checkpoint_round_trip(tmp_path):
    model = _model("mam", tau0=2.0, tau_min=0.5)
    model.anneal()
    path = tmp_path / "ckpt.json"
    model.save(path)
    loaded = MiplModel.load(path)
    assert loaded.tau == model.tau and loaded.config == model.config
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.name == b.name
        assert a.data.tobytes() == b.data.tobytes()
    bag = generate_synthetic(GenConfig(m=1, k=3, d=4, n_min=3, n_max=3, r=0, seed=0)).bags[0]
    assert model.predict(bag) == loaded.predict(bag)


def test_attention_config_validation():
    with pytest.raises(ConfigurationError):
        AttentionConfig("xam")
    with pytest.raises(ConfigurationError):
        AttentionConfig("sam", sam_scale=0.0)
    with pytest.raises(ConfigurationError):
        AttentionConfig("mam", tau0=0.05, tau_min=0.1)
