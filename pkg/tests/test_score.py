import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodbench import data as D
from oodbench import nn
from oodbench import score as S
from oodbench import train as tr

SMALL = dict(input_shape=(1, 8, 8), channels=(4, 6), num_classes=3)
logit_rows = arrays(np.float64, (4, 5), elements=st.floats(-20, 20))


def model(method="t2fnorm", seed=0, **kw):
    m = nn.init_model(nn.ModelSpec(**{**SMALL, **kw}, method=method), seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.params:
        if p.role in ("bias", "fc-bias"):
            p.value.data = rng.normal(scale=0.1, size=p.value.shape)
    return m


def images(n=6, seed=0):
    return np.random.default_rng(seed).normal(size=(n, *SMALL["input_shape"]))


def dataset(n=6, seed=0):
    return D.Dataset(images(n, seed), [], f"set{seed}", np.zeros(1), np.ones(1))


# ----------------------------------------------------------------------
# logit scores
# ----------------------------------------------------------------------
def test_msp_hand_values():
    assert S.msp(np.zeros((1, 10)))[0] == pytest.approx(0.1, abs=1e-15)
    assert S.msp(np.array([[50.0, 0.0, 0.0]]))[0] == pytest.approx(1.0, abs=1e-20)


def test_msp_direct_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(50, 5))
    oracle = [max(math.exp(v) for v in row) / math.fsum(math.exp(v) for v in row) for row in z]
    np.testing.assert_allclose(S.msp(z), oracle, rtol=0, atol=1e-12)


def test_tempscale_identities():
    z = np.random.default_rng(2).normal(size=(20, 4))
    assert np.array_equal(S.tempscale(z, 1.0), S.msp(z))
    assert S.tempscale(z, 1e12) == pytest.approx(np.full(20, 0.25), abs=1e-9)
    with pytest.raises(ValueError):
        S.tempscale(z, 0.0)


def test_fit_temperature_is_grid_argmin():
    rng = np.random.default_rng(3)
    z = rng.normal(scale=4.0, size=(200, 4))
    y = np.where(rng.uniform(size=200) < 0.6, z.argmax(1), rng.integers(0, 4, 200))
    t = S.fit_temperature(z, y)
    assert t in S.TEMPERATURE_GRID
    assert S.nll(z, y, t) == min(S.nll(z, y, g) for g in S.TEMPERATURE_GRID)


def test_energy_hand_values_and_oracle():
    assert S.energy(np.zeros((1, 10)))[0] == pytest.approx(math.log(10), abs=1e-15)
    assert S.energy(np.array([[3.25]]))[0] == 3.25
    z = np.random.default_rng(4).normal(size=(50, 5))
    np.testing.assert_allclose(S.energy(z), [math.log(math.fsum(math.exp(v) for v in r)) for r in z], rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.floats(-50, 50))
def test_shift_invariance(z, c):
    np.testing.assert_allclose(S.msp(z + c), S.msp(z), rtol=0, atol=1e-12)
    e1, e2 = S.energy(z), S.energy(z + c)
    np.testing.assert_allclose(e2 - e1, c, rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(logit_rows)
def test_msp_range(z):
    s = S.msp(z)
    assert np.all((s > 0) & (s <= 1))


# ----------------------------------------------------------------------
# ODIN
# ----------------------------------------------------------------------
def test_odin_degenerates_to_msp_and_tempscale():
    m = model()
    x = images()
    logits, _, _ = tr.score_outputs(m, x)
    assert np.array_equal(S.odin(m, x, 1.0, 0.0), S.msp(logits))
    assert np.array_equal(S.odin(m, x, 1000.0, 0.0), S.tempscale(logits, 1000.0))


def test_odin_perturbation_matches_analytic_sign():
    # one conv block with a single 1x1 kernel weight k, zero bias, one-pixel images: h* = relu(k x).
    # The FC layer maps h*/tau to logits (a h, b h); -log msp falls as the winning margin grows.
    spec = nn.ModelSpec(input_shape=(1, 1, 1), channels=(1,), kernel_size=1, num_classes=2, method="t2fnorm", tau=0.5)
    m = nn.init_model(spec, 0)
    m["conv1.weight"].data = np.array([[[[2.0]]]])
    m.fc_weight.data = np.array([[1.0], [-1.0]])
    m.fc_bias.data = np.zeros(2)
    x = np.array([[[[0.3]]], [[[1.1]]]])
    eps = 0.01
    got = S.odin(m, x, temperature=1.0, epsilon=eps)
    # margin (2/tau) * h grows with x, so the step is +eps on every input
    x_tilde = x + eps
    h = np.maximum(2.0 * x_tilde[:, 0, 0, 0], 0) / 0.5
    expected = S.msp(np.stack([h, -h], axis=1))
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


def test_odin_rejects_negative_epsilon():
    with pytest.raises(ValueError):
        S.odin(model(), images(), 1000.0, -0.1)


def test_odin_leaves_model_grads_clean():
    m = model()
    S.odin(m, images())
    assert all(p.value.grad is None for p in m.params)


# ----------------------------------------------------------------------
# GradNorm
# ----------------------------------------------------------------------
def test_gradnorm_single_class_is_zero():
    h = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(S.gradnorm_from_features(h, np.ones((1, 3)), np.zeros(1)), np.zeros(4))


def test_gradnorm_two_class_hand_formula():
    # KL(u || softmax(z)) = -1/C sum log p_c - log C; dKL/dW = (p - u) h^T, so |.|_1 = |p - u|_1 |h|_1
    rng = np.random.default_rng(1)
    w, b = rng.normal(size=(2, 5)), rng.normal(size=2)
    h = rng.normal(size=(30, 5))
    z = h @ w.T + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expected = np.abs(p - 0.5).sum(1) * np.abs(h).sum(1)
    np.testing.assert_allclose(S.gradnorm_from_features(h, w, b), expected, rtol=0, atol=1e-9)


def test_gradnorm_nonnegative_on_model():
    s = S.gradnorm(model(), images(10))
    assert s.shape == (10,) and np.all(s >= 0)


# ----------------------------------------------------------------------
# DICE
# ----------------------------------------------------------------------
def test_dice_mask_extremes():
    c = np.random.default_rng(0).normal(size=(3, 4))
    assert S.dice_mask_from_contrib(c, 0.0).all()
    assert not S.dice_mask_from_contrib(c, 1.0).any()


def test_dice_mask_exhaustive_sort_oracle():
    w = np.array([[0.5, -1.0, 2.0], [1.5, 0.1, -0.3]])
    v = np.array([1.0, 2.0, 0.5])
    contrib = w * v
    for p in (0.0, 0.2, 0.5, 0.7, 0.9, 1.0):
        k = int(round((1 - p) * 6))
        entries = sorted(((contrib[i, j], -(i * 3 + j), (i, j)) for i in range(2) for j in range(3)), reverse=True)
        keep = {e[2] for e in entries[:k]}
        mask = S.dice_mask_from_contrib(contrib, p)
        assert {tuple(ix) for ix in np.argwhere(mask)} == keep


def test_dice_p1_logits_are_bias():
    m = model()
    x = dataset()
    mask = S.dice_precompute(m, x, 1.0)
    _, _, h = tr.score_outputs(m, x.images)
    np.testing.assert_array_equal(S.dice_logits(h, m.fc_weight.data, m.fc_bias.data, mask),
                                  np.broadcast_to(m.fc_bias.data, (len(h), 3)))


def test_dice_p0_is_energy_bitwise():
    m = model()
    x = images(20)
    mask = S.dice_precompute(m, dataset(30, 1), 0.0)
    logits, _, _ = tr.score_outputs(m, x)
    assert np.array_equal(S.dice_score(m, x, mask), S.energy(logits))


def test_dice_toy_hand_masked_product():
    w = np.array([[1.0, -2.0, 0.5], [0.2, 3.0, -1.0]])
    b = np.array([0.1, -0.2])
    h = np.array([[1.0, 2.0, 3.0], [0.5, 0.0, 1.0]])
    mask = np.array([[True, False, True], [False, True, False]])
    z = np.array([[1.0 * 1 + 0.5 * 3 + 0.1, 3.0 * 2 - 0.2], [1.0 * 0.5 + 0.5 * 1 + 0.1, -0.2]])
    np.testing.assert_allclose(S.dice_logits(h, w, b, mask), z, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        S.dice_logits(h, w, b, mask[:, :2])


def test_dice_sweep_is_finite_and_needs_sample():
    m = model()
    for p in np.round(np.arange(0, 1.0, 0.1), 1):
        mask = S.dice_precompute(m, dataset(20, 1), float(p))
        assert np.all(np.isfinite(S.dice_score(m, images(), mask)))
    with pytest.raises(ValueError):
        S.dice_precompute(m, np.zeros((0, 1, 8, 8)))


# ----------------------------------------------------------------------
# score_dataset and ScoreSet
# ----------------------------------------------------------------------
def test_scorer_spec_defaults_and_validation():
    s = S.ScorerSpec("odin")
    assert (s.odin_temperature, s.odin_epsilon, s.dice_p, s.normalize_at_scoring) == (1000.0, 0.0014, 0.9, False)
    for bad in (dict(kind="mahalanobis"), dict(kind="odin", odin_epsilon=-1), dict(kind="dice", dice_p=1.5),
                dict(kind="tempscale", tempscale_T=0)):
        with pytest.raises(ValueError):
            S.ScorerSpec(**bad)


def test_score_dataset_all_kinds(tmp_path):
    m = model()
    d = dataset(9)
    mask = S.dice_precompute(m, d, 0.9)
    for kind in S.SCORER_KINDS:
        spec = S.ScorerSpec(kind, tempscale_T=1.5 if kind == "tempscale" else None)
        ss = S.score_dataset(m, d, spec, "m0", dice_mask=mask)
        assert len(ss) == len(d) and np.all(np.isfinite(ss.scores))
        path = tmp_path / ss.filename()
        ss.write_csv(path)
        assert np.array_equal(S.read_scores(path), ss.scores)
        assert path.read_text().splitlines()[0] == "sample_index,score"
        assert ss.filename().startswith("m0__") and ss.filename().endswith(f"__{d.id}__norm0.csv")


def test_score_dataset_errors():
    m = model()
    with pytest.raises(S.ScoringError):
        S.score_dataset(m, dataset(), S.ScorerSpec("dice"))
    with pytest.raises(S.ScoringError):
        S.score_dataset(m, dataset(), S.ScorerSpec("tempscale"))


def test_normalize_at_scoring_feature_norms_are_inverse_tau():
    m = model(tau=0.1)
    _, _, h = tr.score_outputs(m, images(20), normalize_at_scoring=True)
    np.testing.assert_allclose(np.linalg.norm(h, axis=1), 10.0, rtol=0, atol=1e-9)
    spec = S.ScorerSpec("msp", normalize_at_scoring=True)
    assert spec.key == "msp+norm"
    assert S.ScoreSet(np.ones(2), "x", spec, "m").filename() == "m__msp__x__norm1.csv"


def test_scoreset_rejects_non_finite():
    with pytest.raises(S.ScoringError):
        S.ScoreSet(np.array([1.0, np.nan]), "x", S.ScorerSpec("msp"), "m")


def test_scorers_are_deterministic():
    m = model()
    x = images()
    for fn in (lambda: S.odin(m, x), lambda: S.gradnorm(m, x)):
        assert np.array_equal(fn(), fn())
