import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from useradapt.model import (PARAM_NAMES, SCOPES, ModelParams, features, forward, grad, load_checkpoint,
                             loss, per_sample_losses, save_checkpoint, scope_names)

from conftest import random_params


def loop_forward(p, x):
    """Naive loop oracle for the two-stage forward pass."""
    d, h = p.F_weight.shape
    z = [p.F_bias[j] + sum(x[i] * p.F_weight[i, j] for i in range(d)) for j in range(h)]
    if p.activation == "relu":
        z = [max(v, 0.0) for v in z]
    head = lambda W, b: [b[k] + sum(z[j] * W[j, k] for j in range(h)) for k in range(W.shape[1])]
    return np.array(head(p.Wv, p.bv)), np.array(head(p.Wn, p.bn))


def lse_loss(p, x, v, n):
    total = 0.0
    for xi, vi, ni in zip(x, v, n):
        lv, ln = loop_forward(p, xi)
        for logits, y in ((lv, vi), (ln, ni)):
            m = max(logits)
            total += m + math.log(sum(math.exp(l - m) for l in logits)) - logits[y]
    return total / len(x)


def test_zero_params_give_zero_logits():
    p = ModelParams.zeros(3, 2, 4, 5)
    lv, ln = forward(p, np.ones(3))
    assert not lv.any() and not ln.any()


def test_identity_feature_stage_one_hot_head():
    p = ModelParams.zeros(3, 3, 3, 2)
    p.F_weight = np.eye(3)
    p.Wv[1, 1] = 1.0
    lv, _ = forward(p, np.eye(3)[1])
    assert lv.tolist() == [0.0, 1.0, 0.0]


@pytest.mark.parametrize("activation", ["linear", "relu"])
def test_forward_matches_loop_oracle(activation):
    p = random_params(5, 4, 3, 6, seed=1, activation=activation)
    x = np.random.default_rng(2).standard_normal((7, 5))
    lv, ln = forward(p, x)
    for i in range(7):
        ov, on = loop_forward(p, x[i])
        assert np.allclose(lv[i], ov, rtol=1e-12, atol=1e-12)
        assert np.allclose(ln[i], on, rtol=1e-12, atol=1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(ModelParams.zeros(3, 2, 2, 2), np.ones(4))


@pytest.mark.parametrize("V,N,expect", [(107, 384, math.log(107) + math.log(384)), (2, 2, 2 * math.log(2))])
def test_uniform_loss(V, N, expect):
    p = ModelParams.zeros(3, 2, V, N)
    assert loss(p, np.ones((5, 3)), np.zeros(5, int), np.zeros(5, int)) == pytest.approx(expect, abs=1e-12)


def test_uniform_loss_large_vocab_value():
    assert math.log(107) + math.log(384) == pytest.approx(10.623, abs=5e-4)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_logsumexp_oracle(seed):
    rng = np.random.default_rng(seed)
    p = random_params(4, 3, 5, 6, seed=seed, scale=2.0)
    x = rng.standard_normal((6, 4))
    v, n = rng.integers(5, size=6), rng.integers(6, size=6)
    assert loss(p, x, v, n) == pytest.approx(lse_loss(p, x, v, n), rel=1e-10)


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        loss(ModelParams.zeros(2, 2, 2, 2), np.zeros((0, 2)), [], [])


def finite_difference(p, x, v, n, name, eps=1e-6):
    g = np.zeros_like(getattr(p, name))
    for idx in np.ndindex(g.shape):
        plus, minus = p.copy(), p.copy()
        getattr(plus, name)[idx] += eps
        getattr(minus, name)[idx] -= eps
        g[idx] = (loss(plus, x, v, n) - loss(minus, x, v, n)) / (2 * eps)
    return g


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["F", "H", "FH"]), st.sampled_from(["linear", "relu"]),
       st.integers(1, 5))
def test_gradient_matches_finite_differences(seed, scope, activation, batch):
    rng = np.random.default_rng(seed)
    p = random_params(3, 3, 3, 4, seed=seed, activation=activation)
    x = rng.standard_normal((batch, 3))
    v, n = rng.integers(3, size=batch), rng.integers(4, size=batch)
    g = grad(p, x, v, n, scope)
    for name in PARAM_NAMES:
        got = getattr(g, name)
        if name not in SCOPES[scope]:
            assert not got.any()
            continue
        fd = finite_difference(p, x, v, n, name)
        # central differences carry ~1e-10 roundoff, so near-zero gradients get an absolute floor
        denom = max(np.linalg.norm(fd), np.linalg.norm(got), 1e-3)
        assert np.linalg.norm(got - fd) / denom < 1e-5


def test_unknown_scope():
    with pytest.raises(ValueError):
        scope_names("G")


def test_per_sample_losses_shapes_and_positivity():
    p = random_params(seed=4)
    x = np.random.default_rng(0).standard_normal((9, 4))
    ce_v, ce_n, pv, pn = per_sample_losses(p, x, np.zeros(9, int), np.ones(9, int))
    assert ce_v.shape == ce_n.shape == pv.shape == pn.shape == (9,)
    assert np.all(ce_v > 0) and np.all(ce_n > 0)


def test_relu_features_nonnegative():
    p = random_params(activation="relu", seed=3)
    assert np.all(features(p, np.random.default_rng(1).standard_normal((10, 4))) >= 0)


def test_shape_validation():
    with pytest.raises(ValueError):
        ModelParams(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        ModelParams.zeros(2, 2, 2, 2, activation="tanh")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.sampled_from(["linear", "relu"]))
def test_checkpoint_round_trip(tmp_path_factory, seed, d, h, V, N, activation):
    rng = np.random.default_rng(seed)
    p = ModelParams.zeros(d, h, V, N, activation)
    for name, arr in p.arrays().items():
        setattr(p, name, rng.standard_normal(arr.shape) * 10 ** rng.uniform(-300, 300, arr.shape))
    path = tmp_path_factory.mktemp("ck") / "model"
    save_checkpoint(p, path)
    back = load_checkpoint(path)
    assert back.digest() == p.digest() and back.equals(p)


def test_checkpoint_manifest(tmp_path):
    p = random_params()
    save_checkpoint(p, tmp_path / "m")
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert [t["name"] for t in manifest["tensors"]] == list(PARAM_NAMES)
    assert (tmp_path / "m.bin").stat().st_size == 8 * p.flat().size
