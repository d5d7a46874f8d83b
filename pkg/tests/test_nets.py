import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bncde import diffcore as dc
from bncde.errors import ConfigError, DimensionError, DomainError
from bncde.nets import (
    FlatWeights,
    MlpSpec,
    init_weights,
    load_checkpoint,
    mc_dropout,
    mlp_apply,
    pack,
    param_count,
    save_checkpoint,
    unpack,
)


def reference_mlp(spec, flat, x):
    """Plain numpy feed-forward used as an independent oracle."""
    h = x
    for (W, b), kind in zip(unpack(spec, flat), spec.activations()):
        h = dc.activation_value(kind, h @ W.T + b)
    return h


def test_param_count_examples():
    assert param_count(MlpSpec((2, 3, 1))) == 13
    # closed-form sum: 1280 + 16512 + 6192
    assert param_count(MlpSpec((9, 128, 128, 48))) == 9 * 128 + 128 + 128 * 128 + 128 + 128 * 48 + 48 == 23984
    assert param_count(MlpSpec((7, 5))) == 7 * 5 + 5


def test_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((3,))
    with pytest.raises(ConfigError):
        MlpSpec((3, 0))
    with pytest.raises(ConfigError):
        MlpSpec((3, 2), "swish")


def test_layout_is_layer_major_weights_then_bias():
    spec = MlpSpec((2, 3, 1))
    flat = np.arange(13, dtype=float)
    (W1, b1), (W2, b2) = unpack(spec, flat)
    np.testing.assert_array_equal(W1, [[0, 1], [2, 3], [4, 5]])
    np.testing.assert_array_equal(b1, [6, 7, 8])
    np.testing.assert_array_equal(W2, [[9, 10, 11]])
    np.testing.assert_array_equal(b2, [12])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=5), st.integers(0, 2**31 - 1))
def test_pack_unpack_roundtrip(sizes, seed):
    spec = MlpSpec(tuple(sizes))
    flat = np.random.default_rng(seed).normal(size=spec.param_count)
    np.testing.assert_array_equal(pack(spec, unpack(spec, flat)), flat)
    layers = unpack(spec, flat)
    again = unpack(spec, pack(spec, layers))
    for (W, b), (W2, b2) in zip(layers, again):
        np.testing.assert_array_equal(W, W2)
        np.testing.assert_array_equal(b, b2)


def test_flat_weights_checks_length_and_is_immutable():
    spec = MlpSpec((2, 2))
    with pytest.raises(DimensionError):
        FlatWeights(np.zeros(5), spec)
    fw = FlatWeights(np.zeros(6), spec)
    with pytest.raises(ValueError):
        fw.data[0] = 1.0


def test_mlp_zero_weights_give_zero_output():
    spec = MlpSpec((3, 4, 2), "relu", None)
    out = mlp_apply(spec, np.zeros(spec.param_count), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(out.value, np.zeros(2))


def test_single_layer_is_affine_then_activation():
    rng = np.random.default_rng(0)
    spec = MlpSpec((3, 2), "relu", "tanh")
    flat = rng.normal(size=spec.param_count)
    x = rng.normal(size=3)
    (W, b), = unpack(spec, flat)
    expected = dc.tanh(dc.forward_affine(W, b, x)).value
    np.testing.assert_allclose(mlp_apply(spec, flat, x).value, expected, rtol=1e-15)


def test_mlp_matches_reference_for_shared_and_rowwise_weights():
    rng = np.random.default_rng(1)
    spec = MlpSpec((4, 5, 3), "relu", "tanh")
    W = rng.normal(size=(6, spec.param_count))
    x = rng.normal(size=(6, 4))
    rowwise = mlp_apply(spec, W, x).value
    for r in range(6):
        np.testing.assert_allclose(rowwise[r], reference_mlp(spec, W[r], x[r]), rtol=1e-13)
    shared = mlp_apply(spec, W[0], x).value
    np.testing.assert_allclose(shared, reference_mlp(spec, W[0], x), rtol=1e-13)


def test_extra_columns_equal_explicit_concatenation():
    rng = np.random.default_rng(2)
    spec = MlpSpec((4, 6, 2), "relu", None)
    W = rng.normal(size=(3, spec.param_count))
    x = rng.normal(size=(3, 3))
    t = np.array([0.37])
    a = mlp_apply(spec, W, x, extra=t).value
    b = mlp_apply(spec, W, np.hstack([x, np.full((3, 1), 0.37)])).value
    np.testing.assert_allclose(a, b, rtol=1e-14)
    a = mlp_apply(spec, W[1], x, extra=t).value
    b = mlp_apply(spec, W[1], np.hstack([x, np.full((3, 1), 0.37)])).value
    np.testing.assert_allclose(a, b, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tanh_output_in_open_interval(seed):
    # float64 tanh rounds to +-1 beyond |x| ~ 19, so stay at initialization scale
    rng = np.random.default_rng(seed)
    spec = MlpSpec((3, 8, 4), "relu", "tanh")
    out = mlp_apply(spec, init_weights(spec, rng), rng.normal(size=(5, 3)) * 3).value
    assert np.all(np.abs(out) < 1.0)


def test_mlp_dimension_errors():
    spec = MlpSpec((3, 2))
    with pytest.raises(DimensionError):
        mlp_apply(spec, np.zeros(spec.param_count), np.zeros(4))
    with pytest.raises(DimensionError):
        mlp_apply(spec, np.zeros(spec.param_count + 1), np.zeros(3))
    with pytest.raises(DimensionError):
        mlp_apply(spec, np.zeros((2, spec.param_count)), np.zeros((3, 3)))


@pytest.mark.parametrize("rowwise", [False, True])
@pytest.mark.parametrize("with_extra", [False, True])
def test_mlp_gradients_match_finite_differences(rowwise, with_extra):
    rng = np.random.default_rng(10 + 2 * rowwise + with_extra)
    spec = MlpSpec((4, 5, 5, 3), "tanh", "softplus")
    n_x = 3 if with_extra else 4
    extra = np.array([0.4]) if with_extra else None
    W = rng.normal(size=(2, spec.param_count) if rowwise else spec.param_count) * 0.7
    x = rng.normal(size=(2, n_x))
    c = rng.normal(size=(2, 3))

    def loss(Wn, xn):
        return dc.sum(dc.mul(mlp_apply(spec, Wn, xn, extra=extra), c))

    Wl, xl = dc.leaf(W), dc.leaf(x)
    grads = dc.backward(loss(Wl, xl))

    def f():
        with dc.no_grad():
            return float(loss(W, x).value)

    for leaf, arr in ((Wl, W), (xl, x)):
        num = dc.numeric_gradient(f, arr)
        assert dc.relative_error(grads[leaf], num, floor=1e-4) < 1e-5


def test_relu_mlp_gradient_three_layers():
    rng = np.random.default_rng(11)
    spec = MlpSpec((3, 6, 6, 2), "relu", None)
    W = rng.normal(size=spec.param_count)
    x = rng.normal(size=3)
    Wl = dc.leaf(W)
    grads = dc.backward(dc.sum(dc.square(mlp_apply(spec, Wl, x))))

    def f():
        return float(np.sum(reference_mlp(spec, W, x) ** 2))

    assert dc.relative_error(grads[Wl], dc.numeric_gradient(f, W), floor=1e-4) < 1e-5


def test_init_weights_bounds_and_determinism():
    spec = MlpSpec((4, 9, 2))
    a = init_weights(spec, np.random.default_rng(5))
    b = init_weights(spec, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    (W1, b1), (W2, b2) = unpack(spec, a)
    assert np.all(np.abs(W1) <= 0.5) and np.all(np.abs(b1) <= 0.5)
    assert np.all(np.abs(W2) <= 1 / 3) and np.all(np.abs(b2) <= 1 / 3)


def test_mc_dropout_examples():
    rng = np.random.default_rng(0)
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(mc_dropout(x, 0.0, rng).value, x)
    np.testing.assert_array_equal(mc_dropout(np.zeros(4), 0.7, rng).value, np.zeros(4))
    with pytest.raises(DomainError):
        mc_dropout(x, 1.0, rng)
    with pytest.raises(DomainError):
        mc_dropout(x, -0.1, rng)


def test_mc_dropout_is_unbiased():
    rng = np.random.default_rng(1)
    x = np.array([1.0, -2.0, 0.5])
    p, n = 0.1, 100_000
    draws = mc_dropout(np.broadcast_to(x, (n, 3)).copy(), p, rng).value
    se = np.abs(x) * np.sqrt(p / (1 - p)) / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - x) < 3 * se)
    # survivors scaled by 1/(1-p), the rest exactly zero
    vals = np.unique(np.round(draws[:, 0], 12))
    np.testing.assert_allclose(sorted(vals), [0.0, 1.0 / 0.9])


def test_checkpoint_roundtrip(tmp_path):
    spec = MlpSpec((3, 4, 2), "relu", "tanh")
    w = init_weights(spec, np.random.default_rng(0))
    v = np.random.default_rng(1).normal(size=(2, 3))
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"net": (spec, w), "raw": (None, v)}, {"note": "x"})
    groups, extra = load_checkpoint(path)
    assert groups["net"][0] == spec
    np.testing.assert_array_equal(groups["net"][1], w)
    np.testing.assert_array_equal(groups["raw"][1], v)
    assert extra["note"] == "x"
    payload = json.loads(path.read_text())
    assert set(payload["groups"]["net"]) == {"spec", "shape", "data"}
