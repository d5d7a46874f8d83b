import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bncde import diffcore as dc
from bncde.errors import ConfigError, ContractError, DimensionError, DomainError


def check_grad(build, arrays, rtol=1e-5, step=1e-5):
    """Compare backward() against central differences for every entry of ``arrays``."""
    leaves = [dc.leaf(a) for a in arrays]
    root = build(*leaves)
    grads = dc.backward(root)
    for leaf, arr in zip(leaves, arrays):
        def f():
            with dc.no_grad():
                return float(build(*[dc.constant(a) for a in arrays]).value)
        num = dc.numeric_gradient(f, arr, step=step)
        ana = dc.grad_of(grads, leaf)
        assert dc.relative_error(ana, num, floor=1e-4) < rtol, (ana, num)


# forward values


def test_forward_affine_examples():
    out = dc.forward_affine(np.eye(2), np.zeros(2), np.array([3.0, -1.0]))
    np.testing.assert_array_equal(out.value, [3.0, -1.0])
    out = dc.forward_affine(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out.value, [3.0, 7.0])
    out = dc.forward_affine(np.zeros((1, 3)), np.array([5.0]), np.array([0.3, -2.0, 9.0]))
    np.testing.assert_array_equal(out.value, [5.0])


def test_forward_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        dc.forward_affine(np.eye(2), np.zeros(2), np.ones(3))
    with pytest.raises(DimensionError):
        dc.forward_affine(np.eye(2), np.zeros(3), np.ones(2))


def test_activation_examples():
    assert dc.forward_activation("tanh", np.array([0.0])).value[0] == 0.0
    assert dc.forward_activation("softplus", np.array([0.0])).value[0] == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_array_equal(dc.forward_activation("relu", np.array([-1.0, 2.0])).value, [0.0, 2.0])
    assert dc.forward_activation("sigmoid", np.array([0.0])).value[0] == 0.5


def test_softplus_is_overflow_safe():
    x = np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0])
    with np.errstate(over="raise"):
        y = dc.softplus(x).value
    assert np.all(np.isfinite(y))
    assert y[-1] == 1000.0
    assert y[0] == 0.0
    # log1p(e^x) where it is safe to evaluate directly
    np.testing.assert_allclose(y[1:4], np.log1p(np.exp(x[1:4])), rtol=1e-14)


def test_unknown_activation():
    with pytest.raises(ConfigError):
        dc.forward_activation("gelu", np.zeros(2))


def test_gaussian_log_density_examples():
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    assert dc.gaussian_log_density(0.0, 0.0, 1.0).value == pytest.approx(-half_log_2pi, abs=1e-15)
    assert dc.gaussian_log_density(1.0, 0.0, 1.0).value == pytest.approx(-half_log_2pi - 0.5, abs=1e-15)
    v = 3.7
    assert dc.gaussian_log_density(2.5, 2.5, v).value == pytest.approx(-0.5 * math.log(2 * math.pi * v), abs=1e-15)
    assert -0.918938 == pytest.approx(float(dc.gaussian_log_density(0.0, 0.0, 1.0).value), abs=1e-6)


def test_gaussian_log_density_matches_scipy():
    from scipy.stats import norm

    rng = np.random.default_rng(0)
    y, mu, var = rng.normal(size=50), rng.normal(size=50), rng.uniform(0.1, 3, size=50)
    np.testing.assert_allclose(dc.gaussian_log_density(y, mu, var).value, norm.logpdf(y, mu, np.sqrt(var)),
                               rtol=1e-13)


@pytest.mark.parametrize("var", [0.0, -1.0])
def test_gaussian_log_density_domain(var):
    with pytest.raises(DomainError):
        dc.gaussian_log_density(0.0, 0.0, var)


# backward


def test_backward_tanh_at_zero():
    x = dc.leaf(0.0)
    grads = dc.backward(dc.tanh(x))
    assert grads[x] == 1.0


def test_backward_constant_root_gives_no_gradients():
    x = dc.leaf(np.ones(3))
    root = dc.sum(dc.constant(np.ones(3)))
    grads = dc.backward(root)
    np.testing.assert_array_equal(dc.grad_of(grads, x), np.zeros(3))


def test_backward_requires_scalar_root():
    x = dc.leaf(np.ones(3))
    with pytest.raises(ContractError):
        dc.backward(dc.tanh(x))


def test_backward_twice_is_forbidden():
    x = dc.leaf(np.ones(3))
    root = dc.sum(dc.square(x))
    dc.backward(root)
    with pytest.raises(ContractError):
        dc.backward(root)
    root.zero_grad()
    grads = dc.backward(root)
    np.testing.assert_array_equal(grads[x], 2 * np.ones(3))


def test_backward_visits_each_node_once():
    x = dc.leaf(np.array([0.3, -0.2]))
    a = dc.tanh(x)
    b = dc.mul(a, a)          # diamond: a feeds b twice
    c = dc.add(b, a)
    root = dc.sum(c)
    grads = dc.backward(root)
    # x, a, b, c, root
    assert grads.visited == 5
    t = np.tanh(x.value)
    np.testing.assert_allclose(grads[x], (2 * t + 1) * (1 - t * t), rtol=1e-14)


def test_backward_seed_scales_gradients():
    x = dc.leaf(np.array([0.5, 1.5]))
    g1 = dc.backward(dc.sum(dc.exp(x)))[x]
    g2 = dc.backward(dc.sum(dc.exp(x)), seed=-2.0)[x]
    np.testing.assert_allclose(g2, -2.0 * g1, rtol=0, atol=0)


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    xv = rng.normal(size=4)
    a, b = 0.7, -1.9

    def f(x):
        return dc.sum(dc.tanh(x))

    def g(x):
        return dc.sum(dc.square(dc.sigmoid(x)))

    x = dc.leaf(xv)
    combo = dc.backward(dc.add(dc.scale(f(x), a), dc.scale(g(x), b)))[x]
    x1, x2 = dc.leaf(xv), dc.leaf(xv)
    gf = dc.backward(f(x1))[x1]
    gg = dc.backward(g(x2))[x2]
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=1e-13, atol=1e-15)


def test_stop_gradient_blocks_flow():
    x = dc.leaf(np.array([1.0, 2.0]))
    root = dc.sum(dc.mul(x, dc.stop_gradient(x)))
    np.testing.assert_array_equal(dc.backward(root)[x], [1.0, 2.0])


def test_no_grad_records_nothing():
    x = dc.leaf(np.ones(2))
    with dc.no_grad():
        y = dc.tanh(x)
    assert not y.requires_grad and y.parents == ()


def test_shared_gradient_arrays_are_not_mutated():
    # the same upstream array reaches two parents; in-place accumulation must not alias
    x = dc.leaf(np.array([1.0, 2.0]))
    y = dc.leaf(np.array([3.0, 4.0]))
    s = dc.add(x, y)
    root = dc.sum(dc.add(dc.add(s, x), dc.scale(x, 2.0)))
    grads = dc.backward(root)
    np.testing.assert_array_equal(grads[x], [4.0, 4.0])
    np.testing.assert_array_equal(grads[y], [1.0, 1.0])


# finite-difference oracle for every op


OPS = {
    "add": (lambda a, b: dc.sum(dc.add(a, b) * dc.add(a, b)), [(3, 2), (2,)]),
    "sub": (lambda a, b: dc.sum(dc.square(dc.sub(a, b))), [(3,), (3,)]),
    "mul": (lambda a, b: dc.sum(dc.mul(dc.mul(a, b), a)), [(2, 3), (3,)]),
    "div": (lambda a, b: dc.sum(dc.div(a, b)), [(4,), "pos4"]),
    "neg_scale": (lambda a: dc.sum(dc.square(dc.scale(dc.neg(a), 1.7))), [(5,)]),
    "log_exp": (lambda a: dc.sum(dc.log(dc.add(dc.exp(a), 1.0))), [(4,)]),
    "clamp_min": (lambda a: dc.sum(dc.square(dc.clamp_min(a, 0.1))), [(6,)]),
    "mean_axis": (lambda a: dc.sum(dc.square(dc.mean(a, axis=0))), [(3, 4)]),
    "reshape_take": (lambda a: dc.sum(dc.square(dc.take(dc.reshape(a, (3, 2)), (slice(None), 1)))), [(6,)]),
    "concat_stack": (lambda a, b: dc.sum(dc.square(dc.stack([dc.concat([a, b]), dc.concat([b, a])]))), [(2,), (2,)]),
    "matmul": (lambda a, b: dc.sum(dc.square(dc.matmul(a, b))), [(3, 4), (4, 2)]),
    "matmul_vec": (lambda a, b: dc.sum(dc.tanh(dc.matmul(a, b))), [(3, 4), (4,)]),
    "affine": (lambda x, W, b: dc.sum(dc.tanh(dc.affine(x, W, b))), [(5, 3), (2, 3), (2,)]),
    "batched_matvec": (lambda M, v: dc.sum(dc.square(dc.batched_matvec(M, v))), [(3, 2, 4), (3, 4)]),
    "tanh": (lambda a: dc.sum(dc.tanh(a)), [(5,)]),
    "sigmoid": (lambda a: dc.sum(dc.square(dc.sigmoid(a))), [(5,)]),
    "softplus": (lambda a: dc.sum(dc.softplus(a)), [(5,)]),
    "relu": (lambda a: dc.sum(dc.square(dc.relu(a))), [(5,)]),
    "gaussian": (lambda y, m, v: dc.sum(dc.gaussian_log_density(y, m, v)), [(4,), (4,), "pos4"]),
    "bce": (lambda p: dc.sum(dc.binary_cross_entropy(dc.sigmoid(p), np.array([0.0, 1.0, 1.0, 0.0]))), [(4,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100 if name not in ("matmul", "affine", "batched_matvec") else 20):
        arrays = [rng.uniform(0.5, 2.0, size=4) if s == "pos4" else rng.normal(size=s) for s in shapes]
        if name == "relu" or name == "clamp_min":
            # keep away from the kink
            arrays = [a + 0.05 * np.sign(a - (0.1 if name == "clamp_min" else 0.0)) for a in arrays]
        check_grad(build, arrays)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_affine_batched_shapes(m, n, seed):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(2, 3, n)), rng.normal(size=(m, n)), rng.normal(size=m)
    out = dc.affine(x, W, b)
    np.testing.assert_allclose(out.value, np.einsum("ijn,mn->ijm", x, W) + b, rtol=1e-13)


def test_relative_error_floor():
    assert dc.relative_error([0.0], [1e-12]) < 1e-3
    assert dc.relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
