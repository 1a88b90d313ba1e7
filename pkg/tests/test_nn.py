import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgsm.errors import ShapeError
from lgsm.nn import (central_difference, ffn_backward, ffn_forward, ffn_jacobian, gelu, gelu_grad,
                     grad_check, init_ffn, init_layernorm, init_linear, layernorm_backward,
                     layernorm_forward, layernorm_jacobian, linear_backward, linear_forward,
                     relative_error)


def test_gelu_reference_values():
    # erf-based reference computed independently with math.erf
    for x in (-3.0, -0.5, 0.0, 0.7, 2.5):
        assert gelu(x) == pytest.approx(0.5 * x * (1 + math.erf(x / math.sqrt(2))), abs=1e-15)
    assert gelu(0.0) == 0.0


def test_gelu_grad_matches_fd():
    x = np.linspace(-4, 4, 41)
    num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    np.testing.assert_allclose(gelu_grad(x), num, atol=1e-8)


def test_central_difference_restores_input():
    x = np.array([1.0, 2.0, 3.0])
    g = central_difference(lambda: float(np.sum(x ** 2)), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)
    np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


@pytest.mark.parametrize("seed", range(5))
def test_linear_grad(seed):
    rng = np.random.default_rng(seed)
    p = init_linear(3, 4, rng)
    p["b"] = rng.normal(size=4)
    x = rng.normal(size=(5, 3))
    assert grad_check(linear_forward, linear_backward, p, x) < 1e-7


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear_forward(init_linear(3, 2, np.random.default_rng(0)), np.zeros((2, 4)))


@pytest.mark.parametrize("activation", ["gelu", "identity"])
@pytest.mark.parametrize("seed", range(5))
def test_ffn_grad(seed, activation):
    rng = np.random.default_rng(seed)
    p = init_ffn(3, rng)
    p["b1"] = rng.normal(size=12)
    x = rng.normal(size=(2, 4, 3))
    fwd = lambda q, v: ffn_forward(q, v, activation)
    assert grad_check(fwd, ffn_backward, p, x) < 1e-6


def test_ffn_identity_is_affine():
    rng = np.random.default_rng(0)
    p = init_ffn(2, rng)
    x = rng.normal(size=(3, 2))
    y, _ = ffn_forward(p, x, "identity")
    np.testing.assert_allclose(y, x @ p["W1"] @ p["W2"] + p["b1"] @ p["W2"] + p["b2"], atol=1e-12)


def test_ffn_width_check():
    rng = np.random.default_rng(0)
    p = init_ffn(3, rng)
    p["W1"] = p["W1"][:, :5]
    with pytest.raises(ShapeError):
        ffn_forward(p, np.zeros((1, 3)))


def test_ffn_jacobian_matches_fd():
    rng = np.random.default_rng(1)
    p = init_ffn(3, rng, d_out=2)
    x = rng.normal(size=3)
    jac = ffn_jacobian(p, x)
    num = np.stack([(ffn_forward(p, x + e * 1e-6)[0] - ffn_forward(p, x - e * 1e-6)[0]) / 2e-6
                    for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(jac, num, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_layernorm_grad(seed):
    rng = np.random.default_rng(seed)
    p = init_layernorm(4)
    p["gain"] = rng.normal(size=4)
    p["bias"] = rng.normal(size=4)
    x = rng.normal(size=(3, 4))
    assert grad_check(layernorm_forward, layernorm_backward, p, x) < 1e-6


def test_layernorm_population_variance():
    p = init_layernorm(4)
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    y, _ = layernorm_forward(p, x)
    expected = (x - 2.5) / np.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(y, expected, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**20))
def test_layernorm_jacobian_matches_fd(seed):
    rng = np.random.default_rng(seed)
    p = {"gain": rng.normal(size=5), "bias": rng.normal(size=5)}
    x = rng.normal(size=5)
    f = lambda v: layernorm_forward(p, v[None, :])[0][0]
    num = np.stack([(f(x + e * 1e-6) - f(x - e * 1e-6)) / 2e-6 for e in np.eye(5)], axis=1)
    np.testing.assert_allclose(layernorm_jacobian(p, x), num, atol=1e-6)
