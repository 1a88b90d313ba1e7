import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgsm.errors import ShapeError
from lgsm.nn import grad_check
from lgsm.ssm import (associative_scan, compose, from_transition, init_ssm, ssm_backward,
                      ssm_closed_form, ssm_forward, ssm_forward_scan, ssm_forward_sequential,
                      transition)


def naive_scan(a, b):
    h = np.zeros_like(b[0])
    out = []
    for t in range(b.shape[0]):
        h = a[t] * h + b[t]
        out.append(h)
    return np.stack(out)


def test_identity_ssm_prefix_sum():
    # A = I (a = 1), B = C = I gives y_t = sum_{k<=t} s_k
    p = from_transition([1.0], [[1.0]], [[1.0]])
    seq = np.arange(1.0, 6.0).reshape(5, 1, 1)
    for fn in (ssm_forward_sequential, ssm_forward_scan):
        np.testing.assert_array_equal(fn(p, seq).ravel(), [1, 3, 6, 10, 15])
    assert ssm_closed_form(p, seq, 4).item() == 15


def test_zero_transition_is_memoryless():
    p = from_transition([0.0], [[2.0]], [[1.0]])
    seq = np.arange(1.0, 5.0).reshape(4, 1, 1)
    np.testing.assert_array_equal(ssm_forward_scan(p, seq).ravel(), 2 * np.arange(1.0, 5.0))


def test_compose_is_associative():
    rng = np.random.default_rng(0)
    x, y, z = [(rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
    left = compose(compose(x, y), z)
    right = compose(x, compose(y, z))
    for u, v in zip(left, right):
        np.testing.assert_allclose(u, v, atol=1e-14)


@pytest.mark.parametrize("L", range(1, 20))
def test_scan_matches_naive(L):
    rng = np.random.default_rng(L)
    a, b = rng.uniform(0, 1, size=(L, 3)), rng.normal(size=(L, 3))
    np.testing.assert_allclose(associative_scan(a, b), naive_scan(a, b), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 70), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**20))
def test_scan_sequential_closed_form_agree(L, d_h, d_in, seed):
    rng = np.random.default_rng(seed)
    p = init_ssm(d_h, d_in, 2, rng=rng, a_range=(0.0, 1.0))
    seq = rng.normal(size=(L, 3, d_in))
    ref = ssm_forward_sequential(p, seq)
    assert np.abs(ssm_forward_scan(p, seq) - ref).max() <= 1e-10
    t = int(rng.integers(L))
    assert np.abs(ssm_closed_form(p, seq, t) - ref[t]).max() <= 1e-8


def test_shape_errors():
    p = init_ssm(2, 3, 1)
    with pytest.raises(ShapeError):
        ssm_forward_scan(p, np.zeros((4, 2, 2)))
    with pytest.raises(ShapeError):
        ssm_forward_scan(p, np.zeros((0, 2, 3)))
    with pytest.raises(ShapeError):
        ssm_closed_form(p, np.zeros((2, 1, 3)), 2)


def test_init_eigenvalues_in_range():
    a = transition(init_ssm(64, 2, 2, seed=3))
    assert np.all((a >= 0.9) & (a <= 0.99))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("L", [1, 2, 3, 7])
def test_ssm_grad(seed, L):
    rng = np.random.default_rng(seed)
    p = init_ssm(3, 2, 2, rng=rng, a_range=(0.2, 0.95))
    seq = rng.normal(size=(L, 2, 2))
    assert grad_check(ssm_forward, ssm_backward, p, seq) < 1e-6
