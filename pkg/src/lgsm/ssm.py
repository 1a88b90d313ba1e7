"""Diagonal linear state-space layer.

    h_t = a * h_{t-1} + B s_t,   y_t = C h_t,   h_{-1} = 0

applied independently to every node.  ``a = sigmoid(a_logits)`` keeps the
transition in (0, 1).  Sequences are ``(L, n, d)`` arrays.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


def sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def transition(p) -> np.ndarray:
    return sigmoid(p["a_logits"])


def from_transition(a, B, C) -> dict:
    """Build params from an explicit transition vector; a = 0 or 1 maps to -inf / inf logits."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore"):
        logits = np.log(a) - np.log1p(-a)
    return {"a_logits": logits, "B": np.array(B, dtype=float, ndmin=2), "C": np.array(C, dtype=float, ndmin=2)}


def init_ssm(d_h, d_in, d_out, seed=0, rng=None, scale=1.0, a_range=(0.9, 0.99),
             unit_gain=False) -> dict:
    """Eigenvalues uniform in ``a_range`` (near the unit circle); B, C ~ N(0, scale^2 / fan_in).

    ``unit_gain`` multiplies row i of B by ``1 - a_i`` so every channel's
    impulse response sums to one; without it the readout of a slowly
    decaying channel is 10-100x its input and swamps the residual path.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    a = rng.uniform(*a_range, size=d_h)
    B = rng.standard_normal((d_h, d_in)) * (scale / math.sqrt(d_in))
    C = rng.standard_normal((d_out, d_h)) * (scale / math.sqrt(d_h))
    if unit_gain:
        B *= (1.0 - a)[:, None]
    return {"a_logits": np.log(a) - np.log1p(-a), "B": B, "C": C}


def _check(p, seq):
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 3 or seq.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (L, n, d) sequence, got shape {seq.shape}")
    d_h, d_in = p["B"].shape
    if seq.shape[-1] != d_in or p["C"].shape[1] != d_h or np.shape(p["a_logits"]) != (d_h,):
        raise ShapeError("SSM parameter shapes are inconsistent with the input")
    return seq


def ssm_forward_sequential(p, seq) -> np.ndarray:
    """Reference evaluation: unroll the recurrence one step at a time."""
    seq = _check(p, seq)
    a = transition(p)
    h = np.zeros(seq.shape[1:2] + (p["B"].shape[0],))
    out = np.empty(seq.shape[:2] + (p["C"].shape[0],))
    for t in range(seq.shape[0]):
        h = a * h + seq[t] @ p["B"].T
        out[t] = h @ p["C"].T
    return out


def compose(first, second):
    """Combine affine maps h -> a1 h + b1 then h -> a2 h + b2."""
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


def associative_scan(a, b):
    """Inclusive scan of ``compose`` over axis 0; returns the prefix offsets.

    Pairs neighbours, recurses on the half-length sequence, then fills the
    even positions; odd lengths carry the last element through.
    """
    L = b.shape[0]
    if L == 1:
        return b.copy()
    m = L // 2
    pa, pb = compose((a[0:2 * m:2], b[0:2 * m:2]), (a[1:2 * m:2], b[1:2 * m:2]))
    odd = associative_scan(pa, pb)
    out = np.empty_like(b)
    out[0] = b[0]
    out[1:2 * m:2] = odd
    # even index 2j (j >= 1) follows the prefix ending at 2j - 1
    out[2:L:2] = a[2:L:2] * odd[: (L - 1) // 2] + b[2:L:2]
    return out


def hidden_states_scan(p, seq) -> np.ndarray:
    seq = _check(p, seq)
    u = seq @ p["B"].T
    a = np.broadcast_to(transition(p), u.shape)
    return associative_scan(a, u)


def ssm_forward_scan(p, seq) -> np.ndarray:
    return hidden_states_scan(p, seq) @ p["C"].T


def ssm_closed_form(p, seq, t: int) -> np.ndarray:
    """y_t = C sum_k A^k B s_{t-k}, evaluated as an explicit sum."""
    seq = _check(p, seq)
    if not 0 <= t < seq.shape[0]:
        raise ShapeError(f"time index {t} outside [0, {seq.shape[0]})")
    a = transition(p)
    acc = np.zeros(seq.shape[1:2] + (p["B"].shape[0],))
    for k in range(t + 1):
        acc += (a ** k) * (seq[t - k] @ p["B"].T)
    return acc @ p["C"].T


def ssm_forward(p, seq):
    """Scan evaluation returning ``(y, cache)`` for :func:`ssm_backward`."""
    h = hidden_states_scan(p, seq)
    return h @ p["C"].T, (np.asarray(seq, dtype=float), h)


def ssm_backward(p, cache, dy):
    """Adjoint of the recurrence: a reverse-time scan over ``dy C``."""
    seq, h = cache
    a = transition(p)
    g = dy @ p["C"]
    lam = associative_scan(np.broadcast_to(a, g.shape), g[::-1])[::-1]
    h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
    da = (lam * h_prev).sum(axis=(0, 1))
    d_h, d_in = p["B"].shape
    grads = {
        "a_logits": da * a * (1.0 - a),
        "B": lam.reshape(-1, d_h).T @ seq.reshape(-1, d_in),
        "C": dy.reshape(-1, dy.shape[-1]).T @ h.reshape(-1, d_h),
    }
    return lam @ p["B"], grads
