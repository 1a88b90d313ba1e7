"""Dense layers with explicit reverse-mode backward functions.

Every layer is a pair ``forward(params, x) -> (y, cache)`` and
``backward(params, cache, dy) -> (dx, grads)`` where ``params`` and ``grads``
are dicts of float64 arrays with matching keys.  Layers act on the last axis,
so any leading batch shape (nodes, sequence elements) is allowed.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

LN_EPS = 1e-5


def gelu(x):
    """Exact GELU, 0.5 x (1 + erf(x / sqrt 2))."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# --------------------------------------------------------------------------
# Linear
# --------------------------------------------------------------------------


def init_linear(d_in, d_out, rng, bias=True, scale=1.0):
    p = {"W": rng.standard_normal((d_in, d_out)) * (scale / math.sqrt(d_in))}
    if bias:
        p["b"] = np.zeros(d_out)
    return p


def linear_forward(p, x):
    if x.shape[-1] != p["W"].shape[0]:
        raise ShapeError(f"linear expects last dim {p['W'].shape[0]}, got {x.shape[-1]}")
    y = x @ p["W"]
    if "b" in p:
        y = y + p["b"]
    return y, x


def linear_backward(p, x, dy):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    grads = {"W": flat_x.T @ flat_dy}
    if "b" in p:
        grads["b"] = flat_dy.sum(axis=0)
    return dy @ p["W"].T, grads


# --------------------------------------------------------------------------
# Two-layer FFN, hidden width 4x input
# --------------------------------------------------------------------------


def init_ffn(d, rng, d_out=None, scale=1.0):
    d_out = d if d_out is None else d_out
    h = 4 * d
    return {
        "W1": rng.standard_normal((d, h)) * (scale / math.sqrt(d)),
        "b1": np.zeros(h),
        "W2": rng.standard_normal((h, d_out)) * (scale / math.sqrt(h)),
        "b2": np.zeros(d_out),
    }


def ffn_forward(p, x, activation="gelu"):
    """``gelu(x W1 + b1) W2 + b2``; ``activation="identity"`` makes it affine."""
    d = p["W1"].shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"FFN expects last dim {d}, got {x.shape[-1]}")
    if p["W1"].shape[1] != 4 * d or p["W2"].shape[0] != p["W1"].shape[1]:
        raise ShapeError("FFN hidden width must be 4x the input width")
    z = x @ p["W1"] + p["b1"]
    if activation == "gelu":
        cdf = 0.5 * (1.0 + erf(z / _SQRT2))
        a = z * cdf
    else:
        cdf, a = None, z
    return a @ p["W2"] + p["b2"], (x, z, a, cdf)


def ffn_backward(p, cache, dy):
    x, z, a, cdf = cache
    da = dy @ p["W2"].T
    if cdf is not None:
        da *= cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    dz = da
    fa, fdy = a.reshape(-1, a.shape[-1]), dy.reshape(-1, dy.shape[-1])
    fx, fdz = x.reshape(-1, x.shape[-1]), dz.reshape(-1, dz.shape[-1])
    grads = {"W1": fx.T @ fdz, "b1": fdz.sum(axis=0), "W2": fa.T @ fdy, "b2": fdy.sum(axis=0)}
    return dz @ p["W1"].T, grads


def ffn_jacobian(p, x, activation="gelu"):
    """Jacobian of the FFN at a single input row ``x`` (shape ``(d_out, d)``)."""
    z = x @ p["W1"] + p["b1"]
    s = gelu_grad(z) if activation == "gelu" else np.ones_like(z)
    return ((p["W1"] * s) @ p["W2"]).T


# --------------------------------------------------------------------------
# LayerNorm over the last axis
# --------------------------------------------------------------------------


def init_layernorm(d):
    return {"gain": np.ones(d), "bias": np.zeros(d)}


def layernorm_forward(p, x, eps=LN_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * p["gain"] + p["bias"], (xhat, inv)


def layernorm_backward(p, cache, dy):
    xhat, inv = cache
    d = xhat.shape[-1]
    fxh, fdy = xhat.reshape(-1, d), dy.reshape(-1, d)
    grads = {"gain": (fxh * fdy).sum(axis=0), "bias": fdy.sum(axis=0)}
    dxhat = dy * p["gain"]
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, grads


def layernorm_jacobian(p, x, eps=LN_EPS):
    """Jacobian of LayerNorm at one row ``x`` (shape ``(d, d)``)."""
    d = x.shape[-1]
    _, (xhat, inv) = layernorm_forward(p, x[None, :], eps)
    xhat, inv = xhat[0], float(inv[0, 0])
    centered = np.eye(d) - 1.0 / d - np.outer(xhat, xhat) / d
    return p["gain"][:, None] * inv * centered


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------


def central_difference(fn, x, step=1e-5):
    """Numerical gradient of scalar ``fn`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = fn()
        x[idx] = orig - step
        fm = fn()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """Max-entry error normalized by the larger of the two gradient magnitudes."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(forward, backward, params: dict, x: np.ndarray, step=1e-5, seed=0):
    """Compare an analytic backward against central differences.

    ``forward(params, x)`` returns ``(y, cache)`` and ``backward(params, cache, dy)``
    returns ``(dx, grads)``.  The scalar probed is ``sum(y * r)`` for a fixed
    random ``r``; every parameter and input coordinate is checked.  Returns the
    worst relative error.
    """
    rng = np.random.default_rng(seed)
    y, cache = forward(params, x)
    r = rng.standard_normal(np.shape(y))
    dx, grads = backward(params, cache, r)

    def loss():
        return float(np.sum(forward(params, x)[0] * r))

    errors = [relative_error(dx, central_difference(loss, x, step))]
    for name, value in params.items():
        errors.append(relative_error(grads[name], central_difference(loss, value, step)))
    return max(errors)
