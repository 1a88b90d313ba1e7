"""Numerical checks of the sensitivity and influence theory.

Bounds follow the layout used throughout: a sequence has elements ``0..L``
(so a model with sequence length ``L_seq`` has ``L = L_seq - 1``) and
``per_element[k]`` is the spectral norm of the k-th input element's
Jacobian with respect to the probed node's features.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .graph import Family, Graph, bfs_distances, generate_family
from .model import ModelConfig, batch_for, model_backward, model_forward
from .seqext import Normalization, SeqExtractConfig, SeqKind, influence, operator_sequence

log = logging.getLogger(__name__)

SAFETY_FACTOR = 1.1


# --------------------------------------------------------------------------
# Norms
# --------------------------------------------------------------------------


def power_iteration(m, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0):
    """Largest singular value of ``m`` via power iteration on ``m^T m``.

    Returns ``(value, converged)``; on non-convergence the last estimate is
    returned with ``converged=False``.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0 or not np.any(m):
        return 0.0, True
    x = np.random.default_rng(seed).standard_normal(m.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = m.T @ (m @ x)
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            return 0.0, True
        x = y / norm_y
        new = math.sqrt(norm_y)
        if abs(new - sigma) <= tol * new:
            return float(np.linalg.norm(m @ x)), True
        sigma = new
    return float(np.linalg.norm(m @ x)), False


def spectral_norm(m, tol: float = 1e-9, max_iter: int = 1000) -> float:
    value, converged = power_iteration(m, tol, max_iter)
    if not converged:
        log.warning("power iteration did not converge in %d steps; estimate %.6g", max_iter, value)
    return value


def _batched_norms(jacobians: np.ndarray) -> np.ndarray:
    # exact largest singular values for a stack of small matrices
    if jacobians.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.norm(jacobians, ord=2, axis=(1, 2))


# --------------------------------------------------------------------------
# mu-regularity
# --------------------------------------------------------------------------


def ffn_jacobians(ffn, inputs, activation="gelu") -> np.ndarray:
    z = inputs @ ffn["W1"] + ffn["b1"]
    s = nn.gelu_grad(z) if activation == "gelu" else np.ones_like(z)
    return np.einsum("ih,nh,ho->noi", ffn["W1"], s, ffn["W2"])


def layernorm_jacobians(ln, inputs, eps=nn.LN_EPS) -> np.ndarray:
    d = inputs.shape[-1]
    xhat, inv = nn.layernorm_forward({"gain": np.ones(d), "bias": np.zeros(d)}, inputs, eps)[1]
    centered = np.eye(d) - 1.0 / d - np.einsum("ni,nj->nij", xhat, xhat) / d
    return ln["gain"][None, :, None] * inv[:, :, None] * centered


def _sample_inputs(d, num_samples, input_scale, seed):
    return np.random.default_rng(seed).standard_normal((num_samples, d)) * input_scale


def mu_estimate(ffn, num_samples: int, input_scale: float = 1.0, seed: int = 0,
                activation: str = "gelu", inputs=None) -> float:
    """1.1 x the largest sampled Jacobian norm of an FFN.

    Samples are ``N(0, input_scale^2)`` rows; ``inputs`` adds extra rows
    (e.g. activations seen in a real forward pass).
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    pts = _sample_inputs(ffn["W1"].shape[0], num_samples, input_scale, seed)
    if inputs is not None:
        pts = np.concatenate([pts, np.asarray(inputs).reshape(-1, pts.shape[1])])
    return SAFETY_FACTOR * float(_batched_norms(ffn_jacobians(ffn, pts, activation)).max())


def _ln_jac(ln, pts, cfg):
    if not cfg.layer_norm:
        return np.broadcast_to(np.eye(pts.shape[1]), (pts.shape[0],) + (pts.shape[1],) * 2)
    return layernorm_jacobians(ln, pts, cfg.ln_eps)


def _ln_apply(ln, pts, cfg):
    return nn.layernorm_forward(ln, pts, cfg.ln_eps)[0] if cfg.layer_norm else pts


def ssm_side_jacobians(block, pts, cfg: ModelConfig) -> np.ndarray:
    """Jacobians of z -> LN_ffn(FFN(LN_ssm(z)) + LN_ssm(z)) at rows ``pts``."""
    j1 = _ln_jac(block["ln_ssm"], pts, cfg)
    u = _ln_apply(block["ln_ssm"], pts, cfg)
    jf = ffn_jacobians(block["ffn"], u, cfg.ffn_activation)
    w = nn.ffn_forward(block["ffn"], u, cfg.ffn_activation)[0] + u
    j2 = _ln_jac(block["ln_ffn"], w, cfg)
    return j2 @ (jf + np.eye(pts.shape[1])) @ j1


def mix_side_jacobians(block, beta, s, cfg: ModelConfig):
    """Jacobians of (b, s) -> LN_mix(FFN_mix(b) + s) w.r.t. b and s."""
    d = beta.shape[1]
    if cfg.mix_activation == "ffn":
        jm = ffn_jacobians(block["ffn_mix"], beta, cfg.ffn_activation)
        m = nn.ffn_forward(block["ffn_mix"], beta, cfg.ffn_activation)[0]
    else:
        jm, m = np.broadcast_to(np.eye(d), (beta.shape[0], d, d)), beta
    j3 = _ln_jac(block["ln_mix"], m + s, cfg)
    return j3 @ jm, j3


@dataclass
class BlockConstants:
    mu_ssm: float
    mu_mix: float
    mu_ffn_only: float
    mu_mix_ffn_only: float
    norm_b: float
    norm_c: float
    norm_b_eff: float
    norm_c_eff: float
    gamma: float
    num_samples: int


def block_constants(block, cfg: ModelConfig, num_samples: int = 1000, input_scale: float = 1.0,
                    seed: int = 0, observed: dict | None = None) -> BlockConstants:
    """Regularity constants of one block for the sensitivity bounds.

    The skip around the SSM is an extra feed-through path, equivalent to an
    SSM with ``B' = [B; I]``, ``C' = [C, I]`` and transition ``diag(a, 0)``;
    its norms sqrt(|B|^2 + 1), sqrt(|C|^2 + 1) enter ``gamma``.  ``mu_ssm`` is
    the sampled sup of the composite LN/FFN/LN map after the SSM and
    ``mu_mix`` the sum of the sampled sups of the mixing map's two partial
    Jacobians (at least 1, since element 0 bypasses mixing).  ``observed``
    rows from a real forward pass (keys ``z``, ``beta``, ``s``) are added to
    the random samples.
    """
    d = cfg.hidden_dim
    rng_pts = _sample_inputs(d, num_samples, input_scale, seed)
    z = rng_pts
    beta = _sample_inputs(d, num_samples, input_scale, seed + 1)
    s = _sample_inputs(d, num_samples, input_scale, seed + 2)
    if observed:
        z = np.concatenate([z, observed["z"].reshape(-1, d)])
        if observed.get("beta") is not None:
            beta = np.concatenate([beta, observed["beta"].reshape(-1, d)])
            s = np.concatenate([s, observed["s"].reshape(-1, d)])
    mu_ssm = SAFETY_FACTOR * float(_batched_norms(ssm_side_jacobians(block, z, cfg)).max())
    jb, js = mix_side_jacobians(block, beta, s, cfg)
    mu_mix = max(1.0, SAFETY_FACTOR * float(_batched_norms(jb).max() + _batched_norms(js).max()))
    mu_ffn = mu_estimate(block["ffn"], num_samples, input_scale, seed, cfg.ffn_activation)
    mu_mix_ffn = (mu_estimate(block["ffn_mix"], num_samples, input_scale, seed, cfg.ffn_activation)
                  if cfg.mix_activation == "ffn" else 1.0)
    nb, nc = spectral_norm(block["ssm"]["B"]), spectral_norm(block["ssm"]["C"])
    nb_eff, nc_eff = math.sqrt(nb * nb + 1.0), math.sqrt(nc * nc + 1.0)
    return BlockConstants(mu_ssm, mu_mix, mu_ffn, mu_mix_ffn, nb, nc, nb_eff, nc_eff,
                          mu_mix * mu_ssm * nb_eff * nc_eff, num_samples)


# --------------------------------------------------------------------------
# Sequence sensitivity
# --------------------------------------------------------------------------


def seq_sensitivity(g: Graph, cfg: SeqExtractConfig, v: int, ops=None) -> np.ndarray:
    """Per element k, the norm of dS^(k)/dx_v, i.e. the L2 norm of column v of M^(k)."""
    ops = ops if ops is not None else operator_sequence(g, cfg)
    return np.linalg.norm(ops.mats[:, :, v], axis=1)


# --------------------------------------------------------------------------
# Bounds
# --------------------------------------------------------------------------


def _check_nonneg(**values):
    for name, value in values.items():
        if np.any(np.asarray(value) < 0):
            raise ValueError(f"{name} must be nonnegative")


def _weighted_sum(terms, gamma: float, D: int) -> float:
    """``gamma^D * sum(c * f)`` over ``(c, f, log_f)`` terms with exact integers ``c``.

    The float path uses ``math.fsum``, so the result does not depend on term
    order; if anything overflows the sum is redone in log space, where
    ``math.log`` of the exact integer keeps full precision.
    """
    terms = [t for t in terms if t[0] and t[2] > -math.inf]
    if not terms or gamma == 0:
        return 0.0
    try:
        total = math.fsum(float(c) * f for c, f, _ in terms)
        value = total * gamma ** D
        if math.isfinite(value) and value > 0:
            return value
    except OverflowError:
        pass
    logs = [math.log(c) + lf for c, _, lf in terms]
    top = max(logs)
    log_total = top + math.log(math.fsum(math.exp(x - top) for x in logs)) + D * math.log(gamma)
    return math.exp(log_total) if log_total < 709.78 else math.inf


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def bound_1block(gamma: float, norm_a: float, per_element, L: int | None = None) -> float:
    """gamma * sum_{k<=L} p_k + gamma * |A_G| * sum_{k<=L-1} p_k."""
    pe = [float(x) for x in per_element]
    L = len(pe) - 1 if L is None else L
    _check_nonneg(gamma=gamma, norm_a=norm_a, per_element=pe)
    return gamma * math.fsum(pe[: L + 1]) + gamma * norm_a * math.fsum(pe[:L])


def bound_noGM(gamma: float, D: int, L: int, per_element) -> float:  # noqa: N802
    """gamma^D sum_k C(L-k+D-1, D-1) p_k for a D-block stack without mixing."""
    if D < 1:
        raise ValueError("D must be >= 1")
    pe = [float(x) for x in per_element][: L + 1]
    _check_nonneg(gamma=gamma, per_element=pe)
    terms = [(math.comb(L - k + D - 1, D - 1), pe[k], _log(pe[k])) for k in range(L + 1)]
    return _weighted_sum(terms, gamma, D)


def bound_full(gamma: float, D: int, L: int, norm_a: float, per_element) -> float:
    """gamma^D sum_k p_{L-k} sum_{m<=min(k,D)} C(k-m+D-1, D-1) C(D, m) |A_G|^m."""
    if D < 1:
        raise ValueError("D must be >= 1")
    pe = [float(x) for x in per_element][: L + 1]
    _check_nonneg(gamma=gamma, norm_a=norm_a, per_element=pe)
    log_a = _log(norm_a)
    terms = []
    for k in range(L + 1):
        for m in range(min(k, D) + 1):
            coeff = math.comb(k - m + D - 1, D - 1) * math.comb(D, m)
            if m == 0:
                terms.append((coeff, pe[L - k], _log(pe[L - k])))
                continue
            try:
                factor = pe[L - k] * norm_a ** m
            except OverflowError:
                factor = math.inf
            terms.append((coeff, factor, _log(pe[L - k]) + m * log_a))
    return _weighted_sum(terms, gamma, D)


def mpnn_bound(g: Graph, c_r: float, c_a: float, c_sigma: float, w: float, p: float,
               m: int, v: int, u: int) -> float:
    """(c_sigma w p)^m (S^m)_{vu} with shift operator S = c_r I + c_a A."""
    if m < 0:
        raise ValueError("m must be >= 0")
    shift = c_r * np.eye(g.num_nodes) + c_a * g.adjacency_matrix()
    return float((c_sigma * w * p) ** m * np.linalg.matrix_power(shift, m)[v, u])


# --------------------------------------------------------------------------
# Empirical sensitivity
# --------------------------------------------------------------------------


def sensitivity_jacobian(params, cfg: ModelConfig, g: Graph, x, v: int, cache=None) -> np.ndarray:
    """Exact Jacobian of the final sequence element (n x d) w.r.t. x_v.

    One backward pass per output coordinate; shape ``(n * d, d_in)``.
    """
    if cache is None:
        cache = model_forward(params, cfg, batch_for(g, x, cfg))[1]
    n, d = g.num_nodes, cfg.hidden_dim
    if n * d > 10_000:
        raise ValueError("explicit Jacobian limited to n * d <= 1e4")
    rows = []
    for i in range(n):
        for j in range(d):
            seed_grad = np.zeros((n, d))
            seed_grad[i, j] = 1.0
            _, dxs = model_backward(params, cfg, cache, d_hidden=seed_grad, want_input_grad=True)
            rows.append(dxs[0][v])
    return np.stack(rows)


def fd_sensitivity_jacobian(params, cfg: ModelConfig, g: Graph, x, v: int, step: float = 1e-5) -> np.ndarray:
    """Central-difference version of :func:`sensitivity_jacobian` (cross-check only)."""
    x = np.array(x, dtype=float)
    cols = []
    for j in range(x.shape[1]):
        xp, xm = x.copy(), x.copy()
        xp[v, j] += step
        xm[v, j] -= step
        hp = model_forward(params, cfg, batch_for(g, xp, cfg))[1]["seq_out"][-1]
        hm = model_forward(params, cfg, batch_for(g, xm, cfg))[1]["seq_out"][-1]
        cols.append(((hp - hm) / (2 * step)).ravel())
    return np.stack(cols, axis=1)


def empirical_sensitivity(params, cfg: ModelConfig, g: Graph, x, v: int) -> float:
    return spectral_norm(sensitivity_jacobian(params, cfg, g, x, v))


# --------------------------------------------------------------------------
# Full report
# --------------------------------------------------------------------------


@dataclass
class BoundReport:
    node: int
    empirical: float
    bound_1block: float | None
    bound_noGM: float  # noqa: N815
    bound_full: float
    gamma: float
    per_element: list
    norm_adjacency: float
    blocks: list = field(default_factory=list)
    note: str = ("bounds use the implemented transitions a in (0, 1), so rho(A) <= 1 and "
                 "|A^k| <= 1 as the theorems assume")

    def to_dict(self) -> dict:
        return asdict(self)


def observed_rows(params, cfg: ModelConfig, cache) -> list[dict]:
    """Per-block inputs of the nonlinear maps, taken from a forward cache."""
    out = []
    for i, ((c_ssm, _), _, c3) in enumerate(cache["blocks"]):
        seq_in, h = c_ssm
        rec = {"z": h @ params["blocks"][i]["ssm"]["C"].T + seq_in, "beta": None, "s": None}
        if c3 is not None:
            beta, _, _, s_ffn = c3
            rec.update(beta=beta, s=s_ffn[1:])
        out.append(rec)
    return out


def sensitivity_report(params, cfg: ModelConfig, g: Graph, x, v: int, num_samples: int = 1000,
                       input_scale: float = 1.0, seed: int = 0) -> BoundReport:
    """Empirical sensitivity of node ``v`` next to the three theoretical bounds."""
    batch = batch_for(g, x, cfg)
    _, cache = model_forward(params, cfg, batch)
    empirical = empirical_sensitivity_from_cache(params, cfg, g, x, v, cache)
    obs = observed_rows(params, cfg, cache)
    consts = [block_constants(b, cfg, num_samples, input_scale, seed + 7 * i, obs[i])
              for i, b in enumerate(params["blocks"])]
    gamma = max(c.gamma for c in consts)
    raw = seq_sensitivity(g, cfg.seq, v, batch.ops[0])
    per_element = raw * spectral_norm(params["encoder"]["W"])
    norm_a = spectral_norm(g.adjacency_matrix())
    D, L = cfg.num_blocks, cfg.seq.length - 1
    return BoundReport(
        node=v,
        empirical=empirical,
        bound_1block=bound_1block(gamma, norm_a, per_element, L) if D == 1 else None,
        bound_noGM=bound_noGM(gamma, D, L, per_element),
        bound_full=bound_full(gamma, D, L, norm_a, per_element),
        gamma=gamma,
        per_element=per_element.tolist(),
        norm_adjacency=norm_a,
        blocks=[asdict(c) for c in consts],
    )


def empirical_sensitivity_from_cache(params, cfg, g, x, v, cache) -> float:
    return spectral_norm(sensitivity_jacobian(params, cfg, g, x, v, cache))


# --------------------------------------------------------------------------
# Influence law on regular trees
# --------------------------------------------------------------------------


def influence_pair(d: int, k: int) -> tuple[float, float]:
    """(I^A, I^B) of a distance-k node on the root of a depth-(k+1) d-regular tree."""
    if d < 3 or k < 1:
        raise ValueError("need d >= 3 and k >= 1")
    tree = generate_family(Family.REGULAR_TREE, {"d": d, "r": k + 1})
    w = int(np.flatnonzero(bfs_distances(tree, 0) == k)[0])
    adj = SeqExtractConfig(SeqKind.NORMALIZED_ADJACENCY, k + 1, Normalization.NONE)
    nbt = SeqExtractConfig(SeqKind.NON_BACKTRACKING, k + 1, Normalization.NONE)
    return float(influence(tree, adj, 0, k)[w]), float(influence(tree, nbt, 0, k)[w])


def influence_ratio_check(d: int, k: int) -> tuple[float, float]:
    """Measured I^A / I^B next to the predicted ((d - 1) / d)^(k - 1)."""
    i_a, i_b = influence_pair(d, k)
    return i_a / i_b, ((d - 1) / d) ** (k - 1)
