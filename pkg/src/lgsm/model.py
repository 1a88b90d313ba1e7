"""The LGSM network: encoder, D blocks of SSM -> FFN -> graph mixing, decoder.

Graphs in a batch are treated as one disjoint union: sequences are
concatenated along the node axis and the mixing adjacency is block diagonal.
Parameters live in a nested dict; :func:`flatten` gives dotted-name views.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from .errors import NonFiniteActivation, ShapeError
from .graph import Graph
from .seqext import OperatorSequence, SeqExtractConfig, apply_operators, operator_sequence
from .ssm import init_ssm, ssm_backward, ssm_forward


class TaskLevel(str, enum.Enum):
    NODE = "node"
    GRAPH = "graph"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``layer_norm=False``, ``ffn_activation="identity"`` and
    ``mix_activation="identity"`` are test hooks: they bypass the LayerNorms,
    make every FFN affine, and replace the mixing FFN by the identity.
    ``ssm_unit_gain`` selects the unit-DC-gain SSM initialization.
    """

    in_dim: int
    hidden_dim: int = 32
    num_blocks: int = 4
    seq: SeqExtractConfig = field(default_factory=SeqExtractConfig)
    task_level: TaskLevel = TaskLevel.NODE
    out_dim: int = 1
    layer_norm: bool = True
    ffn_activation: str = "gelu"
    mix_activation: str = "ffn"
    ln_eps: float = nn.LN_EPS
    ssm_unit_gain: bool = True

    def __post_init__(self):
        object.__setattr__(self, "task_level", TaskLevel(self.task_level))
        if isinstance(self.seq, dict):
            object.__setattr__(self, "seq", SeqExtractConfig(**self.seq))
        for name in ("in_dim", "hidden_dim", "num_blocks", "out_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ffn_activation not in ("gelu", "identity"):
            raise ValueError("ffn_activation must be 'gelu' or 'identity'")
        if self.mix_activation not in ("ffn", "identity"):
            raise ValueError("mix_activation must be 'ffn' or 'identity'")

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim, "hidden_dim": self.hidden_dim, "num_blocks": self.num_blocks,
            "seq": self.seq.to_dict(), "task_level": self.task_level.value, "out_dim": self.out_dim,
            "layer_norm": self.layer_norm, "ffn_activation": self.ffn_activation,
            "mix_activation": self.mix_activation, "ln_eps": self.ln_eps,
            "ssm_unit_gain": self.ssm_unit_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["seq"] = SeqExtractConfig(**d.get("seq", {}))
        return cls(**d)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def init_block(d: int, rng, scale: float = 1.0, unit_gain: bool = True) -> dict:
    return {
        "ssm": init_ssm(d, d, d, rng=rng, scale=scale, unit_gain=unit_gain),
        "ln_ssm": nn.init_layernorm(d),
        "ffn": nn.init_ffn(d, rng, scale=scale),
        "ln_ffn": nn.init_layernorm(d),
        "ffn_mix": nn.init_ffn(d, rng, scale=scale),
        "ln_mix": nn.init_layernorm(d),
    }


def init_model(cfg: ModelConfig, seed: int = 0, scale: float = 1.0) -> dict:
    """Seeded initialization; ``scale`` multiplies every random weight's std."""
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    params = {
        "encoder": nn.init_linear(cfg.in_dim, d, rng, bias=False, scale=scale),
        "blocks": [init_block(d, rng, scale, cfg.ssm_unit_gain) for _ in range(cfg.num_blocks)],
        "decoder": {"out": nn.init_ffn(d, rng, d_out=cfg.out_dim, scale=scale)},
    }
    if cfg.task_level is TaskLevel.GRAPH:
        params["decoder"]["pool"] = nn.init_linear(3 * d, d, rng, scale=scale)
    return params


def flatten(tree, prefix: str = "") -> dict:
    """Dotted-name mapping to the (shared, not copied) leaf arrays."""
    out = {}
    if isinstance(tree, dict):
        for k, v in tree.items():
            out.update(flatten(v, f"{prefix}{k}."))
    elif isinstance(tree, list):
        for i, v in enumerate(tree):
            out.update(flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = tree
    return out


def unflatten(flat: dict) -> dict:
    root: dict = {}
    for name, value in flat.items():
        node = root
        parts = name.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    def fix(node):
        if isinstance(node, dict):
            if node and all(k.isdigit() for k in node):
                return [fix(node[str(i)]) for i in range(len(node))]
            return {k: fix(v) for k, v in node.items()}
        return node

    return fix(root)


def count_params(params) -> int:
    return int(sum(np.size(v) for v in flatten(params).values()))


def zeros_like(params):
    return unflatten({k: np.zeros_like(v) for k, v in flatten(params).items()})


# --------------------------------------------------------------------------
# Batches
# --------------------------------------------------------------------------


@dataclass
class PreparedGraph:
    """A graph with its raw extracted sequence ``M^(k) X`` precomputed."""

    graph: Graph
    raw_seq: np.ndarray  # (L, n, d_in)
    ops: OperatorSequence | None = None


def prepare_graph(g: Graph, x, seq_cfg: SeqExtractConfig, keep_ops: bool = False) -> PreparedGraph:
    ops = operator_sequence(g, seq_cfg)
    return PreparedGraph(g, apply_operators(ops, x), ops if keep_ops else None)


@dataclass
class GraphBatch:
    raw_seq: np.ndarray  # (L, N, d_in)
    adjacency: sp.csr_matrix  # (N, N) block diagonal
    offsets: np.ndarray  # (G + 1,) node offsets per graph
    ops: list | None = None

    @property
    def num_graphs(self) -> int:
        return len(self.offsets) - 1


def make_batch(items: list[PreparedGraph]) -> GraphBatch:
    sizes = [it.graph.num_nodes for it in items]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    adjacency = sp.block_diag([sp.csr_matrix(it.graph.adjacency_matrix()) for it in items], format="csr")
    raw = np.concatenate([it.raw_seq for it in items], axis=1)
    ops = [it.ops for it in items] if all(it.ops is not None for it in items) else None
    return GraphBatch(raw, sp.csr_matrix(adjacency), offsets, ops)


def batch_for(g: Graph, x, cfg: ModelConfig) -> GraphBatch:
    return make_batch([prepare_graph(g, x, cfg.seq, keep_ops=True)])


# --------------------------------------------------------------------------
# Block
# --------------------------------------------------------------------------


def _ln_forward(p, x, cfg):
    if not cfg.layer_norm:
        return x, None
    return nn.layernorm_forward(p, x, cfg.ln_eps)


def _ln_backward(p, cache, dy, cfg):
    if not cfg.layer_norm:
        return dy, {k: np.zeros_like(v) for k, v in p.items()}
    return nn.layernorm_backward(p, cache, dy)


def _propagate(adjacency, seq):
    """Apply the node-axis operator to every element of an ``(l, N, d)`` stack."""
    l, n, d = seq.shape
    flat = np.moveaxis(seq, 1, 0).reshape(n, l * d)
    return np.moveaxis((adjacency @ flat).reshape(n, l, d), 0, 1)


def ssm_stage_forward(b, s_in, cfg):
    y, c_ssm = ssm_forward(b["ssm"], s_in)
    s_ssm, c_ln = _ln_forward(b["ln_ssm"], y + s_in, cfg)
    return s_ssm, (c_ssm, c_ln)


def ffn_stage_forward(b, s_ssm, cfg):
    f, c_f = nn.ffn_forward(b["ffn"], s_ssm, cfg.ffn_activation)
    s_ffn, c_ln = _ln_forward(b["ln_ffn"], f + s_ssm, cfg)
    return s_ffn, (c_f, c_ln)


def mix_stage_forward(b, s_ffn, adjacency, cfg):
    """Element 0 passes through; element l mixes in A @ element l-1."""
    out = np.empty_like(s_ffn)
    out[0] = s_ffn[0]
    if s_ffn.shape[0] == 1:
        return out, None
    beta = s_ffn[1:] + _propagate(adjacency, s_ffn[:-1])
    if cfg.mix_activation == "ffn":
        m, c_f = nn.ffn_forward(b["ffn_mix"], beta, cfg.ffn_activation)
    else:
        m, c_f = beta, None
    out[1:], c_ln = _ln_forward(b["ln_mix"], m + s_ffn[1:], cfg)
    return out, (beta, c_f, c_ln, s_ffn)


def block_forward(b, s_in, adjacency, cfg: ModelConfig):
    if s_in.ndim != 3 or s_in.shape[-1] != cfg.hidden_dim:
        raise ShapeError(f"block expects (L, n, {cfg.hidden_dim}), got {s_in.shape}")
    s_ssm, c1 = ssm_stage_forward(b, s_in, cfg)
    s_ffn, c2 = ffn_stage_forward(b, s_ssm, cfg)
    out, c3 = mix_stage_forward(b, s_ffn, adjacency, cfg)
    return out, (c1, c2, c3)


def block_backward(b, cache, d_out, adjacency, cfg: ModelConfig):
    (c_ssm, c_ln1), (c_f1, c_ln2), c3 = cache
    grads = {}
    d_ffn = d_out.copy()
    if c3 is None:
        grads["ln_mix"] = {k: np.zeros_like(v) for k, v in b["ln_mix"].items()}
        grads["ffn_mix"] = {k: np.zeros_like(v) for k, v in b["ffn_mix"].items()}
    else:
        beta, c_f, c_ln3, _ = c3
        dz3, grads["ln_mix"] = _ln_backward(b["ln_mix"], c_ln3, d_out[1:], cfg)
        if c_f is None:
            d_beta = dz3
            grads["ffn_mix"] = {k: np.zeros_like(v) for k, v in b["ffn_mix"].items()}
        else:
            d_beta, grads["ffn_mix"] = nn.ffn_backward(b["ffn_mix"], c_f, dz3)
        d_ffn[1:] = dz3 + d_beta
        d_ffn[:-1] += _propagate(adjacency.T, d_beta)
    dz2, grads["ln_ffn"] = _ln_backward(b["ln_ffn"], c_ln2, d_ffn, cfg)
    d_ssm_in, grads["ffn"] = nn.ffn_backward(b["ffn"], c_f1, dz2)
    d_ssm = dz2 + d_ssm_in
    dz1, grads["ln_ssm"] = _ln_backward(b["ln_ssm"], c_ln1, d_ssm, cfg)
    d_seq, grads["ssm"] = ssm_backward(b["ssm"], c_ssm, dz1)
    return dz1 + d_seq, grads


# --------------------------------------------------------------------------
# Full model
# --------------------------------------------------------------------------


def pool(h: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Concatenate per-graph max, sum and mean of node rows: ``(G, 3d)``."""
    parts = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        seg = h[lo:hi]
        parts.append(np.concatenate([seg.max(axis=0), seg.sum(axis=0), seg.mean(axis=0)]))
    return np.stack(parts)


def pool_backward(h, offsets, d_pooled):
    d = h.shape[1]
    dh = np.zeros_like(h)
    for g, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
        seg = h[lo:hi]
        arg = seg.argmax(axis=0)
        dh[lo + arg, np.arange(d)] += d_pooled[g, :d]
        dh[lo:hi] += d_pooled[g, d:2 * d] + d_pooled[g, 2 * d:] / (hi - lo)
    return dh


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteActivation(f"non-finite activation in {where}")


def model_forward(params, cfg: ModelConfig, batch: GraphBatch):
    """Predictions ``(N, out_dim)`` (node level) or ``(G, out_dim)`` (graph level)."""
    if batch.raw_seq.shape[0] != cfg.seq.length or batch.raw_seq.shape[-1] != cfg.in_dim:
        raise ShapeError(f"batch sequence {batch.raw_seq.shape} does not match the model config")
    _check_finite(batch.raw_seq, "extracted sequence")
    s = batch.raw_seq @ params["encoder"]["W"]
    block_caches = []
    for i, b in enumerate(params["blocks"]):
        s, c = block_forward(b, s, batch.adjacency, cfg)
        _check_finite(s, f"block {i}")
        block_caches.append(c)
    h = s[-1]
    dec = params["decoder"]
    if cfg.task_level is TaskLevel.GRAPH:
        pooled = pool(h, batch.offsets)
        z, c_pool = nn.linear_forward(dec["pool"], pooled)
    else:
        z, c_pool = h, None
    pred, c_out = nn.ffn_forward(dec["out"], z, cfg.ffn_activation)
    _check_finite(pred, "decoder")
    return pred, {"batch": batch, "seq_out": s, "blocks": block_caches, "pool": c_pool, "out": c_out}


def model_backward(params, cfg: ModelConfig, cache, d_pred=None, d_hidden=None, want_input_grad=False):
    """Gradients for every parameter, plus ``dX`` per graph if requested.

    ``d_pred`` is the upstream gradient of the prediction; alternatively
    ``d_hidden`` injects a gradient on the final sequence element ``S_out``
    (shape ``(N, d)``), bypassing the decoder.
    """
    batch = cache["batch"]
    dec = params["decoder"]
    grads = zeros_like(params)
    seq_out = cache["seq_out"]
    d_seq = np.zeros_like(seq_out)
    if d_pred is not None:
        dz, grads["decoder"]["out"] = nn.ffn_backward(dec["out"], cache["out"], d_pred)
        if cfg.task_level is TaskLevel.GRAPH:
            d_pooled, grads["decoder"]["pool"] = nn.linear_backward(dec["pool"], cache["pool"], dz)
            d_seq[-1] = pool_backward(seq_out[-1], batch.offsets, d_pooled)
        else:
            d_seq[-1] = dz
    if d_hidden is not None:
        d_seq[-1] += d_hidden
    for i in reversed(range(len(params["blocks"]))):
        d_seq, grads["blocks"][i] = block_backward(params["blocks"][i], cache["blocks"][i], d_seq,
                                                   batch.adjacency, cfg)
    raw = batch.raw_seq
    grads["encoder"]["W"] = raw.reshape(-1, raw.shape[-1]).T @ d_seq.reshape(-1, d_seq.shape[-1])
    if not want_input_grad:
        return grads, None
    if batch.ops is None:
        raise ValueError("input gradients need operator matrices; build the batch with keep_ops=True")
    d_raw = d_seq @ params["encoder"]["W"].T
    dxs = []
    for ops, lo, hi in zip(batch.ops, batch.offsets[:-1], batch.offsets[1:]):
        dxs.append(np.einsum("kuv,kud->vd", ops.mats, d_raw[:, lo:hi]))
    return grads, dxs


def predict(params, cfg: ModelConfig, g: Graph, x) -> np.ndarray:
    return model_forward(params, cfg, batch_for(g, x, cfg))[0]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, params, cfg: ModelConfig, extra: dict | None = None) -> None:
    flat = flatten(params)
    doc = {
        "config": cfg.to_dict(),
        "params": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for k, v in flat.items()},
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns ``(params, cfg, extra)``; float values round-trip exactly."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    flat = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    return unflatten(flat), ModelConfig.from_dict(doc["config"]), doc.get("extra", {})
