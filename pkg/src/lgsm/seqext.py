"""Sequence extraction: operator sequences M^(0..L-1) and S^(k) = M^(k) X.

Three operators are supported: adjacency powers, symmetric-normalized
adjacency powers and non-backtracking walk counts.  A sequence batch is a
plain ``(L, n, d)`` float array.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams, ShapeError, ZeroInfluenceRow
from .graph import Graph

#: Magnitude above which :func:`detect_instability` flags a sequence element.
INSTABILITY_THRESHOLD = 1e30


class SeqKind(str, enum.Enum):
    ADJACENCY = "adjacency"
    NORMALIZED_ADJACENCY = "normalized_adjacency"
    NON_BACKTRACKING = "nbt"


class Normalization(str, enum.Enum):
    NONE = "none"
    ROW = "row"


@dataclass(frozen=True)
class SeqExtractConfig:
    kind: SeqKind = SeqKind.NON_BACKTRACKING
    length: int = 8
    normalization: Normalization = Normalization.NONE
    # Only "operator" is implemented; "sequence" is reserved.
    normalize_target: str = "operator"

    def __post_init__(self):
        object.__setattr__(self, "kind", SeqKind(self.kind))
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        if int(self.length) < 1:
            raise InvalidParams(f"sequence length must be >= 1, got {self.length}")
        object.__setattr__(self, "length", int(self.length))
        if self.normalize_target != "operator":
            raise InvalidParams("only operator row normalization is implemented")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "length": self.length,
                "normalization": self.normalization.value}


@dataclass(frozen=True)
class OperatorSequence:
    mats: np.ndarray  # (L, n, n); mats[0] is the identity

    def __len__(self):
        return self.mats.shape[0]

    def __getitem__(self, k):
        return self.mats[k]


def normalized_adjacency(g: Graph) -> np.ndarray:
    """D^{-1/2} A D^{-1/2}; isolated nodes give zero rows."""
    deg = g.degree_vector()
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    return inv_sqrt[:, None] * g.adjacency_matrix() * inv_sqrt[None, :]


def nbt_matrices(g: Graph, length: int) -> np.ndarray:
    """Non-backtracking walk counts B^(0..length-1) by the three-term recurrence."""
    n = g.num_nodes
    a = g.adjacency_matrix()
    deg = g.degree_vector()
    mats = np.empty((length, n, n))
    mats[0] = np.eye(n)
    if length > 1:
        mats[1] = a
    if length > 2:
        mats[2] = a @ a - np.diag(deg)
    for t in range(3, length):
        mats[t] = a @ mats[t - 1] - (deg - 1.0)[:, None] * mats[t - 2]
    return mats


def _powers(base: np.ndarray, length: int) -> np.ndarray:
    n = base.shape[0]
    mats = np.empty((length, n, n))
    mats[0] = np.eye(n)
    for k in range(1, length):
        mats[k] = mats[k - 1] @ base
    return mats


def row_normalize(mats: np.ndarray) -> np.ndarray:
    """Make every nonzero row of every matrix sum to one; zero rows stay zero."""
    sums = mats.sum(axis=-1, keepdims=True)
    out = np.zeros_like(mats)
    np.divide(mats, sums, out=out, where=sums != 0)
    return out


def operator_sequence(g: Graph, cfg: SeqExtractConfig) -> OperatorSequence:
    if cfg.kind is SeqKind.NON_BACKTRACKING:
        mats = nbt_matrices(g, cfg.length)
    elif cfg.kind is SeqKind.ADJACENCY:
        mats = _powers(g.adjacency_matrix(), cfg.length)
    else:
        mats = _powers(normalized_adjacency(g), cfg.length)
    if cfg.normalization is Normalization.ROW:
        mats = row_normalize(mats)
    return OperatorSequence(mats)


def apply_operators(ops: OperatorSequence, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != ops.mats.shape[1]:
        raise ShapeError(f"features of shape {x.shape} do not match a {ops.mats.shape[1]}-node graph")
    seq = ops.mats @ x
    seq[0] = x  # exact, independent of the identity product
    return seq


def extract_sequence(g: Graph, x: np.ndarray, cfg: SeqExtractConfig) -> np.ndarray:
    """Return the ``(L, n, d)`` batch ``S^(k) = M^(k) X``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != g.num_nodes:
        raise ShapeError(f"features have {x.shape[0]} rows, graph has {g.num_nodes} nodes")
    return apply_operators(operator_sequence(g, cfg), x)


def brute_force_nbt_count(g: Graph, k: int, u: int, v: int) -> int:
    """Count length-``k`` walks u -> v that never immediately reverse an edge (DFS)."""
    if k < 0:
        raise InvalidParams("walk length must be >= 0")

    def walk(node, prev, remaining):
        if remaining == 0:
            return int(node == v)
        return sum(walk(nxt, node, remaining - 1) for nxt in g.adjacency[node] if nxt != prev)

    return walk(u, -1, k)


def brute_force_nbt_counts(g: Graph, max_k: int) -> list:
    """All-pairs non-backtracking walk counts for lengths 0..max_k as nested int lists.

    One explicit DFS per start node; independent of the recurrence.
    """
    n = g.num_nodes
    counts = [[[0] * n for _ in range(n)] for _ in range(max_k + 1)]
    for u in range(n):
        stack = [(u, -1, 0)]
        while stack:
            node, prev, depth = stack.pop()
            counts[depth][u][node] += 1
            if depth < max_k:
                stack.extend((nxt, node, depth + 1) for nxt in g.adjacency[node] if nxt != prev)
    return counts


def brute_force_walk_count(g: Graph, k: int, u: int, v: int) -> int:
    """Count all length-``k`` walks u -> v (DFS, backtracking allowed)."""

    def walk(node, remaining):
        if remaining == 0:
            return int(node == v)
        return sum(walk(nxt, remaining - 1) for nxt in g.adjacency[node])

    return walk(u, k)


def influence(g: Graph, cfg: SeqExtractConfig, v: int, k: int,
              ops: OperatorSequence | None = None) -> np.ndarray:
    """Relative influence I_{v,k}(w) of every node w on element k at v."""
    if not 0 <= k < cfg.length:
        raise InvalidParams(f"element index {k} outside [0, {cfg.length})")
    ops = ops if ops is not None else operator_sequence(g, cfg)
    row = ops.mats[k, v]
    total = row.sum()
    if total == 0:
        raise ZeroInfluenceRow(f"row {v} of M^({k}) sums to zero")
    return row / total


@dataclass(frozen=True)
class InstabilityReport:
    max_abs: float
    has_nonfinite: bool
    overflow_at_index: int | None
    reason: str | None = None

    @property
    def flagged(self) -> bool:
        return self.overflow_at_index is not None

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "has_nonfinite": self.has_nonfinite,
                "overflow_at_index": self.overflow_at_index, "reason": self.reason}


_F32_MAX = float(np.finfo(np.float32).max)


def detect_instability(seq, threshold: float = INSTABILITY_THRESHOLD,
                       single_precision: bool = True) -> InstabilityReport:
    """Find the first sequence index whose values are unusable.

    An element is flagged if it holds NaN/inf, exceeds ``threshold`` in
    magnitude, or (with ``single_precision``) its square overflows float32,
    which is what turns variance and MSE computations into inf/NaN.
    """
    arr = seq.mats if isinstance(seq, OperatorSequence) else np.asarray(seq, dtype=float)
    max_abs, nonfinite, first, reason = 0.0, False, None, None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(arr.shape[0]):
            elem = arr[k]
            finite = np.isfinite(elem)
            if not finite.all():
                nonfinite = True
                if first is None:
                    first, reason = k, "non-finite"
            m = float(np.abs(elem[finite]).max()) if finite.any() else 0.0
            max_abs = max(max_abs, m)
            if first is None and m > threshold:
                first, reason = k, "threshold"
            if first is None and single_precision and m * m > _F32_MAX:
                first, reason = k, "float32-square-overflow"
    return InstabilityReport(max_abs, nonfinite, first, reason)
