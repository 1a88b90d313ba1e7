"""JSON Lines dataset files: one labeled graph per line."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DatasetError, LGSMError
from .graph import (FAMILY_SIZE_KEY, Family, LabeledGraph, Task, build_graph, eccentricities,
                    generate_family, make_labeled)


def to_record(item: LabeledGraph) -> dict:
    y = item.targets if item.task.graph_level else [float(t) for t in item.targets]
    return {
        "n": item.graph.num_nodes,
        "edges": [[u, v] for u, v in item.graph.edges],
        "x": item.features.tolist(),
        "y": y,
        "task": item.task.value,
        "source": item.source,
    }


def from_record(rec: dict) -> LabeledGraph:
    g = build_graph(int(rec["n"]), rec["edges"])
    x = np.asarray(rec["x"], dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return LabeledGraph(g, x, rec["y"], Task(rec["task"]), rec.get("source"))


def write_jsonl(path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(to_record(item), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[LabeledGraph]:
    """Load a dataset; malformed records raise :class:`DatasetError` with the line number."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                items.append(from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, LGSMError) as exc:
                raise DatasetError(f"{Path(path).name}: {exc}", line=lineno) from exc
    return items


def generate_dataset(family, sizes: tuple[int, int], count: int, task, seed: int,
                     extra_params: dict | None = None, max_diameter: int | None = None,
                     feature_dist: str = "uniform", max_tries: int = 1000) -> list[LabeledGraph]:
    """Sample ``count`` labeled graphs with the family's size parameter drawn from ``sizes``.

    Disconnected samples (and, if ``max_diameter`` is set, too-wide ones) are
    redrawn for ecc/diam; the whole procedure is seeded by ``seed``.
    """
    family, task = Family(family), Task(task)
    lo, hi = sizes
    rng = np.random.default_rng(seed)
    key = FAMILY_SIZE_KEY[family]
    out = []
    for _ in range(count):
        for _attempt in range(max_tries):
            params = dict(extra_params or {})
            params[key] = int(rng.integers(lo, hi + 1))
            g = generate_family(family, params, seed=int(rng.integers(2**31)))
            if task is not Task.SSSP and not g.is_connected():
                continue
            item = make_labeled(g, task, seed=int(rng.integers(2**31)), feature_dist=feature_dist)
            if max_diameter is not None:
                diam = eccentricities(g).max() if g.is_connected() else np.inf
                if diam > max_diameter:
                    continue
            out.append(item)
            break
        else:
            raise DatasetError(f"could not draw a valid {family.value} graph in {max_tries} tries")
    return out
