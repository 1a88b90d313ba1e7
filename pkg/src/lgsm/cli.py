"""``lgsm`` command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
instability, 4 I/O error.  ``LGSM_THREADS`` caps the number of worker
processes used by ``ablate-seq`` (0 or unset means serial).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, data, ssm
from .errors import DatasetError, LGSMError, NonFiniteActivation
from .graph import Family, Task, generate_family, random_features
from .model import ModelConfig, count_params, init_model, load_checkpoint, save_checkpoint
from .seqext import (Normalization, SeqExtractConfig, SeqKind, detect_instability, extract_sequence,
                     influence, operator_sequence)
from .train import LabelStats, TrainConfig, evaluate, train

log = logging.getLogger("lgsm")

EXIT_OK, EXIT_USAGE, EXIT_UNSTABLE, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


class InstabilityExit(Exception):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _scalar(text: str):
    """Interpret a ``--param`` value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_params(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects key=value, got {pair!r}")
        out[key.strip()] = _scalar(value.strip())
    return out


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Set dotted keys (``train.max_epochs=5``) inside a nested config dict."""
    for key, value in overrides.items():
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot set {key}: {part} is not a section")
        node[parts[-1]] = value
    return doc


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit(text: str, out) -> None:
    """Write ``text`` to ``out`` (a file path) or stdout."""
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def emit_csv(header, rows, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, header, rows)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)


def _enum(cls, value, what):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise UsageError(f"unknown {what} {value!r} (choose from {choices})") from None


def graph_from_args(args):
    """A graph and features from ``--data/--index`` or ``--family/--param``."""
    if args.data:
        items = data.read_jsonl(args.data)
        if not 0 <= args.index < len(items):
            raise UsageError(f"--index {args.index} outside dataset of {len(items)} graphs")
        item = items[args.index]
        return item.graph, item.features
    if not args.family:
        raise UsageError("give --family (with --param key=value) or --data")
    family = _enum(Family, args.family, "family")
    g = generate_family(family, parse_params(args.param), seed=args.seed)
    # same two-channel layout as generated datasets; the source channel stays empty
    x = np.zeros((g.num_nodes, 2))
    x[:, 0] = random_features(g.num_nodes, np.random.default_rng(args.seed), args.features)
    return g, x


def seq_from_args(args) -> SeqExtractConfig:
    return SeqExtractConfig(_enum(SeqKind, args.kind, "sequence kind"), args.length,
                            _enum(Normalization, args.normalization, "normalization"))


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


class RunConfig:
    """Model + training configuration, dataset paths, output directory and seed."""

    def __init__(self, model: ModelConfig, train_cfg: TrainConfig, train_path: Path,
                 val_path: Path | None, out: Path, seed: int):
        self.model, self.train, self.train_path, self.val_path = model, train_cfg, train_path, val_path
        self.out, self.seed = out, seed

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")):
        doc = dict(doc)
        paths = doc.get("data") or {}
        if "train" not in paths:
            raise UsageError("config needs data.train")

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        train_path = resolve(paths["train"])
        val_path = resolve(paths["val"]) if paths.get("val") else None
        for p in (train_path, val_path):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"dataset not found: {p}")
        seed = int(doc.get("seed", 0))
        model = dict(doc.get("model") or {})
        model.setdefault("in_dim", 2)
        tdoc = dict(doc.get("train") or {})
        tdoc.setdefault("seed", seed)
        try:
            model_cfg = ModelConfig.from_dict(model)
            train_cfg = TrainConfig(**tdoc)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        return cls(model_cfg, train_cfg, train_path, val_path, Path(doc.get("out", "runs")), seed)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": {"train": str(self.train_path), "val": str(self.val_path) if self.val_path else None},
                "out": str(self.out), "seed": self.seed}


def load_run_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    doc = load_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
        doc.setdefault("train", {})["seed"] = args.seed
    if args.out:
        doc["out"] = args.out
    apply_overrides(doc, parse_params(args.param))
    return RunConfig.from_dict(doc, Path(args.config).parent)


def _instability_of(dataset, seq_cfg) -> dict:
    worst = None
    for item in dataset:
        rep = detect_instability(operator_sequence(item.graph, seq_cfg))
        if worst is None or rep.flagged and not worst.flagged or rep.max_abs > worst.max_abs:
            worst = rep
    return worst.to_dict() if worst else {}


def run_training(rc: RunConfig) -> dict:
    train_set = data.read_jsonl(rc.train_path)
    val_set = data.read_jsonl(rc.val_path) if rc.val_path else None
    params = init_model(rc.model, rc.seed)
    rc.out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(params, rc.model, rc.train, train_set, val_set)
    except NonFiniteActivation as exc:
        report = _instability_of(train_set, rc.model.seq)
        raise InstabilityExit(str(exc), {"epoch": exc.epoch, "batch": exc.batch, "instability": report}) from exc
    header = ["epoch", "train_logmse", "train_mse", "val_mse", "val_mae", "val_logmse"]
    write_csv(rc.out / "history.csv", header, [[row[h] for h in header] for row in result.history])
    extra = {"label_mean": result.stats.mean, "label_std": result.stats.std, "best_epoch": result.best_epoch}
    save_checkpoint(rc.out / "checkpoint.json", result.best_params, rc.model, extra)
    (rc.out / "run_config.json").write_text(json.dumps(rc.to_dict(), indent=2), encoding="utf-8")
    summary = {"best_epoch": result.best_epoch, "num_params": count_params(params)}
    if result.history:
        summary.update(result.history[result.best_epoch - 1])
    (rc.out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    family = _enum(Family, args.family, "family")
    task = _enum(Task, args.task, "task")
    if len(args.sizes) != 2 or args.sizes[0] > args.sizes[1]:
        raise UsageError("--sizes takes MIN MAX with MIN <= MAX")
    if not args.out:
        raise UsageError("--out is required")
    items = data.generate_dataset(family, tuple(args.sizes), args.count, task, args.seed or 0,
                                  extra_params=parse_params(args.param), max_diameter=args.max_diameter,
                                  feature_dist=args.features)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data.write_jsonl(args.out, items)
    log.info("wrote %d graphs to %s", len(items), args.out)
    return EXIT_OK


def cmd_extract(args) -> int:
    g, x = graph_from_args(args)
    cfg = seq_from_args(args)
    if args.what == "operators":
        payload = operator_sequence(g, cfg).mats
    else:
        payload = extract_sequence(g, x, cfg)
    doc = {"config": cfg.to_dict(), "what": args.what, "num_nodes": g.num_nodes,
           "shape": list(payload.shape), "data": payload.tolist(),
           "instability": detect_instability(payload).to_dict()}
    emit(json.dumps(doc) + "\n", args.out)
    return EXIT_OK


def cmd_influence(args) -> int:
    g, _ = graph_from_args(args)
    cfg = seq_from_args(args)
    ops = operator_sequence(g, cfg)
    ks = [args.k] if args.k is not None else range(cfg.length)
    rows = []
    for k in ks:
        row = ops.mats[k, args.node]
        if row.sum() == 0:
            continue
        for w, value in enumerate(influence(g, cfg, args.node, k, ops)):
            rows.append([args.node, k, w, repr(float(value))])
    emit_csv(["v", "k", "w", "I"], rows, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args)
    summary = run_training(rc)
    log.info("best epoch %d, val_mse %s", summary["best_epoch"], summary.get("val_mse"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.checkpoint or not args.data:
        raise UsageError("evaluate needs --checkpoint and --data")
    params, cfg, extra = load_checkpoint(args.checkpoint)
    stats = LabelStats(extra.get("label_mean", 0.0), extra.get("label_std", 1.0))
    m = evaluate(params, cfg, data.read_jsonl(args.data), stats)
    emit(json.dumps({"mse": m.mse, "mae": m.mae, "logmse": m.logmse}) + "\n", args.out)
    return EXIT_OK


def _parse_kind(text: str):
    kind, _, norm = text.partition(":")
    return _enum(SeqKind, kind, "sequence kind"), _enum(Normalization, norm or "none", "normalization")


def _ablation_cell(job):
    """Train one (kind, L, seed) cell; failures become a row, never an exception."""
    rc_doc, base, kind, norm, length, seed = job
    doc = json.loads(json.dumps(rc_doc))
    doc["seed"] = seed
    doc.setdefault("train", {})["seed"] = seed
    doc.setdefault("model", {})["seq"] = {"kind": kind, "length": length, "normalization": norm}
    cell_dir = Path(doc.get("out", "runs")) / f"{kind}-{norm}-L{length}-s{seed}"
    doc["out"] = str(cell_dir)
    row = {"kind": kind, "normalization": norm, "L": length, "seed": seed, "val_mse": math.nan,
           "val_mae": math.nan, "unstable": False, "num_params": 0, "status": "ok"}
    try:
        rc = RunConfig.from_dict(doc, Path(base))
        row["num_params"] = count_params(init_model(rc.model, seed))
        report = _instability_of(data.read_jsonl(rc.train_path), rc.model.seq)
        row["unstable"] = bool(report.get("overflow_at_index") is not None)
        cell_dir.mkdir(parents=True, exist_ok=True)
        if row["unstable"]:
            row["status"] = f"skipped: unstable sequence ({report['reason']} at element {report['overflow_at_index']})"
        else:
            t0 = time.perf_counter()
            summary = run_training(rc)
            row.update(val_mse=summary.get("val_mse", math.nan), val_mae=summary.get("val_mae", math.nan))
            row["seconds"] = round(time.perf_counter() - t0, 2)
        (cell_dir / "cell.json").write_text(json.dumps({**row, "instability": report}, indent=2), encoding="utf-8")
    except InstabilityExit as exc:
        row.update(unstable=True, status=f"failed: {exc}")
    except (LGSMError, OSError, ValueError) as exc:
        row["status"] = f"failed: {exc}"
    return row


ABLATION_HEADER = ["kind", "normalization", "L", "seed", "val_mse", "val_mae", "unstable", "num_params", "status"]


def threads_from_env() -> int:
    raw = os.environ.get("LGSM_THREADS", "0").strip() or "0"
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"LGSM_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise UsageError("LGSM_THREADS must be >= 0")
    return value


def run_ablation(rc_doc: dict, base, kinds, lengths, seeds, workers: int = 0) -> list[dict]:
    jobs = [(rc_doc, str(base), k.value, n.value, length, seed)
            for k, n in kinds for length in lengths for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablation_cell, jobs))
    return [_ablation_cell(job) for job in jobs]


def cmd_ablate_seq(args) -> int:
    if not args.config:
        raise UsageError("--config is required")
    doc = load_json(args.config)
    if args.out:
        doc["out"] = args.out
    apply_overrides(doc, parse_params(args.param))
    RunConfig.from_dict(doc, Path(args.config).parent)  # fail fast on bad configs
    kinds = [_parse_kind(s) for s in args.kinds.split(",") if s.strip()]
    seeds = args.seeds if args.seeds else [args.seed or 0]
    rows = run_ablation(doc, Path(args.config).parent, kinds, args.lengths, seeds, threads_from_env())
    out = Path(doc.get("out", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ABLATION_HEADER, [[r[h] for h in ABLATION_HEADER] for r in rows])
    for r in rows:
        if r["status"] != "ok":
            log.warning("cell %s/%s L=%s seed=%s: %s", r["kind"], r["normalization"], r["L"], r["seed"], r["status"])
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    g, x = graph_from_args(args)
    if args.checkpoint:
        params, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = ModelConfig(in_dim=x.shape[1], hidden_dim=args.hidden_dim, num_blocks=args.blocks,
                          seq=seq_from_args(args))
        params = init_model(cfg, args.seed or 0, scale=args.init_scale)
    if not 0 <= args.node < g.num_nodes:
        raise UsageError(f"--node {args.node} outside [0, {g.num_nodes})")
    rep = analysis.sensitivity_report(params, cfg, g, x, args.node, num_samples=args.samples, seed=args.seed or 0)
    emit(json.dumps(rep.to_dict(), indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_influence_check(args) -> int:
    rows = []
    for d in args.d:
        for k in args.k:
            measured, predicted = analysis.influence_ratio_check(d, k)
            rows.append([d, k, repr(measured), repr(predicted), repr(abs(measured - predicted))])
    emit_csv(["d", "k", "measured", "predicted", "abs_err"], rows, args.out)
    return EXIT_OK


def _best_time(fn, repeat=5):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    results = []
    for length in args.lengths:
        p = ssm.init_ssm(args.hidden_dim, args.hidden_dim, args.hidden_dim, rng=rng)
        seq = rng.standard_normal((length, args.nodes, args.hidden_dim))
        results.append({"op": "ssm_scan", "L": length,
                        "seconds": _best_time(lambda: ssm.ssm_forward_scan(p, seq))})
        results.append({"op": "ssm_sequential", "L": length,
                        "seconds": _best_time(lambda: ssm.ssm_forward_sequential(p, seq))})
        g = generate_family(Family.GRID, {"rows": 4, "cols": max(1, args.nodes // 4)})
        x = rng.standard_normal((g.num_nodes, 2))
        for kind in SeqKind:
            cfg = SeqExtractConfig(kind, length, Normalization.ROW)
            results.append({"op": f"extract_{kind.value}", "L": length,
                            "seconds": _best_time(lambda: extract_sequence(g, x, cfg))})
    emit(json.dumps(results, indent=2) + "\n", args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator parameter or dotted config override (repeatable)")


def _graph_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", help="generator family")
    p.add_argument("--data", help="JSONL dataset to read the graph from")
    p.add_argument("--index", type=int, default=0, help="record index in --data")
    p.add_argument("--features", default="uniform", choices=["uniform", "normal", "constant"])


def _seq_options(p: argparse.ArgumentParser, length=3) -> None:
    p.add_argument("--kind", default="nbt", help="adjacency, normalized_adjacency or nbt")
    p.add_argument("--length", type=int, default=length, help="number of sequence elements")
    p.add_argument("--normalization", default="none", help="none or row")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgsm", description="Linearized graph sequence models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled JSONL dataset")
    _common(p)
    p.add_argument("--family", required=True)
    p.add_argument("--task", required=True, help="diam, ecc or sssp")
    p.add_argument("--sizes", type=int, nargs=2, metavar=("MIN", "MAX"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--max-diameter", type=int, default=None)
    p.add_argument("--features", default="uniform", choices=["uniform", "normal", "constant"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", help="emit operator or sequence tensors as JSON")
    _common(p)
    _graph_source(p)
    _seq_options(p)
    p.add_argument("--what", default="operators", choices=["operators", "sequence"])
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("influence", help="relative influence rows (v, k, w, I) as CSV")
    _common(p)
    _graph_source(p)
    _seq_options(p)
    p.add_argument("--node", type=int, default=0)
    p.add_argument("--k", type=int, default=None, help="single element index (default: all)")
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("train", help="train a model from a run configuration")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-seq", help="train every (kind, L, seed) cell")
    _common(p)
    p.add_argument("--kinds", default="nbt:row,normalized_adjacency:none",
                   help="comma-separated kind[:normalization] entries")
    p.add_argument("--lengths", type=_int_list, default=[4, 16])
    p.add_argument("--seeds", type=_int_list, default=None)
    p.set_defaults(func=cmd_ablate_seq)

    p = sub.add_parser("sensitivity", help="empirical sensitivity and bounds as JSON")
    _common(p)
    _graph_source(p)
    _seq_options(p)
    p.add_argument("--node", type=int, default=0)
    p.add_argument("--checkpoint", help="model checkpoint (default: random init)")
    p.add_argument("--hidden-dim", type=int, default=4)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=1000, help="Jacobian samples per constant")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("influence-check", help="influence ratio law on regular trees as CSV")
    _common(p)
    p.add_argument("--d", type=_int_list, default=[3, 4])
    p.add_argument("--k", type=_int_list, default=[1, 2, 3])
    p.set_defaults(func=cmd_influence_check)

    p = sub.add_parser("bench", help="micro-benchmarks of scan and extraction")
    _common(p)
    p.add_argument("--lengths", type=_int_list, default=[16, 64, 256])
    p.add_argument("--nodes", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InstabilityExit as exc:
        print(f"error: numerical instability: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(json.dumps(exc.report), file=sys.stderr)
        return EXIT_UNSTABLE
    except NonFiniteActivation as exc:
        print(f"error: numerical instability: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, LGSMError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
