"""Loss, Adam, gradient clipping, label normalization and the training loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateLabels, EmptyBatch, NonFiniteActivation
from .graph import LabeledGraph
from .model import (ModelConfig, PreparedGraph, TaskLevel, flatten, make_batch, model_backward,
                    model_forward, prepare_graph)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 200
    clip_norm: float = 1.0
    seed: int = 0
    log_eps: float = 1e-12
    label_normalize: bool = True
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.clip_norm <= 0 or self.log_eps <= 0:
            raise ValueError("clip_norm and log_eps must be positive")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class Metrics:
    """Errors on the original label scale."""

    mse: float
    mae: float
    logmse: float


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def logmse_loss(pred, target, log_eps: float = 1e-12):
    """``ln(mean((pred - target)^2) + log_eps)`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    if pred.size == 0:
        raise EmptyBatch("log-MSE of an empty batch")
    resid = pred - target
    mse = float(np.mean(resid * resid))
    return math.log(mse + log_eps), 2.0 * resid / (pred.size * (mse + log_eps))


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelStats:
    mean: float = 0.0
    std: float = 1.0

    def normalize(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.std

    def denormalize(self, y):
        return np.asarray(y, dtype=float) * self.std + self.mean


def label_stats(dataset: list[LabeledGraph]) -> LabelStats:
    """Population mean/std over every target value in ``dataset``."""
    y = np.concatenate([item.target_array for item in dataset])
    std = float(y.std())
    if not std > 0:
        raise DegenerateLabels("labels are constant; cannot normalize")
    return LabelStats(float(y.mean()), std)


def normalize_labels(dataset: list[LabeledGraph]):
    """Return ``(normalized copies, mean, std)``; the input items are untouched."""
    stats = label_stats(dataset)
    out = []
    for item in dataset:
        new = copy.copy(item)
        new.targets = float(stats.normalize(item.targets)) if item.task.graph_level else stats.normalize(item.targets)
        out.append(new)
    return out, stats.mean, stats.std


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on the flat ``params`` arrays."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, value in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------


def prepare_dataset(dataset: list[LabeledGraph], cfg: ModelConfig) -> list[PreparedGraph]:
    return [prepare_graph(item.graph, item.features, cfg.seq) for item in dataset]


def _targets(items: list[LabeledGraph], stats: LabelStats) -> np.ndarray:
    return stats.normalize(np.concatenate([item.target_array for item in items]))[:, None]


def _check_levels(cfg: ModelConfig, dataset):
    want_graph = cfg.task_level is TaskLevel.GRAPH
    for item in dataset:
        if item.task.graph_level != want_graph:
            raise ValueError(f"task {item.task.value} does not match a {cfg.task_level.value}-level model")


def predict_dataset(params, cfg: ModelConfig, dataset, stats: LabelStats = LabelStats(),
                    batch_size: int = 64, prepared=None) -> list[np.ndarray]:
    """Denormalized predictions, one 1-D array per graph."""
    prepared = prepared if prepared is not None else prepare_dataset(dataset, cfg)
    out = []
    for lo in range(0, len(prepared), batch_size):
        chunk = prepared[lo:lo + batch_size]
        pred = model_forward(params, cfg, make_batch(chunk))[0][:, 0]
        pred = stats.denormalize(pred)
        if cfg.task_level is TaskLevel.GRAPH:
            out.extend(pred[i:i + 1] for i in range(len(chunk)))
        else:
            sizes = np.cumsum([p.graph.num_nodes for p in chunk])[:-1]
            out.extend(np.split(pred, sizes))
    return out


def metrics_from(preds, dataset, log_eps: float = 1e-12) -> Metrics:
    resid = np.concatenate([p - item.target_array for p, item in zip(preds, dataset)])
    mse = float(np.mean(resid ** 2))
    return Metrics(mse, float(np.mean(np.abs(resid))), math.log(mse + log_eps))


def evaluate(params, cfg: ModelConfig, dataset, stats: LabelStats = LabelStats(),
             log_eps: float = 1e-12, prepared=None) -> Metrics:
    return metrics_from(predict_dataset(params, cfg, dataset, stats, prepared=prepared), dataset, log_eps)


@dataclass
class TrainResult:
    history: list[dict]
    best_params: dict
    best_epoch: int
    stats: LabelStats
    final_params: dict


def train(params, cfg: ModelConfig, tcfg: TrainConfig, train_set: list[LabeledGraph],
          val_set: list[LabeledGraph] | None = None) -> TrainResult:
    """Mini-batch Adam on log-MSE with global-norm clipping.

    ``params`` is updated in place.  Each history row holds the log-MSE and
    MSE of the epoch's pre-update batch predictions (normalized scale) and validation metrics on the
    original scale.  The parameters with the lowest validation MSE (or
    training MSE without a validation set) are returned as ``best_params``.
    """
    if not train_set:
        raise EmptyBatch("empty training set")
    _check_levels(cfg, train_set)
    if val_set:
        _check_levels(cfg, val_set)
    stats = label_stats(train_set) if tcfg.label_normalize else LabelStats()
    prepared = prepare_dataset(train_set, cfg)
    val_prepared = prepare_dataset(val_set, cfg) if val_set else None
    targets = [_targets([item], stats) for item in train_set]

    rng = np.random.default_rng(tcfg.seed)
    flat = flatten(params)
    state = AdamState()
    history, best_score, best_epoch = [], math.inf, 0
    best = copy.deepcopy(params)
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(prepared))
        sse, count = 0.0, 0
        for b, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            batch = make_batch([prepared[i] for i in idx])
            y = np.concatenate([targets[i] for i in idx])
            try:
                pred, cache = model_forward(params, cfg, batch)
            except NonFiniteActivation as exc:
                raise NonFiniteActivation(f"epoch {epoch}, batch {b}: {exc}", epoch=epoch, batch=b) from exc
            _, d_pred = logmse_loss(pred, y, tcfg.log_eps)
            grads = flatten(model_backward(params, cfg, cache, d_pred)[0])
            grads, _ = clip_gradients(grads, tcfg.clip_norm)
            adam_step(flat, grads, state, tcfg.learning_rate, tcfg.betas, tcfg.adam_eps)
            sse += float(np.sum((pred - y) ** 2))
            count += y.size
        train_mse = sse / count
        row = {"epoch": epoch, "train_logmse": math.log(train_mse + tcfg.log_eps), "train_mse": train_mse}
        if val_set:
            m = evaluate(params, cfg, val_set, stats, tcfg.log_eps, prepared=val_prepared)
            row.update(val_mse=m.mse, val_mae=m.mae, val_logmse=m.logmse)
            score = m.mse
        else:
            row.update(val_mse=math.nan, val_mae=math.nan, val_logmse=math.nan)
            score = row["train_mse"]
        history.append(row)
        log.debug("epoch %d %s", epoch, row)
        if score < best_score:
            best_score, best_epoch = score, epoch
            best = copy.deepcopy(params)
    return TrainResult(history, best, best_epoch, stats, params)
