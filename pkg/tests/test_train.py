import math

import numpy as np
import pytest

from lgsm.data import generate_dataset
from lgsm.errors import DegenerateLabels, EmptyBatch, NonFiniteActivation
from lgsm.graph import Family, Task
from lgsm.model import ModelConfig, flatten, init_model
from lgsm.seqext import SeqExtractConfig, SeqKind
from lgsm.train import (AdamState, TrainConfig, adam_step, clip_gradients, evaluate, global_norm,
                        label_stats, logmse_loss, normalize_labels, train)


def test_logmse_value_and_grad():
    pred = np.array([1.0, 2.0, 4.0])
    target = np.array([1.0, 1.0, 1.0])
    loss, grad = logmse_loss(pred, target)
    assert loss == pytest.approx(math.log(10.0 / 3.0 + 1e-12))
    h = 1e-6
    for i in range(3):
        e = np.eye(3)[i] * h
        num = (logmse_loss(pred + e, target)[0] - logmse_loss(pred - e, target)[0]) / (2 * h)
        assert grad[i] == pytest.approx(num, rel=1e-6)


def test_logmse_perfect_prediction_is_finite():
    loss, grad = logmse_loss(np.ones(4), np.ones(4))
    assert loss == pytest.approx(math.log(1e-12))
    assert np.all(grad == 0)


def test_logmse_empty():
    with pytest.raises(EmptyBatch):
        logmse_loss(np.zeros(0), np.zeros(0))


def test_clip_rescales_to_max_norm():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(13.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    same, _ = clip_gradients({"a": np.array([0.1])}, 1.0)
    assert same["a"][0] == 0.1


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    adam_step(p, g, AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-6)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    w = rng.normal(size=3)
    p = {"w": w.copy()}
    state = AdamState()
    m = v = np.zeros(3)
    ref = w.copy()
    for t in range(1, 6):
        g = rng.normal(size=3)
        adam_step(p, {"w": g}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, atol=1e-14)


def test_label_stats_population_std():
    items = generate_dataset(Family.LINE, (3, 6), 4, Task.SSSP, seed=0)
    y = np.concatenate([it.target_array for it in items])
    stats = label_stats(items)
    assert stats.std == pytest.approx(np.std(y, ddof=0))
    normed, mean, std = normalize_labels(items)
    z = np.concatenate([it.target_array for it in normed])
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0)
    assert items[0].targets is not normed[0].targets


def test_degenerate_labels():
    items = generate_dataset(Family.CYCLE, (4, 4), 2, Task.ECCENTRICITY, seed=0)
    with pytest.raises(DegenerateLabels):
        label_stats(items)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0)


def _tiny_setup(task=Task.SSSP, level="node"):
    data = generate_dataset(Family.LINE, (4, 8), 6, task, seed=1)
    cfg = ModelConfig(in_dim=2, hidden_dim=8, num_blocks=1, task_level=level,
                      seq=SeqExtractConfig(SeqKind.NON_BACKTRACKING, 4, "row"))
    return data, cfg


def test_zero_lr_keeps_params_and_flat_history():
    data, cfg = _tiny_setup()
    params = init_model(cfg, 0)
    before = {k: v.copy() for k, v in flatten(params).items()}
    res = train(params, cfg, TrainConfig(learning_rate=0.0, max_epochs=3, batch_size=4), data, data)
    for k, v in flatten(params).items():
        np.testing.assert_array_equal(v, before[k])
    mses = [row["train_mse"] for row in res.history]
    assert max(mses) - min(mses) < 1e-12


def test_training_is_deterministic():
    data, cfg = _tiny_setup()
    runs = [train(init_model(cfg, 0), cfg, TrainConfig(learning_rate=1e-2, max_epochs=3, batch_size=3), data, data)
            for _ in range(2)]
    assert runs[0].history == runs[1].history


def test_training_reduces_loss():
    data, cfg = _tiny_setup()
    res = train(init_model(cfg, 0), cfg, TrainConfig(learning_rate=3e-3, max_epochs=30, batch_size=6), data)
    assert res.history[-1]["train_mse"] < 0.5 * res.history[0]["train_mse"]
    m = evaluate(res.best_params, cfg, data, res.stats)
    assert np.isfinite(m.mse) and m.logmse == pytest.approx(math.log(m.mse + 1e-12))


def test_graph_level_training_runs():
    data, cfg = _tiny_setup(Task.DIAMETER, "graph")
    res = train(init_model(cfg, 0), cfg, TrainConfig(learning_rate=1e-3, max_epochs=2), data, data)
    assert len(res.history) == 2 and 1 <= res.best_epoch <= 2


def test_task_level_mismatch():
    data, cfg = _tiny_setup(Task.DIAMETER, "node")
    with pytest.raises(ValueError):
        train(init_model(cfg, 0), cfg, TrainConfig(max_epochs=1), data)


def test_nonfinite_reports_epoch_and_batch():
    data, cfg = _tiny_setup()
    params = init_model(cfg, 0)
    params["encoder"]["W"][:] = np.nan
    with pytest.raises(NonFiniteActivation) as info:
        train(params, cfg, TrainConfig(max_epochs=1), data)
    assert info.value.epoch == 1 and info.value.batch == 0
