import csv
import json

import pytest

from lgsm.cli import apply_overrides, main, parse_params


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "ecc.jsonl"
    assert main(["gen-data", "--family", "line", "--sizes", "4", "8", "--count", "10", "--task", "ecc",
                 "--seed", "1", "--out", str(path)]) == 0
    return path


def write_config(tmp_path, data_path, **train):
    cfg = {"model": {"hidden_dim": 4, "num_blocks": 1, "seq": {"kind": "nbt", "length": 4, "normalization": "row"}},
           "train": {"max_epochs": 2, "learning_rate": 1e-3, **train},
           "data": {"train": str(data_path), "val": str(data_path)}, "out": str(tmp_path / "run"), "seed": 0}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_parse_params_and_overrides():
    params = parse_params(["n=4", "p=0.5", "name=abc", "train.max_epochs=3"])
    assert params == {"n": 4, "p": 0.5, "name": "abc", "train.max_epochs": 3}
    doc = apply_overrides({"train": {"max_epochs": 1}}, {"train.max_epochs": 3, "model.hidden_dim": 8})
    assert doc == {"train": {"max_epochs": 3}, "model": {"hidden_dim": 8}}


def test_gen_data_schema_and_determinism(tmp_path, dataset):
    lines = dataset.read_text().splitlines()
    assert len(lines) == 10
    for line in lines:
        rec = json.loads(line)
        assert len(rec["y"]) == rec["n"]
    again = tmp_path / "again.jsonl"
    main(["gen-data", "--family", "line", "--sizes", "4", "8", "--count", "10", "--task", "ecc",
          "--seed", "1", "--out", str(again)])
    assert again.read_bytes() == dataset.read_bytes()


def test_gen_data_unknown_family(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--family", "bogus", "--sizes", "3", "4", "--count", "1",
                       "--task", "ecc", "--out", str(tmp_path / "x.jsonl"))
    assert code == 2 and "unknown family" in err


def test_usage_error_exit_code(capsys):
    assert run(capsys, "no-such-command")[0] == 2
    assert run(capsys, "--help")[0] == 0


def test_extract_nbt_p3(capsys):
    code, out, _ = run(capsys, "extract", "--family", "line", "--param", "n=3", "--kind", "nbt", "--length", "3")
    doc = json.loads(out)
    assert code == 0 and doc["shape"] == [3, 3, 3]
    assert doc["data"][2] == [[0, 0, 1], [0, 0, 0], [1, 0, 0]]


def test_extract_sequence_mode(capsys):
    code, out, _ = run(capsys, "extract", "--family", "cycle", "--param", "n=4", "--what", "sequence",
                       "--length", "2", "--seed", "0")
    assert code == 0 and json.loads(out)["shape"] == [2, 4, 2]


def test_influence_csv(tmp_path):
    out = tmp_path / "inf.csv"
    assert main(["influence", "--family", "line", "--param", "n=4", "--node", "0", "--length", "4",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert set(rows[0]) == {"v", "k", "w", "I"}
    last = [r for r in rows if r["k"] == "3"]
    assert [float(r["I"]) for r in last] == [0, 0, 0, 1]


def test_influence_check_csv(capsys):
    code, out, _ = run(capsys, "influence-check", "--d", "3", "--k", "2")
    rows = list(csv.DictReader(out.splitlines()))
    assert code == 0 and float(rows[0]["measured"]) == pytest.approx(2 / 3, abs=1e-12)
    assert float(rows[0]["abs_err"]) <= 1e-12


def test_train_and_evaluate(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path, dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    run_dir = tmp_path / "run"
    rows = list(csv.DictReader((run_dir / "history.csv").open()))
    assert len(rows) == 2
    assert {"epoch", "train_logmse", "val_mse", "val_mae"} <= set(rows[0])
    code, out, _ = run(capsys, "evaluate", "--checkpoint", str(run_dir / "checkpoint.json"), "--data", str(dataset))
    metrics = json.loads(out)
    assert code == 0 and metrics["mse"] >= 0
    best = int(json.loads((run_dir / "summary.json").read_text())["best_epoch"])
    assert metrics["mse"] == pytest.approx(float(rows[best - 1]["val_mse"]), rel=1e-12)


def test_train_zero_lr_flat_history(tmp_path, dataset):
    cfg = write_config(tmp_path, dataset, learning_rate=0.0, max_epochs=3)
    assert main(["train", "--config", str(cfg)]) == 0
    rows = list(csv.DictReader((tmp_path / "run" / "history.csv").open()))
    assert len({r["val_mse"] for r in rows}) == 1


def test_train_param_override(tmp_path, dataset):
    cfg = write_config(tmp_path, dataset)
    assert main(["train", "--config", str(cfg), "--param", "train.max_epochs=1", "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "history.csv").read_text().splitlines()) == 2


def test_train_bad_config(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path, dataset, clip_norm=-1)
    assert run(capsys, "train", "--config", str(cfg))[0] == 2


def test_train_missing_dataset(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "absent.jsonl")
    assert run(capsys, "train", "--config", str(cfg))[0] == 4


def test_train_corrupt_jsonl_names_line(tmp_path, dataset, capsys):
    with dataset.open("a") as fh:
        fh.write("{not json\n")
    code, _, err = run(capsys, "train", "--config", str(write_config(tmp_path, dataset)))
    assert code == 4 and "line 11" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_exit_3(tmp_path, capsys):
    from lgsm import data
    from lgsm.graph import Family, Task
    items = data.generate_dataset(Family.GRID, (10, 10), 2, Task.ECCENTRICITY, seed=0,
                                  extra_params={"rows": 4})
    for it in items:
        it.features[:, 0] = 1e300
    path = tmp_path / "huge.jsonl"
    data.write_jsonl(path, items)
    cfg = write_config(tmp_path, path)
    doc = json.loads(cfg.read_text())
    doc["model"]["seq"] = {"kind": "adjacency", "length": 40, "normalization": "none"}
    cfg.write_text(json.dumps(doc))
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 3 and "instability" in err


def test_sensitivity_json(capsys):
    code, out, _ = run(capsys, "sensitivity", "--family", "erdos_renyi", "--param", "n=5", "--param", "p=0.7",
                       "--seed", "0", "--samples", "200", "--node", "1")
    rep = json.loads(out)
    assert code == 0 and rep["empirical"] <= rep["bound_full"]


def test_ablate_seq(tmp_path, dataset, monkeypatch):
    monkeypatch.setenv("LGSM_THREADS", "0")
    cfg = write_config(tmp_path, dataset, max_epochs=1)
    out = tmp_path / "abl"
    assert main(["ablate-seq", "--config", str(cfg), "--kinds", "nbt:row,normalized_adjacency",
                 "--lengths", "2,4", "--seeds", "0", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert len(rows) == 4
    assert len({r["num_params"] for r in rows}) == 1
    assert all(r["status"] == "ok" for r in rows)
    assert (out / "nbt-row-L2-s0" / "cell.json").exists()


def test_ablate_flags_unstable_grid(tmp_path, monkeypatch):
    monkeypatch.setenv("LGSM_THREADS", "0")
    from lgsm import data
    from lgsm.graph import Family, Task
    path = tmp_path / "grid.jsonl"
    data.write_jsonl(path, data.generate_dataset(Family.GRID, (10, 10), 1, Task.ECCENTRICITY, seed=0,
                                                 extra_params={"rows": 4}))
    cfg = write_config(tmp_path, path, max_epochs=1)
    out = tmp_path / "abl"
    assert main(["ablate-seq", "--config", str(cfg), "--kinds", "adjacency", "--lengths", "40",
                 "--seeds", "0", "--out", str(out)]) == 0
    row = next(csv.DictReader((out / "ablation.csv").open()))
    assert row["unstable"] == "True" and row["status"].startswith("skipped")


def test_bad_threads_env(tmp_path, dataset, monkeypatch, capsys):
    monkeypatch.setenv("LGSM_THREADS", "many")
    cfg = write_config(tmp_path, dataset, max_epochs=1)
    assert run(capsys, "ablate-seq", "--config", str(cfg), "--lengths", "2")[0] == 2


def test_bench(capsys):
    code, out, _ = run(capsys, "bench", "--lengths", "8", "--nodes", "8", "--hidden-dim", "4")
    ops = {r["op"] for r in json.loads(out)}
    assert code == 0 and {"ssm_scan", "ssm_sequential", "extract_nbt"} <= ops
