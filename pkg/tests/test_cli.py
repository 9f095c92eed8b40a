import csv
import json
import os

import numpy as np
import pandas as pd
import pytest

import gactgan.experiment as ex
from gactgan.artifacts import file_sha256
from gactgan.cli import main
from gactgan.evaluate import selection_score
from gactgan.toy import bimodal_table

TINY_TRAIN = {"epochs": 3, "batch_size": 50, "hidden": [8, 8], "noise_dim": 4}
SPEC = {"roc_targets": [["a"], ["a", "b"], ["x"]], "tcap": {"keys": ["a"], "target": "b"}}


def pareto_oracle(points):
    return [
        not any(u2 >= u and r2 <= r and (u2 > u or r2 < r) for j, (u2, r2) in enumerate(points) if j != i)
        for i, (u, r) in enumerate(points)
    ]


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("GACTGAN_THREADS", "1")


def _write_config(root, **over):
    bimodal_table(200, seed=0).to_csv(root / "toy.csv", index=False)
    cfg = {
        "dataset": "toy.csv",
        "losses": ["wasserstein", "vanilla"],
        "train": TINY_TRAIN,
        "swag": {"ranks": [0, 2], "alphas": [0.0, 0.5], "t_collect": 0},
        "synthesis": {"batch": 50},
        "eval": SPEC,
        "seeds": [0],
        "output": "runs",
    }
    cfg.update(over)
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _models(root):
    return sorted(p for p in root.glob("runs/*/models/*") if p.is_dir())


# -- config ----------------------------------------------------------------------


def test_config_rejects_unknown_keys(tmp_path):
    p = _write_config(tmp_path, colour="red")
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.load(p)
    assert main(["train", "--config", str(p)]) == 1


def test_config_rejects_unknown_nested_keys(tmp_path):
    p = _write_config(tmp_path, swag={"ranks": [1], "bogus": 1})
    assert main(["train", "--config", str(p)]) == 1


def test_config_defaults(tmp_path):
    cfg = ex.ExperimentConfig.from_dict({"dataset": "d.csv"})
    assert cfg.swag.ranks == [0, 30, 100, 150]
    assert cfg.swag.alphas == [0.0, 0.25, 0.5, 1.0]
    assert cfg.synthesis.samples == [1]
    assert cfg.seeds == [0, 1, 2, 3, 4] and cfg.phi == 0.75
    assert ex.ABLATION_SAMPLES == [1, 2, 4, 8, 16, 20]


def test_child_seeds_stable_and_distinct():
    a = ex.child_seed(0, "train", "vanilla", 1)
    assert a == ex.child_seed(0, "train", "vanilla", 1)
    assert len({a, ex.child_seed(0, "train", "vanilla", 2), ex.child_seed(1, "train", "vanilla", 1)}) == 3


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["synthesize", "--n", "3"])
    assert exc.value.code == 1


def test_data_error_exit_code(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1\n")
    assert main(["schema", "--csv", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "s.json")]) == 2


def test_numeric_error_exit_code(tmp_path, monkeypatch):
    p = _write_config(tmp_path)

    def boom(*a, **k):
        raise FloatingPointError("non-finite loss at epoch 1, batch 0")

    monkeypatch.setattr(ex, "cmd_train", boom)
    assert main(["train", "--config", str(p)]) == 3


def test_schema_command(tmp_path):
    bimodal_table(50).to_csv(tmp_path / "t.csv", index=False)
    assert main(["schema", "--csv", str(tmp_path / "t.csv"), "--out", str(tmp_path / "s.json"), "--categorical", "a"]) == 0
    schema = json.loads((tmp_path / "s.json").read_text())
    assert [c["kind"] for c in schema] == ["continuous", "categorical", "categorical"]


# -- train ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    os.environ["GACTGAN_THREADS"] = "1"
    p = _write_config(root)
    assert main(["train", "--config", str(p)]) == 0
    return root, p


def test_train_cardinality_and_logs(trained):
    root, _ = trained
    models = _models(root)
    assert [m.name for m in models] == ["vanilla-seed0", "wasserstein-seed0"]
    for m in models:
        assert (m / "checkpoint.bin").exists() and (m / "posterior.bin").exists()
        rows = list(csv.DictReader(open(m / "train_log.csv")))
        assert len(rows) == TINY_TRAIN["epochs"]
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]


def test_train_rerun_is_hash_identical(trained, tmp_path):
    root, p = trained
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "again")]) == 0
    for m in _models(root):
        other = next((tmp_path / "again").glob(f"*/models/{m.name}"))
        for name in ("posterior.bin", "checkpoint.bin", "train_log.csv"):
            assert file_sha256(m / name) == file_sha256(other / name)


def test_train_skips_finished_models(trained):
    root, p = trained
    before = {m: (m / "posterior.bin").stat().st_mtime_ns for m in _models(root)}
    assert main(["train", "--config", str(p)]) == 0
    assert before == {m: (m / "posterior.bin").stat().st_mtime_ns for m in _models(root)}


# -- synthesize ------------------------------------------------------------------------


def test_synthesize_rows_sidecar_and_categories(trained, tmp_path):
    root, _ = trained
    post = _models(root)[1] / "posterior.bin"
    out = tmp_path / "s.csv"
    args = ["synthesize", "--posterior", str(post), "--n", "3000", "--batch", "500", "--samples", "1", "--alpha", "0.5", "--seed", "4", "--out", str(out)]
    assert main(args) == 0
    df = pd.read_csv(out, dtype=str)
    assert len(df) == 3000 and list(df.columns) == ["x", "a", "b"]
    assert set(df["a"]) <= {"a", "b", "c"} and set(df["b"]) <= {"x", "y", "z"}
    meta = json.loads((tmp_path / "s.csv.json").read_text())
    assert meta["alpha"] == 0.5 and meta["S"] == 1 and meta["seed"] == 4
    assert meta["posterior_sha256"] == file_sha256(post)


def test_synthesize_alpha_zero_repeatable(trained, tmp_path):
    root, _ = trained
    post = _models(root)[0] / "posterior.bin"
    for name in ("a.csv", "b.csv"):
        assert main(["synthesize", "--posterior", str(post), "--n", "120", "--batch", "50", "--alpha", "0", "--seed", "2", "--out", str(tmp_path / name)]) == 0
    assert file_sha256(tmp_path / "a.csv") == file_sha256(tmp_path / "b.csv")


def test_synthesize_rejects_corrupt_posterior(tmp_path):
    (tmp_path / "p.bin").write_bytes(b"not an artifact")
    assert main(["synthesize", "--posterior", str(tmp_path / "p.bin"), "--n", "5", "--out", str(tmp_path / "o.csv")]) == 2


# -- evaluate ----------------------------------------------------------------------------


def test_evaluate_rumap(trained, tmp_path):
    root, _ = trained
    syn = tmp_path / "syn"
    wass = _models(root)[1]
    for seed in (0, 1):
        main(["synthesize", "--posterior", str(wass / "posterior.bin"), "--n", "200", "--batch", "50", "--alpha", "0.5", "--seed", str(seed), "--out", str(syn / f"g{seed}.csv")])
        main(["synthesize", "--checkpoint", str(wass / "checkpoint.bin"), "--n", "200", "--batch", "50", "--seed", str(seed), "--out", str(syn / f"c{seed}.csv")])
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    args = ["evaluate", "--original", str(root / "toy.csv"), "--synthetic", str(syn), "--spec", str(tmp_path / "spec.json"), "--phi", "0.75", "--out", str(tmp_path / "rep" / "report.json")]
    assert main(args) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "report.rumap.csv")))
    assert list(rows[0]) == ["config", "loss", "K", "alpha", "S", "U", "R", "SS", "pareto", "cutoff_pass"]
    assert len(rows) == 2
    pts = [(float(r["U"]), float(r["R"])) for r in rows]
    assert [bool(int(r["pareto"])) for r in rows] == pareto_oracle(pts)
    for r in rows:
        assert float(r["SS"]) == selection_score(float(r["U"]), float(r["R"]), 0.75)
        assert int(r["cutoff_pass"]) == int(float(r["U"]) > 0.4)
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert set(report["configs"][0]["per_seed"]) == {"0", "1"}
    assert (tmp_path / "rep" / "report.svg").read_text().startswith("<svg")


# -- sweep -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    os.environ["GACTGAN_THREADS"] = "1"
    p = _write_config(
        root,
        swag={"ranks": [0, 30, 100, 150], "alphas": [0, 0.25, 0.5, 1.0], "t_collect": 0},
        seeds=[0, 1, 2, 3, 4],
    )
    assert main(["sweep", "--config", str(p), "--out", str(root / "out")]) == 0
    return root, p


def test_sweep_cell_arithmetic(swept):
    root, _ = swept
    base = next((root / "out").glob("*"))
    cells = list((base / "cells").glob("*.json"))
    gactgan_cells = [c for c in cells if c.name.startswith("gactgan-")]
    assert len(gactgan_cells) == 2 * 4 * 4 * 1 * 5
    assert len(cells) - len(gactgan_cells) == 10  # one baseline per model
    assert len(list((base / "models").iterdir())) == 10
    report = json.loads((base / "results.json").read_text())
    assert report["failed"] == []
    assert len(report["configs"]) == 2 * 16 + 2


def test_sweep_gain_table(swept):
    root, _ = swept
    base = next((root / "out").glob("*"))
    report = json.loads((base / "results.json").read_text())
    means = {g["config"]: g["means"] for g in report["configs"]}
    gains = list(csv.DictReader(open(base / "gains.csv")))
    assert len(gains) == 32
    for row in gains:
        m, b = means[row["config"]], means[f"ctgan-{row['loss']}"]
        assert float(row["utility_gain"]) == pytest.approx(100 * (m["U"] - b["U"]), abs=1e-12)
        assert float(row["risk_gain"]) == pytest.approx(100 * (m["R"] - b["R"]), abs=1e-12)
    best = report["best"]
    for loss, cid in best.items():
        members = [g for g in report["configs"] if g["loss"] == loss]
        eligible = [g for g in members if g["utility_cutoff_pass"]] or members
        assert means[cid]["SS"] == max(g["means"]["SS"] for g in eligible)


def test_sweep_pareto_per_loss(swept):
    root, _ = swept
    rows = list(csv.DictReader(open(next((root / "out").glob("*/rumap.csv")))))
    for loss in ("vanilla", "wasserstein"):
        sub = [r for r in rows if r["loss"] == loss]
        pts = [(float(r["U"]), float(r["R"])) for r in sub]
        assert [bool(int(r["pareto"])) for r in sub] == pareto_oracle(pts)


def test_sweep_resume_recomputes_only_missing(swept, monkeypatch):
    root, p = swept
    base = next((root / "out").glob("*"))
    target = base / "cells" / "gactgan-vanilla-K30-a0.25-S1-seed2.json"
    saved = target.read_text()
    target.unlink()
    calls = []
    real = ex.evaluate_one
    monkeypatch.setattr(ex, "evaluate_one", lambda *a, **k: calls.append(1) or real(*a, **k))
    results_before = (base / "results.json").read_text()
    assert main(["sweep", "--config", str(p), "--out", str(root / "out")]) == 0
    assert len(calls) == 1
    assert target.read_text() == saved
    assert (base / "results.json").read_text() == results_before


def test_sweep_paths_depend_on_config_hash(swept, tmp_path):
    root, p = swept
    cfg = ex.ExperimentConfig.load(p)
    changed = ex.ExperimentConfig.from_dict({**json.loads(p.read_text()), "phi": 0.5}, base_dir=root)
    assert cfg.config_hash() != changed.config_hash()
    assert ex.model_dir(cfg, root, "vanilla", 0) == ex.model_dir(ex.ExperimentConfig.load(p), root, "vanilla", 0)


def test_sweep_records_partial_failures(tmp_path, monkeypatch):
    p = _write_config(tmp_path, losses=["vanilla"], swag={"ranks": [0], "alphas": [0.5], "t_collect": 0})
    real = ex.evaluate_one

    def flaky(orig, syn, spec, phi):
        if flaky.n == 0:
            flaky.n += 1
            raise ValueError("synthetic decode failed")
        return real(orig, syn, spec, phi)

    flaky.n = 0
    monkeypatch.setattr(ex, "evaluate_one", flaky)
    report = ex.cmd_sweep(ex.ExperimentConfig.load(p), tmp_path / "out")
    assert len(report["failed"]) == 1 and "decode" in report["failed"][0]["error"]
    assert len(report["configs"]) == 1
    # the failed cell is retried on resume
    report = ex.cmd_sweep(ex.ExperimentConfig.load(p), tmp_path / "out")
    assert report["failed"] == [] and len(report["configs"]) == 2
