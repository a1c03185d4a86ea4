import json

import numpy as np
import pytest

from argf.cli import EXIT_INVALID, main
from argf.gfn import VERTEX_ORDER

FAST = ["--k", "3", "--epochs", "2", "--batch_size", "32"]


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "bundle"
    assert main(["synth", "--out", str(path), "--count", "100", "--dim", "5", "--seed", "1"]) == 0
    return path


@pytest.fixture(scope="module")
def trained(bundle_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    code = main(["train", "--data", str(bundle_dir), *FAST,
                 "--model", str(out / "m.npz"), "--report", str(out / "r.json")])
    assert code == 0
    return out


def test_train_writes_report(trained):
    report = json.loads((trained / "r.json").read_text())
    assert report["config"]["k"] == 3
    assert len(report["history"]) == 2
    assert report["test"]["count"] == 20


def test_config_file_and_override(bundle_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k": 2, "epochs": 1, "lam": 0.25, "fusion": "concat_fc"}))
    report = tmp_path / "r.json"
    code = main(["train", "--data", str(bundle_dir), "--config", str(cfg), "--lam", "0.75",
                 "--no-finetune-encoders", "--report", str(report)])
    assert code == 0
    config = json.loads(report.read_text())["config"]
    assert (config["k"], config["lam"], config["fusion"], config["finetune_encoders"]) == (2, 0.75, "concat_fc", False)


def test_every_config_key_has_a_flag():
    from dataclasses import fields

    from argf.cli import build_parser
    from argf.harness import RunConfig

    train_parser = build_parser()._subparsers._group_actions[0].choices["train"]
    dests = {a.dest for a in train_parser._actions}
    assert {f.name for f in fields(RunConfig)} <= dests


@pytest.mark.parametrize(
    "extra",
    [["--lam", "1.5"], ["--fusion", "nope"], ["--no_adv", "--no_decoder"]],
)
def test_invalid_config_exit_code(bundle_dir, extra, capsys):
    assert main(["train", "--data", str(bundle_dir), *FAST, *extra]) == EXIT_INVALID
    assert "bad config" in capsys.readouterr().err


def test_unknown_config_key(bundle_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda": 0.3}))
    assert main(["train", "--data", str(bundle_dir), "--config", str(cfg)]) == EXIT_INVALID


def test_bad_bundle_exit_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), *FAST]) == EXIT_INVALID
    assert "manifest" in capsys.readouterr().err


def test_eval(bundle_dir, trained, tmp_path, capsys):
    report = tmp_path / "e.json"
    assert main(["eval", "--data", str(bundle_dir), "--model", str(trained / "m.npz"), "--report", str(report)]) == 0
    trained_test = json.loads((trained / "r.json").read_text())["test"]
    assert json.loads(report.read_text())["test"] == trained_test
    assert "accuracy=" in capsys.readouterr().out


def test_eval_rejects_mismatched_bundle(trained, tmp_path):
    other = tmp_path / "other"
    main(["synth", "--out", str(other), "--count", "50", "--dim", "7"])
    assert main(["eval", "--data", str(other), "--model", str(trained / "m.npz")]) == EXIT_INVALID


def test_exports(bundle_dir, trained, tmp_path):
    emb, graph = tmp_path / "emb.csv", tmp_path / "g.csv"
    model = str(trained / "m.npz")
    assert main(["export-embeddings", "--data", str(bundle_dir), "--model", model, "--out", str(emb)]) == 0
    assert main(["export-graph", "--data", str(bundle_dir), "--model", model, "--out", str(graph)]) == 0
    assert np.loadtxt(emb, delimiter=",").shape == (100, 3 * 3 + 1)
    assert np.loadtxt(graph, delimiter=",").shape == (20, len(VERTEX_ORDER))


def test_gridsearch(bundle_dir, tmp_path, capsys):
    grid, report = tmp_path / "grid.json", tmp_path / "g.json"
    grid.write_text(json.dumps({"lam": [0.2, 0.8]}))
    code = main(["gridsearch", "--data", str(bundle_dir), *FAST, "--epochs", "1",
                 "--grid", str(grid), "--report", str(report)])
    assert code == 0
    rows = json.loads(report.read_text())
    assert len(rows) == 2 and rows[0]["test"] is not None and rows[1]["test"] is None
    assert "lam=" in capsys.readouterr().out


def test_gridsearch_rejects_bad_grid(bundle_dir, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"lam": 0.2}))
    assert main(["gridsearch", "--data", str(bundle_dir), "--grid", str(grid)]) == EXIT_INVALID
    grid.write_text(json.dumps({"lam": [2.0]}))
    assert main(["gridsearch", "--data", str(bundle_dir), "--grid", str(grid)]) == EXIT_INVALID
