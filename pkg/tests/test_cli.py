import json
import subprocess
import sys

import pytest

from dreamfore.cli import main
from dreamfore.config import dump_config
from conftest import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "3", "--count", "3", "--out", str(root / "data")]) == 0
    dump_config(tiny_config(epochs=1), root / "tiny.yaml")
    assert main(["train", "--config", str(root / "tiny.yaml"), "--data", str(root / "data/corpus.jsonl"),
                 "--out", str(root / "run")]) == 0
    return root


def test_train_artifacts(trained):
    run = trained / "run"
    for name in ("checkpoint.npz", "train_log.csv", "config.yaml", "manifest.json"):
        assert (run / name).exists(), name
    man = json.loads((run / "manifest.json").read_text())
    assert man["command"] == "train" and man["status"] == "ok" and man["seed"] == 0
    assert man["config"]["epochs"] == 1 and man["git_describe"]


@pytest.mark.parametrize("argv", [
    ["train", "--data", "missing.jsonl", "--out", "x"],
    ["eval", "--data", "{data}", "--k", "0", "--out", "x"],
    ["dream", "--checkpoint", "{ckpt}", "--data", "{data}", "--H", "0", "--out", "x"],
    ["dream", "--checkpoint", "{ckpt}", "--data", "{data}", "--H", "3", "--dt", "0.3", "--out", "x"],
    ["eval", "--data", "{data}", "--predictor", "psychic", "--out", "x"],
    ["frobnicate"],
])
def test_bad_flags_exit_2(trained, argv, capsys):
    argv = [a.format(data=trained / "data/corpus.jsonl", ckpt=trained / "run/checkpoint.npz") for a in argv]
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exit_1(trained, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{nope\n")
    code = main(["eval", "--data", str(bad), "--predictor", "oracle", "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1 and len(err) == 1 and err[0].startswith("error: ScenarioLoadError:")
    man = json.loads((tmp_path / "o/manifest.json").read_text())
    assert man["status"].startswith("error: ScenarioLoadError")


def test_model_without_checkpoint_is_runtime_error(trained, tmp_path, capsys):
    assert main(["eval", "--data", str(trained / "data/corpus.jsonl"), "--out", str(tmp_path)]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_oracle_predictor_scores_zero(trained, tmp_path):
    assert main(["eval", "--data", str(trained / "data/corpus.jsonl"), "--predictor", "oracle",
                 "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["min_ade"] == 0.0 and m["min_fde"] == 0.0 and m["actor_mr"] == 0.0


def test_constant_velocity_baseline_runs(trained, tmp_path):
    assert main(["eval", "--data", str(trained / "data/corpus.jsonl"), "--predictor", "constant-velocity",
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "metrics.json").read_text())["min_ade"] > 0


def test_eval_csv_is_byte_identical(trained, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "run/checkpoint.npz"), "--data", str(trained / "data/corpus.jsonl"),
            "--k", "2", "--dump-rollouts"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert len(list((tmp_path / "a/rollouts").glob("*.json"))) == 3


def test_dream_writes_overlay(trained, tmp_path):
    assert main(["dream", "--checkpoint", str(trained / "run/checkpoint.npz"),
                 "--data", str(trained / "data/corpus.jsonl"), "--H", "6", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dream.svg").read_text().startswith("<svg")
    assert len(json.loads((tmp_path / "rollout.json").read_text())["states"]) == 7


def test_dream_rejects_incompatible_dt(trained, tmp_path, capsys):
    code = main(["dream", "--checkpoint", str(trained / "run/checkpoint.npz"),
                 "--data", str(trained / "data/corpus.jsonl"), "--H", "3", "--dt", "0.5", "--out", str(tmp_path)])
    assert code == 1 and "planner" in capsys.readouterr().err


def test_dream_unknown_scenario(trained, tmp_path):
    assert main(["dream", "--checkpoint", str(trained / "run/checkpoint.npz"), "--data",
                 str(trained / "data/corpus.jsonl"), "--scenario", "nope", "--H", "2", "--out", str(tmp_path)]) == 1


def test_ablate_two_cells(tmp_path):
    grid = tmp_path / "grid.yaml"
    grid.write_text(
        "data: {synthetic: {seed: 1, count: 2}}\n"
        "base: {epochs: 1, batch_size: 2, warmup_epochs: 0, T: 0.5,\n"
        "       model: {n_max: 6, d_model: 8, subgraph_hidden: 8, h_dim: 16, predictor_hidden: 16,\n"
        "               kin_hidden: 8, target_hidden: 8, traj_hidden: 16, score_hidden: 8, n_anchors: 12, m_targets: 3}}\n"
        "cells:\n  - {name: fine, dt: 0.1}\n  - {name: coarse, dt: 0.5}\n")
    assert main(["ablate", "--grid", str(grid), "--out", str(tmp_path / "out")]) == 0
    rows = (tmp_path / "out/ablation.csv").read_text().splitlines()
    assert rows[0] == "cell,dt,T,H,epochs,minADE,minFDE,actorMR,n_scenarios,aborted,status"
    assert all(r.endswith(",ok") for r in rows[1:])
    assert rows[1].startswith("fine,0.1,0.5,60,") and rows[2].startswith("coarse,0.5,0.5,12,")
    for cell in ("fine", "coarse"):
        assert (tmp_path / "out" / cell / "metrics.csv").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dreamfore", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout


def test_ablation_failed_cell_is_marked(tmp_path):
    from dreamfore.ablation import AblationGrid, run_ablation
    from dreamfore.synthetic import generate_synthetic
    model = dict(n_max=6, d_model=8, subgraph_hidden=8, h_dim=16, predictor_hidden=16, kin_hidden=8,
                 target_hidden=8, traj_hidden=16, score_hidden=8, n_anchors=12, m_targets=3)
    grid = AblationGrid(cells=[{"name": "ok", "dt": 0.5}, {"name": "too_long", "dt": 0.5, "H": 13}],
                        base={"epochs": 1, "batch_size": 2, "warmup_epochs": 0, "T": 0.5, "model": model})
    rows = run_ablation(grid, tmp_path, generate_synthetic(0, 2))
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed: ValueError")
    assert "failed" in (tmp_path / "ablation.csv").read_text().splitlines()[2]
