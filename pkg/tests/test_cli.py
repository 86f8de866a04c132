import json

import numpy as np
import pytest

from cmlf.cli import EXIT_CONTRACT, EXIT_USAGE, apply_overrides, main, UsageError

DATA_SET = ["--set", "n_objects=4", "--set", "configs=[[0,1],[3,2]]", "--set", "repeats=8", "--set", "H=30",
            "--set", "observation.visual_res=8", "--set", "observation.tactile_dim=16"]
TINY_TRAIN = ["--set", "n_z=4", "--set", "n_y=16", "--set", "hidden=8", "--set", "lstm_hidden=8"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate-data", "--out", str(out), *DATA_SET]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(data_dir):
    out = data_dir.parent / "train_wo"
    code = main(["train", "--data", str(data_dir), "--variant", "wo_cm", "--epochs", "2", "--out", str(out),
                 "--figures", *TINY_TRAIN])
    assert code == 0
    return out / "final.pt"


def test_pipeline_smoke(data_dir, ckpt, tmp_path):
    manifest = json.loads((data_dir / "run.json").read_text())
    assert manifest["config"]["H"] == 30
    assert (ckpt.parent / "metrics.csv").exists() and (ckpt.parent / "figures" / "loss.png").exists()
    train_manifest = json.loads((ckpt.parent / "run.json").read_text())
    assert train_manifest["verb"] == "train" and train_manifest["config"]["variant"] == "wo_cm"
    out = tmp_path / "eval"
    code = main(["evaluate", "--checkpoint", str(ckpt), "--data", str(data_dir), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report_wo_cm.json").read_text())
    assert len(report["nmse_curve"]) == 30 and len(report["perturbation"]) == 9
    assert (out / "comparison.json").exists() and (out / "tests.csv").exists()
    figs = {p.name for p in (out / "figures").glob("*.png")}
    assert {"nmse_time_avg.png", "nmse_curves_intrinsic.png", "perturbation_grid.png"} <= figs
    assert not (out / ".lock").exists()


def test_infer_writes_rollout(data_dir, ckpt, tmp_path):
    out = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(ckpt), "--data", str(data_dir), "--split", "surprise",
                 "--c", "0.35", "--mode", "missing_flag", "--out", str(out)]) == 0
    arr = np.load(out / "rollout.npz")
    assert arr["y_T"].shape[1:] == (30, 16) and np.isfinite(arr["y_T"]).all()


def test_existing_run_dir_needs_overwrite(data_dir, ckpt):
    args = ["train", "--data", str(data_dir), "--variant", "wo_cm", "--epochs", "1", "--out", str(ckpt.parent),
            *TINY_TRAIN]
    assert main(args) == EXIT_USAGE
    assert main(args + ["--overwrite"]) == 0


def test_missing_inputs_are_usage_errors(tmp_path, data_dir, capsys):
    assert main(["train", "--data", str(tmp_path / "nope")]) == EXIT_USAGE
    assert main(["evaluate", "--checkpoint", str(tmp_path / "x.pt"), "--data", str(data_dir)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage error" in err and err.strip().count("\n") == 1
    assert main(["train", "--bogus-flag"]) == EXIT_USAGE


def test_unknown_override_key(tmp_path):
    assert main(["generate-data", "--out", str(tmp_path / "d"), "--set", "nonsense=1"]) == EXIT_USAGE
    with pytest.raises(UsageError):
        apply_overrides({"a": {"b": 1}}, ["a.c=2"])
    assert apply_overrides({"a": {"b": 1}}, ["a.b=[1,2]"]) == {"a": {"b": [1, 2]}}


def test_dimension_mismatch_is_contract_error(ckpt, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["generate-data", "--out", str(other), *DATA_SET, "--set", "observation.visual_res=6"]) == 0
    code = main(["evaluate", "--checkpoint", str(ckpt), "--data", str(other), "--out", str(tmp_path / "e")])
    assert code == EXIT_CONTRACT
    assert "dimension mismatch" in capsys.readouterr().err


def test_locked_run_dir_rejected(data_dir, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    code = main(["train", "--data", str(data_dir), "--epochs", "1", "--out", str(out), *TINY_TRAIN])
    assert code == EXIT_CONTRACT


def test_run_root_env(data_dir, monkeypatch, tmp_path):
    monkeypatch.setenv("CMLF_RUN_ROOT", str(tmp_path / "root"))
    assert main(["train", "--data", str(data_dir), "--variant", "joint", "--epochs", "1", *TINY_TRAIN]) == 0
    assert (tmp_path / "root" / "train-joint-0" / "final.pt").exists()


def test_experiment_deterministic_and_replayable(tmp_path):
    sets = ["--set", "dataset.n_objects=4", "--set", "dataset.configs=[[0,1],[3,2]]", "--set", "dataset.repeats=8",
            "--set", "dataset.H=30", "--set", "dataset.observation.visual_res=8",
            "--set", "dataset.observation.tactile_dim=16", "--set", "train.epochs=2",
            "--set", "evaluation.sigmas=[0.0]", "--set", "evaluation.cs=[0.0,0.35]"]
    base = ["experiment", "--seeds", "0", "--variants", "wo_cm,w_cm"]
    assert main(base + ["--out", str(tmp_path / "a"), *sets]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), *sets]) == 0
    a = (tmp_path / "a" / "comparison.json").read_text()
    assert a == (tmp_path / "b" / "comparison.json").read_text()
    assert (tmp_path / "a" / "figures" / "surprise_curves.png").exists()
    # a run's manifest is itself a valid config
    assert main(["experiment", "--config", str(tmp_path / "a" / "run.json"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "comparison.json").read_text() == a
    for f in ("final.pt", "metrics.csv", "report.json"):
        assert (tmp_path / "a" / "seed_0" / "w_cm" / f).exists()
