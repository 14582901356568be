import json
import os
import subprocess
import sys

import pytest

from thermofuse.cli import EXIT_FAILURE, EXIT_USAGE, main

SPEC = {"n_y": 16, "n_x": 16, "n_t": 40, "n_defects": [1, 2], "radius_px": [2.0, 4.0]}
RUN = {"model": {"levels": 2, "filters": [4, 8]}, "batch_size": 2, "epochs": 1, "lr": 1e-3,
       "spatial_augment": False}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def config_line(out):
    lines = [line for line in out.splitlines() if line.startswith("config: ")]
    assert len(lines) == 1
    return json.loads(lines[0][len("config: "):])


def result_line(out):
    (line,) = [line for line in out.splitlines() if line.startswith("result: ")]
    return json.loads(line[len("result: "):])


def error_line(err):
    lines = err.strip().splitlines()
    payload = json.loads(lines[-1])
    assert set(payload) == {"error", "message"} and "\n" not in payload["message"]
    return payload


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """simulate -> augment tree shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "aug.json").write_text(json.dumps({"n_segments": 20, "factor": 2}))
    (root / "run.json").write_text(json.dumps(RUN))
    assert main(["simulate", "--spec", str(root / "spec.json"), "--out", str(root / "raw"), "--count", "6",
                 "--split", "2,2,2", "--seed", "5"]) == 0
    assert main(["augment", "--in", str(root / "raw"), "--out", str(root / "aug"),
                 "--config", str(root / "aug.json"), "--seed", "1"]) == 0
    return root


def test_simulate_writes_index_and_echoes_seed(tmp_path, capsys):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    code, out, _ = run(capsys, "simulate", "--spec", tmp_path / "spec.json", "--out", tmp_path / "raw",
                       "--count", 3, "--seed", 11)
    assert code == 0
    cfg = config_line(out)
    assert cfg["command"] == "simulate" and cfg["seed"] == 11 and cfg["generator"]["n_t"] == 40
    index = json.loads((tmp_path / "raw" / "index.json").read_text())
    assert len(index["entries"]) == 3
    assert len(list((tmp_path / "raw" / "sequences").glob("*.ptseq"))) == 3
    assert result_line(out)["sequences"] == 3


def test_simulate_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "simulate", "--out", tmp_path / name, "--count", 2, "--seed", 3)[0] == 0
    for f in sorted((tmp_path / "a" / "sequences").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "sequences" / f.name).read_bytes()


def test_preprocess(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "preprocess", "--in", workspace / "raw", "--out", tmp_path / "pre",
                       "--pca-j", 4, "--tsr-degree", 3, "--seed", 2)
    assert code == 0 and config_line(out)["seed"] == 2
    manifest = json.loads((tmp_path / "pre" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 6
    assert {s["split"] for s in manifest["samples"]} == {"train", "val", "test"}


def test_augment_tree(workspace):
    manifest = json.loads((workspace / "aug" / "manifest.json").read_text())
    # two replicas for each of the four train/val sequences, test passed through
    assert len(manifest["samples"]) == 2 * 4 + 2


def test_train_eval_sweep_report(workspace, tmp_path, capsys):
    code, out, err = run(capsys, "train", "--config", workspace / "run.json", "--data-dir", workspace / "aug",
                         "--out-dir", tmp_path / "runs" / "fused", "--seed", 9)
    assert code == 0, err
    cfg = config_line(out)
    assert cfg["seed"] == 9 and cfg["model"]["filters"] == [4, 8]
    assert "epoch 1/1" in err
    metrics = json.loads((tmp_path / "runs" / "fused" / "metrics.json").read_text())
    assert metrics["seed"] == 9 and metrics["split"] == "test"

    ckpt = tmp_path / "runs" / "fused" / "checkpoint.ptckpt"
    code, out, err = run(capsys, "eval", "--checkpoint", ckpt, "--split", "test", "--out", tmp_path / "eval",
                         "--seed", 1)
    assert code == 0, err
    assert (tmp_path / "eval" / "metrics.json").read_text() == json.dumps(metrics, indent=2, sort_keys=True) + "\n"

    code, _, err = run(capsys, "eval", "--checkpoint", ckpt, "--out", tmp_path / "e2", "--head", "multiclass")
    assert code == EXIT_FAILURE and error_line(err)["error"] == "ConfigError"

    code, out, err = run(capsys, "sweep-lambda", "--config", workspace / "run.json", "--data-dir",
                         workspace / "aug", "--out-dir", tmp_path / "runs" / "sweep", "--grid", "0.25,1", "--seed", 9)
    assert code == 0, err
    assert config_line(out)["lambda_grid"] == [0.25, 1.0]
    assert len((tmp_path / "runs" / "sweep" / "lambda_sweep.csv").read_text().splitlines()) == 3

    code, out, err = run(capsys, "report", "--in", tmp_path / "runs", "--out", tmp_path / "report", "--seed", 0)
    assert code == 0, err
    assert sorted(result_line(out)["runs"]) == ["fused", "sweep/lambda_0.25", "sweep/lambda_1"]
    for name in ("metrics.json", "curves.csv", "ablation.csv", "curves.png", "ablation.png"):
        assert (tmp_path / "report" / name).exists()


@pytest.mark.parametrize("argv,kind,code", [
    (["train"], "UsageError", EXIT_USAGE),
    (["frobnicate"], "UsageError", EXIT_USAGE),
    (["simulate", "--out", "x", "--count", "two"], "UsageError", EXIT_USAGE),
    (["train", "--config", "/nonexistent/run.json"], "FileNotFoundError", EXIT_FAILURE),
    (["report", "--in", "/nonexistent", "--out", "/tmp/x"], "FileNotFoundError", EXIT_FAILURE),
])
def test_errors_are_one_json_line(argv, kind, code, capsys):
    got, out, err = run(capsys, *argv)
    assert got == code
    assert error_line(err)["error"] == kind
    assert len(err.strip().splitlines()) == 1


def test_bad_config_keys(tmp_path, workspace, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({**RUN, "epoch": 3}))
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.json", "--data-dir", workspace / "aug")
    assert code == EXIT_FAILURE and "epoch" in error_line(err)["message"]
    (tmp_path / "spec.json").write_text(json.dumps({"nx": 3}))
    code, _, err = run(capsys, "simulate", "--spec", tmp_path / "spec.json", "--out", tmp_path / "o", "--count", 1)
    assert code == EXIT_FAILURE and error_line(err)["error"] == "ValueError"


def test_console_script_with_thread_cap(tmp_path):
    env = {**os.environ, "THERMOFUSE_THREADS": "2"}
    proc = subprocess.run([sys.executable, "-m", "thermofuse.cli", "simulate", "--out", str(tmp_path / "raw"),
                           "--count", "1", "--seed", "4"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout.splitlines()[0][len("config: "):])["seed"] == 4
    proc = subprocess.run([sys.executable, "-m", "thermofuse.cli", "eval"], capture_output=True, text=True, env=env)
    assert proc.returncode == EXIT_USAGE and json.loads(proc.stderr)["error"] == "UsageError"
