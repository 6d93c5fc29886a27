import hashlib
import json
import subprocess
import sys

import pytest

from atd3.cli import RunConfig, run

TINY_TRAIN = {"epochs": 1, "cycles": 2, "samples_per_cycle": 100, "updates_per_cycle": 2, "batch_size": 50,
              "hidden": 8, "lanes": 5}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def csv_digests(run_dir):
    return {p.relative_to(run_dir).as_posix(): digest(p) for p in sorted(run_dir.rglob("*.csv"))}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--episodes", "6", "--seed", "3", "--train-count", "4", "--out", str(root / "syn")]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"train": TINY_TRAIN}))
    args = ["--config", str(cfg), "--data", str(root / "syn" / "train"), "--test-data", str(root / "syn" / "test")]
    assert run(["train", *args, "--seed", "7", "--out", str(root / "train_a")]) == 0
    return root, args


def test_synth_mix_counts(tmp_path):
    out = tmp_path / "s"
    assert run(["synth", "--episodes", "20", "--mix", "smooth=0.5,stopgo=0.3,brake=0.2", "--out", str(out)]) == 0
    files = sorted((out / "episodes").glob("*.csv"))
    assert len(files) == 20
    kinds = [f.stem.rsplit("_", 1)[1] for f in files]
    assert (kinds.count("smooth"), kinds.count("stopgo"), kinds.count("brake")) == (10, 6, 4)
    index = json.loads((out / "episodes" / "index.json").read_text())
    assert index["counts"] == {"smooth": 10, "stopgo": 6, "brake": 4}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 0 and "git_describe" in manifest


def test_train_twice_identical(workspace):
    root, args = workspace
    assert run(["train", *args, "--seed", "7", "--out", str(root / "train_b")]) == 0
    a, b = root / "train_a" / "training_log.csv", root / "train_b" / "training_log.csv"
    assert digest(a) == digest(b)
    assert digest(root / "train_a" / "final.bin") == digest(root / "train_b" / "final.bin")
    assert (root / "train_a" / "checkpoints" / "epoch001.bin").exists()


def test_compare_two_rows(workspace):
    root, _ = workspace
    idm = root / "idm.json"
    idm.write_text(json.dumps({"v0": 30.0, "t_headway": 1.5, "a_max": 1.5, "b": 2.0, "s0": 2.0, "delta": 4.0}))
    out = root / "cmp"
    code = run(["compare", "--data", str(root / "syn" / "test"), "--checkpoint",
                str(root / "train_a" / "final.bin"), "--out", str(out), "--config", str(_write(root / "c.json",
                {"idm": str(idm)}))])
    assert code == 0
    lines = (out / "table1.csv").read_text().splitlines()
    assert lines[0] == "policy,rmspe_pct"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["IDM", "ATD3"]
    assert (out / "per_episode.csv").exists()


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_eval_and_attention_outputs(workspace):
    root, _ = workspace
    ck = str(root / "train_a" / "final.bin")
    test = str(root / "syn" / "test")
    assert run(["eval", "--data", test, "--checkpoint", ck, "--out", str(root / "ev")]) == 0
    assert len(list((root / "ev").glob("rollout_*.csv"))) == 2
    assert (root / "ev" / "table1.csv").exists()
    assert run(["attention", "--data", test, "--checkpoint", ck, "--out", str(root / "att")]) == 0
    assert len(list((root / "att").glob("attention_*.csv"))) == 2
    events = json.loads((root / "att" / "events.json").read_text())
    assert len(events["episodes"]) == 2


def test_calibrate_outputs(tmp_path, workspace):
    root, _ = workspace
    cfg = _write(tmp_path / "ga.json", {"ga": {"population": 6, "generations": 3}})
    out = tmp_path / "ga"
    assert run(["calibrate-idm", "--config", str(cfg), "--data", str(root / "syn" / "test"), "--out", str(out)]) == 0
    params = json.loads((out / "idm.json").read_text())
    assert {"v0", "t_headway", "a_max", "b", "s0", "delta", "rmspe"} == set(params)
    assert (out / "fitness_history.csv").read_text().splitlines()[0] == "generation,best,mean"


@pytest.mark.parametrize("command", ["synth", "train", "calibrate-idm", "eval", "attention", "compare"])
def test_rerun_from_manifest_is_bit_identical(workspace, tmp_path, command):
    root, args = workspace
    ck = str(root / "train_a" / "final.bin")
    test = str(root / "syn" / "test")
    first = tmp_path / "first"
    argv = {
        "synth": ["synth", "--episodes", "4", "--seed", "2"],
        "train": ["train", *args, "--seed", "1"],
        "calibrate-idm": ["calibrate-idm", "--config", str(_write(tmp_path / "g.json", {"ga": {"population": 4,
                          "generations": 2}})), "--data", test],
        "eval": ["eval", "--data", test, "--checkpoint", ck],
        "attention": ["attention", "--data", test, "--checkpoint", ck],
        "compare": ["compare", "--data", test, "--checkpoint", ck],
    }[command]
    assert run([*argv, "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert run([command, "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    a, b = csv_digests(first), csv_digests(second)
    assert a and a == b


def test_unknown_config_key_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.json", {"learning_rate": 0.1})
    assert run(["train", "--config", str(cfg)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_train_override_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.json", {"train": {"batchsize": 10}})
    assert run(["train", "--config", str(cfg)]) == 2
    assert "batchsize" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path, capsys):
    assert run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3
    assert "nope" in capsys.readouterr().err


def test_inputs_not_mutated(workspace):
    root, _ = workspace
    before = csv_digests(root / "syn")
    assert run(["eval", "--data", str(root / "syn" / "test"), "--checkpoint",
                str(root / "train_a" / "final.bin"), "--out", str(root / "ev2")]) == 0
    assert csv_digests(root / "syn") == before


def test_default_run_directory_name():
    cfg = RunConfig.from_dict({"command": "synth", "seed": 4})
    assert len(cfg.digest()) == 10
    assert cfg.digest() == RunConfig.from_dict({"command": "synth", "seed": 4, "out": "x"}).digest()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "atd3", "synth", "--episodes", "3", "--out", str(tmp_path / "m")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "3 synthetic episodes" in res.stdout
