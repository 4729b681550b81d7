import json
import subprocess
import sys
from pathlib import Path

import pytest

from repdfd import checkpoint as ckpt_io
from repdfd.cli import read_config, run
from repdfd.errors import ConfigurationError

TOY_CFG = str(Path(__file__).resolve().parents[1] / "configs" / "toy.cfg")
SMALL = ["--set", "train_videos=4", "--set", "train_frames=4", "--set", "test_videos=4", "--set", "test_frames=3"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run(["prepare", "--config", TOY_CFG, "--out", str(out), *SMALL]) == 0
    return out / "manifest.jsonl"


def _train(manifest, out, seed=7):
    return run(["train", "--config", TOY_CFG, "--manifest", str(manifest), "--out", str(out),
                "--epochs", "2", "--seed", str(seed)])


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "train" in capsys.readouterr().out
    assert run(["train", "--help"]) == 0


def test_help_via_console_entry():
    r = subprocess.run([sys.executable, "-m", "repdfd.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep-p" in r.stdout


def test_unknown_command_and_key(capsys, tmp_path):
    assert run(["frobnicate"]) == 2
    assert run(["train", "--set", "nope=1"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"] == "configuration"
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("p = 6\nbogus = 1\n")
    with pytest.raises(ConfigurationError, match="bad.cfg:2"):
        read_config(cfg)


def test_missing_manifest_flag(capsys):
    assert run(["train", "--out", "/tmp/never"]) == 2


def test_unknown_backend(capsys, monkeypatch):
    monkeypatch.setenv("REPDFD_BACKEND", "nosuch")
    assert run(["train", "--manifest", "x"]) == 2


def test_train_deterministic_and_run_record(prepared, tmp_path, capsys):
    assert _train(prepared, tmp_path / "a") == 0
    assert _train(prepared, tmp_path / "b") == 0
    a = (tmp_path / "a/prompt.rpdf").read_bytes()
    assert a == (tmp_path / "b/prompt.rpdf").read_bytes()
    rec = json.loads((tmp_path / "a/run.json").read_text())
    assert rec["command"] == "train" and rec["seed"] == 7 and rec["backend"] == "toy"
    assert rec["checkpoints"]["prompt.rpdf"] == ckpt_io.file_digest(tmp_path / "a/prompt.rpdf")
    assert rec["backend_digest"] and rec["projection_digest"]
    assert ckpt_io.load(tmp_path / "a/prompt.rpdf").prompt.border_width == 6


def test_eval_and_mismatch(prepared, tmp_path, capsys):
    assert _train(prepared, tmp_path / "t") == 0
    ck = str(tmp_path / "t/prompt.rpdf")
    assert run(["eval", "--manifest", str(prepared), "--checkpoint", ck, "--out", str(tmp_path / "e"),
                "--set", "toy_seed=7", "--set", "split=test"]) == 0
    rows = json.loads((tmp_path / "e/eval.json").read_text())
    assert rows[0]["n_frames"] == 12 and rows[0]["template_config"] == "T0T3"
    capsys.readouterr()
    assert run(["eval", "--config", TOY_CFG, "--manifest", str(prepared), "--checkpoint", ck,
                "--out", str(tmp_path / "e2"), "--p", "5"]) == 2
    assert "p=5" in json.loads(capsys.readouterr().err.strip())["message"]
    assert run(["eval", "--manifest", str(prepared), "--checkpoint", ck, "--templates", "T0T1",
                "--out", str(tmp_path / "e3")]) == 2


def test_corrupt_checkpoint_exit_code(prepared, tmp_path, capsys):
    bad = tmp_path / "bad.rpdf"
    bad.write_bytes(b"garbage")
    assert run(["eval", "--manifest", str(prepared), "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "corrupt-checkpoint"


def test_analysis_commands(prepared, tmp_path):
    common = ["--config", TOY_CFG, "--manifest", str(prepared)]
    assert run(["analyze-sim", *common, "--out", str(tmp_path / "s")]) == 0
    sim = json.loads((tmp_path / "s/similarity.json").read_text())
    assert set(sim["toy"]) == {"T0", "T1", "T2", "T3"}
    assert run(["dump-features", *common, "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f/features.bin").exists() and (tmp_path / "f/run.json").exists()
    assert run(["sweep-p", *common, "--out", str(tmp_path / "sp"), "--epochs", "1",
                "--set", "p_values=4,6"]) == 0
    rows = json.loads((tmp_path / "sp/sweep_p.json").read_text())
    assert [r["p"] for r in rows] == [4, 6] and rows[1]["n_params"] == 1872
    assert run(["sweep-templates", *common, "--out", str(tmp_path / "st"), "--epochs", "1",
                "--set", "template_ids=T0T1,RAND"]) == 0


def test_prepare_crops(tmp_path):
    import numpy as np
    from repdfd.data import SampleRecord, load_manifest, write_manifest, write_rgb
    write_rgb(np.full((50, 40, 3), 200, dtype=np.uint8), tmp_path / "raw/a.png")
    write_manifest([SampleRecord("a.png", 1, "v", "test", "x", (5, 5, 30, 40))], tmp_path / "raw/m.jsonl")
    assert run(["prepare", "--manifest", str(tmp_path / "raw/m.jsonl"), "--out", str(tmp_path / "crops")]) == 0
    recs = load_manifest(tmp_path / "crops/manifest.jsonl")
    assert recs[0].bbox is None and recs[0].label == 1
    write_manifest(recs, tmp_path / "crops/manifest.jsonl")
    assert run(["prepare", "--manifest", str(tmp_path / "crops/manifest.jsonl"), "--out", str(tmp_path / "crops")]) == 2
