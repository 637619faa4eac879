import json
import subprocess
import sys
import time
from pathlib import Path

import pytest
import yaml

from trinet import data as synth
from trinet.cli import main

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


@pytest.fixture
def smoke_config(tmp_path):
    raw = yaml.safe_load(SMOKE.read_text())
    raw["output_dir"] = str(tmp_path / "run")
    path = tmp_path / "smoke.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_missing_field_exits_2_naming_it(tmp_path, capsys):
    raw = yaml.safe_load(SMOKE.read_text())
    del raw["loss"]["mode"]
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["run", "--config", str(path)]) == 2
    assert "loss.mode" in capsys.readouterr().err


def test_invalid_value_exits_2(tmp_path, capsys):
    raw = yaml.safe_load(SMOKE.read_text())
    raw["mask"]["prob"] = 0.5
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["run", "--config", str(path)]) == 2
    assert "mask" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path, capsys):
    raw = yaml.safe_load(SMOKE.read_text())
    raw["train"]["epochs"] = 3
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["run", "--config", str(path)]) == 2
    assert "train.epochs" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(tmp_path, capsys):
    assert main(["diag", "--checkpoint", str(tmp_path / "none.npz")]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_smoke_run_then_probe_and_diag(smoke_config, tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["run", "--config", str(smoke_config)]) == 0
    assert time.perf_counter() - t0 < 60
    out = tmp_path / "run"
    for name in ("config.yaml", "losses.csv", "collapse.csv", "timing.csv", "checkpoints.csv", "summary.json",
                 "checkpoints/step_000000.npz", "checkpoints/step_000025.npz", "checkpoints/final.npz"):
        assert (out / name).exists(), name
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 50

    assert main(["probe", "--config", str(smoke_config), "--checkpoint", str(out / "checkpoints/final.npz")]) == 0
    probe = json.loads(capsys.readouterr().out)
    assert probe["probe_accuracy"] == summary["probe_accuracy"]

    export = tmp_path / "emb.csv"
    assert main(["diag", "--checkpoint", str(out / "checkpoints/final.npz"), "--export", str(export)]) == 0
    diag = json.loads(capsys.readouterr().out)
    assert diag["step"] == 50 and diag["effective_rank"] >= 1
    assert export.read_text().startswith("pc1,pc2,label\n")


def test_seed_override_changes_data(smoke_config, tmp_path, capsys):
    a, b = tmp_path / "a.trin", tmp_path / "b.trin"
    assert main(["generate-data", "--config", str(smoke_config), "--out", str(a)]) == 0
    assert main(["generate-data", "--config", str(smoke_config), "--out", str(b), "--seed", "7"]) == 0
    report = json.loads(capsys.readouterr().out.split("}\n", 1)[1])
    assert report["sequences"] == 60 and report["pretrain"] == 36
    da, db = synth.load(a), synth.load(b)
    assert da.features.shape == db.features.shape
    assert (da.features != db.features).any()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "trinet", "run", "--config", str(tmp_path / "absent.yaml")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "cannot read config" in proc.stderr
