import json
import shutil
import subprocess

import pytest

from advimmu import cli, runs
from advimmu import metrics as M

SMALL = [
    "scene.height=16", "scene.width=16", "scene.frames=5",
    "dataset.sequences=3", "dataset.weather=clear",
    "network.channels=[4,4,4]", "batch_size=4", "val_fraction=0.34",
    "unfold.K=1", "contrast.anchors=4", "contrast.s_pos=4", "contrast.s_neg=4",
]


@pytest.fixture
def workspace(tmp_path):
    cfg = {"paths": {"dataset": str(tmp_path / "data"), "run_dir": str(tmp_path / "run")}, "epochs": 1}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, path


def call(path, command, *extra):
    args = [command, "--config", str(path)]
    for s in SMALL:
        args += ["--set", s]
    return cli.main(args + list(extra))


def test_full_pipeline(workspace, capsys):
    tmp, cfg = workspace
    assert call(cfg, "gen-data") == 0
    assert "wrote 3 sequences" in capsys.readouterr().out
    assert call(cfg, "cluster") == 0
    assert (tmp / "data" / "cluster_report.json").is_file()
    assert call(cfg, "train") == 0
    run = tmp / "run"
    assert {p.name for p in run.iterdir()} >= {"config.json", "metrics.csv", "checkpoint"}
    assert json.loads((run / "config.json").read_text())["unfold"]["K"] == 1
    assert call(cfg, "eval", "--per-frame-out", str(tmp / "frames.csv")) == 0
    rows = M.read_metrics_csv(run / "eval.csv")
    assert [r["split"] for r in rows] == ["seq_000", "seq_001", "seq_002", "all"]
    assert len(M.read_metrics_csv(tmp / "frames.csv")) == 15
    assert call(cfg, "infer", "--out", str(tmp / "pred")) == 0
    assert len(list((tmp / "pred").glob("*/pred_*.pgm"))) == 15


def test_config_errors_exit_2(workspace, capsys):
    tmp, cfg = workspace
    assert call(cfg, "train", "--set", "mode=XE") == 2
    assert "config error" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp / "nope.json")]) == 2
    assert call(cfg, "gen-data", "--set", "unfold.L=1") == 2


def test_data_errors_exit_3(workspace, capsys):
    tmp, cfg = workspace
    assert call(cfg, "train") == 3
    assert "no sequences" in capsys.readouterr().err
    assert call(cfg, "gen-data") == 0
    assert call(cfg, "cluster", "--require-masks") == 3
    assert call(cfg, "eval", "--checkpoint", str(tmp / "missing")) == 3
    # checkpoint saved for a different class count
    assert call(cfg, "train") == 0
    shutil.rmtree(tmp / "data")
    assert call(cfg, "gen-data", "--set", "scene.classes=4") == 0
    assert call(cfg, "eval") == 3


def test_numeric_failure_exit_4(workspace, monkeypatch, capsys):
    _, cfg = workspace

    def explode(*a, **k):
        raise runs.NumericError("non-finite loss at epoch 1, batch 0")

    monkeypatch.setattr(runs, "train", explode)
    assert call(cfg, "train") == 4
    assert "batch 0" in capsys.readouterr().err


def test_console_script(tmp_path):
    exe = shutil.which("advimmu")
    if exe is None:
        pytest.skip("console script not installed")
    out = subprocess.run([exe, "gen-data", "--out", str(tmp_path), *sum((["--set", s] for s in SMALL), [])],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert len(list(tmp_path.glob("*/manifest.json"))) == 3
