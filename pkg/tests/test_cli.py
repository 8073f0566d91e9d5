import csv
import json

import pytest

from morel.cli import main
from morel.config import dump
from morel.rendering import read_manifest

from conftest import SMALL_SCENE, TINY


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.cfg").write_text(dump(SMALL_SCENE, "scene."))
    (root / "run.cfg").write_text(dump(TINY))
    assert main(["gen", "--spec", str(root / "scene.cfg"), "--out", str(root / "data")]) == 0
    return root


def test_gen_writes_layout(workspace):
    assert (workspace / "data" / "views" / "1" / "frame_00011.ppm").is_file()
    assert (workspace / "data" / "oracle.morl").is_file()


def test_inspect_after_gca_only(workspace, capsys):
    store = workspace / "gca_only"
    assert main(["train", "--data", str(workspace / "data"), "--out", str(store),
                 "--config", str(workspace / "run.cfg"), "--stages", "gca"]) == 0
    capsys.readouterr()
    assert main(["inspect", "--store", str(store)]) == 0
    out = capsys.readouterr().out
    assert "gca.morl" in out and "key-frame bundles: 0" in out and "kfa_" not in out


def test_train_render_eval(workspace, capsys):
    store, frames = workspace / "store", workspace / "frames"
    assert main(["--threads", "1", "train", "--data", str(workspace / "data"), "--out", str(store),
                 "--config", str(workspace / "run.cfg")]) == 0
    assert main(["render", "--store", str(store), "--t", "0..11", "--out", str(frames),
                 "--data", str(workspace / "data")]) == 0
    recs = read_manifest(frames / "manifest.txt")
    assert len(recs) == 12
    assert all(sum(1 for k in r.resident if k != "global") <= 2 for r in recs)
    assert all(r.psnr is not None for r in recs)
    metrics = workspace / "metrics.csv"
    assert main(["eval", "--render", str(frames), "--gt", str(workspace / "data"), "--out", str(metrics)]) == 0
    rows = list(csv.DictReader(metrics.open()))
    assert [int(r["frame"]) for r in rows] == list(range(12))
    summary = json.loads((workspace / "metrics_summary.txt").read_text())
    assert summary["frames"] == 12 and summary["tof"] >= 0
    assert (workspace / "metrics_profile.ppm").is_file()
    # the same settings may resume; different ones are refused
    assert main(["train", "--data", str(workspace / "data"), "--out", str(store),
                 "--config", str(workspace / "run.cfg")]) == 0
    assert main(["train", "--data", str(workspace / "data"), "--out", str(store),
                 "--config", str(workspace / "run.cfg"), "--seed", "5"]) == 2
    capsys.readouterr()
    assert main(["inspect", "--store", str(store)]) == 0
    assert "key-frame bundles: 3" in capsys.readouterr().out


def test_render_range_outside_sequence(workspace):
    store = workspace / "store"
    if not (store / "run.cfg").is_file():
        pytest.skip("needs the trained store")
    assert main(["render", "--store", str(store), "--t", "5..12", "--out", str(workspace / "x")]) == 3
    assert main(["render", "--store", str(store), "--t=-1..3", "--out", str(workspace / "x")]) == 3


def test_malformed_config_exit_code(workspace, capsys):
    bad = workspace / "bad.cfg"
    bad.write_text("fhd.q1 = 0.5\nfhd.bogus = 1\n")
    code = main(["train", "--data", str(workspace / "data"), "--out", str(workspace / "s2"), "--config", str(bad)])
    assert code == 2
    assert "fhd.bogus" in capsys.readouterr().err
    bad.write_text("this is not a config\n")
    assert main(["gen", "--spec", str(bad), "--out", str(workspace / "d2")]) == 2


def test_missing_inputs_exit_code(workspace, tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "s")]) == 3
    assert main(["render", "--store", str(tmp_path / "nothing"), "--t", "0..1", "--out", str(tmp_path / "r")]) == 3
    assert main(["inspect", "--store", str(tmp_path / "nothing")]) == 3
    assert main(["eval", "--render", str(tmp_path), "--gt", str(workspace / "data"),
                 "--out", str(tmp_path / "m.csv")]) == 3


def test_threads_env_validation(monkeypatch, workspace):
    monkeypatch.setenv("MOREL_THREADS", "zero")
    assert main(["inspect", "--store", str(workspace)]) == 2
