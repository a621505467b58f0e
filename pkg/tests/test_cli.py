import csv
import json

import pytest

from gridqa.cli import main

TINY = """\
master_seed: 1
data:
  n_train_envs: 3
  n_val_envs: 1
  n_test_envs: 2
  env: {width: 15, height: 15, n_rooms: 2, n_objects: 6}
nav: {epochs: 1}
qa: {epochs: 1}
joint: {epochs: 2, warm_start: 1}
calibration: {epochs: 1, n_markers: 2, min_distance: 3}
eval: {tiers: [3, 6], seeds: [0]}
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(TINY)
    cfg = str(d / "tiny.yaml")
    assert main(["gen-data", "--config", cfg, "--out", str(d / "data")]) == 0
    assert main(["train", "--config", cfg, "--mode", "nav", "--data", str(d / "data"), "--out", str(d / "nav.ckpt")]) == 0
    return d, cfg


def test_generation_and_training_are_byte_identical(work):
    d, cfg = work
    assert main(["gen-data", "--config", cfg, "--out", str(d / "data2")]) == 0
    for f in sorted((d / "data").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (d / "data2" / f.relative_to(d / "data")).read_bytes(), f
    assert main(["train", "--config", cfg, "--mode", "nav", "--data", str(d / "data"), "--out", str(d / "nav2.ckpt")]) == 0
    assert (d / "nav.ckpt").read_bytes() == (d / "nav2.ckpt").read_bytes()


def test_e2e_and_blindfold_training(work):
    d, cfg = work
    assert main(["train", "--config", cfg, "--mode", "e2e", "--data", str(d / "data"), "--out", str(d / "j.ckpt")]) == 0
    assert (d / "j.nav.ckpt").exists() and (d / "j.qa.ckpt").exists()
    assert (d / "j.curve.csv").read_text().startswith("epoch,nav_loss")
    assert main(["train", "--config", cfg, "--mode", "blindfold", "--data", str(d / "data"),
                 "--out", str(d / "bf.ckpt")]) == 0


def test_eval_tiers_flag(work, capsys):
    d, cfg = work
    assert main(["eval", "--config", cfg, "--data", str(d / "data"), "--nav", str(d / "nav.ckpt"),
                 "--tiers", "10,20,30", "--out", str(d / "ev")]) == 0
    rows = list(csv.DictReader(open(d / "ev" / "report.csv")))
    assert [r["k"] for r in rows] == ["10", "20", "30"]
    assert capsys.readouterr().out.count("T-") == 3
    assert main(["eval", "--config", cfg, "--data", str(d / "data"), "--agent", "still", "--out", str(d / "ev2")]) == 0


def test_calibration_lambda_zero_equals_finetune(work):
    d, cfg = work
    base = ["calibrate", "--config", cfg, "--data", str(d / "data"), "--ckpt", str(d / "nav.ckpt")]
    assert main(base + ["--method", "distill", "--lambda", "0", "--out", str(d / "c0")]) == 0
    assert main(base + ["--method", "finetune", "--out", str(d / "cf")]) == 0
    files = sorted(p.name for p in (d / "c0").glob("*.ckpt"))
    assert files == sorted(p.name for p in (d / "cf").glob("*.ckpt"))
    assert len(files) == 2 and all(".lam0.m2.s0." in f for f in files)
    for name in files:
        assert (d / "c0" / name).read_bytes() == (d / "cf" / name).read_bytes()
    assert main(["eval", "--config", cfg, "--data", str(d / "data"), "--calibrated", str(d / "c0"),
                 "--out", str(d / "ev3")]) == 0


def test_calibrated_checkpoints_are_named_by_setting(work):
    d, cfg = work
    assert main(["calibrate", "--config", cfg, "--data", str(d / "data"), "--ckpt", str(d / "nav.ckpt"),
                 "--lambda", "0.2", "--markers", "1", "--set", "calibration.seed=3", "--out", str(d / "c1")]) == 0
    names = sorted(p.name for p in (d / "c1").iterdir())
    assert [n for n in names if n.endswith(".ckpt")] == ["test-000.lam0.2.m1.s3.ckpt", "test-001.lam0.2.m1.s3.ckpt"]
    assert "test-000.lam0.2.m1.s3.markers.json" in names


def test_sweep_writes_one_column_per_value(work):
    d, cfg = work
    assert main(["sweep", "--config", cfg, "--data", str(d / "data"), "--lambda", "0,0.2,1",
                 "--nav", str(d / "nav.ckpt"), "--out", str(d / "sw")]) == 0
    header = (d / "sw" / "sweep_lambda.csv").read_text().splitlines()[0].split(",")
    assert header == ["k", "0.0", "0.2", "1.0"]


def test_render_writes_text_and_svg(work):
    d, cfg = work

    man = json.loads((d / "data" / "manifest.json").read_text())
    env = json.loads((d / "data" / man["splits"]["test"][0]).read_text())
    qid = env["questions"][0]["qid"]
    assert main(["render", "--data", str(d / "data"), "--qid", qid, "--nav", str(d / "nav.ckpt"), "--k", "3",
                 "--out", str(d / "r")]) == 0
    assert (d / "r.svg").read_text().startswith("<svg")
    assert qid in (d / "r.txt").read_text()


@pytest.mark.parametrize("argv, code", [
    (["frobnicate"], 1),
    (["calibrate", "--data", "x", "--ckpt", "y", "--out", "z", "--markers", "6"], 1),
    (["eval", "--data", "x", "--out", "z", "--set", "nav.bogus=1"], 1),
    (["eval", "--data", "/nonexistent", "--nav", "n", "--out", "z"], 2),
    (["sweep", "--data", "x", "--out", "z"], 1),
])
def test_exit_codes(argv, code, tmp_path):
    assert main(argv) == code


def test_wrong_checkpoint_kind_is_a_runtime_error(work):
    d, cfg = work
    assert main(["eval", "--config", cfg, "--data", str(d / "data"), "--nav", str(d / "nav.ckpt"),
                 "--qa", str(d / "nav.ckpt"), "--out", str(d / "ev4")]) == 2
