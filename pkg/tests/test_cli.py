import json

import numpy as np
import pytest

from splatfield.cli import main
from splatfield.mesh import load_mesh


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    rc = main(["make-scene", "--shape", "sphere", "--views", "8", "--size", "16",
               "--seed", "0", "--ref-resolution", "48", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def run_dir(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(scene_dir), "--out", str(out),
               "--gaussians", "60", "--log-every", "0",
               "--set", "total_iters=14", "--set", "phase_switch_iter=7",
               "--set", "checkpoint_every=7", "--set", "net_layers=3",
               "--set", "net_width=16", "--set", "queries_per_iter=16",
               "--seed", "1"])
    assert rc == 0
    return out


def test_make_scene_produces_dataset(scene_dir):
    assert (scene_dir / "manifest.json").exists()
    assert (scene_dir / "images" / "view_000.png").exists()


def test_train_produces_checkpoints_and_log(run_dir):
    assert (run_dir / "ckpt_000014").is_dir()
    log = (run_dir / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("iteration,")
    assert len(log) == 15


def test_render_writes_png(run_dir, scene_dir, tmp_path):
    out = tmp_path / "view.png"
    rc = main(["render", "--checkpoint", str(run_dir / "ckpt_000014"),
               "--data", str(scene_dir), "--view", "0", "--out", str(out)])
    assert rc == 0 and out.exists()


def test_extract_and_eval_mesh(run_dir, scene_dir, tmp_path, capsys):
    mesh_path = tmp_path / "mesh.ply"
    rc = main(["extract-mesh", "--checkpoint", str(run_dir / "ckpt_000014"),
               "--resolution", "32", "--out", str(mesh_path)])
    assert rc == 0
    mesh = load_mesh(mesh_path)
    assert not mesh.is_empty
    capsys.readouterr()

    rc = main(["eval-mesh", "--mesh", str(mesh_path),
               "--reference", str(scene_dir / "reference.ply"),
               "--samples", "2000", "--json-out", str(tmp_path / "m.json")])
    assert rc == 0
    report = json.loads((tmp_path / "m.json").read_text())
    assert "chamfer" in report and "f_score" in report


def test_eval_views_reports_psnr_ssim(run_dir, scene_dir, tmp_path, capsys):
    rc = main(["eval-views", "--checkpoint", str(run_dir / "ckpt_000014"),
               "--data", str(scene_dir), "--split", "train",
               "--json-out", str(tmp_path / "v.json")])
    assert rc == 0
    report = json.loads((tmp_path / "v.json").read_text())
    assert "psnr" in report and "ssim" in report
    capsys.readouterr()


def test_ablate_eikonal_logs_switch(scene_dir, tmp_path, capsys):
    out = tmp_path / "ablate"
    rc = main(["ablate", "eikonal", "--data", str(scene_dir), "--out", str(out),
               "--gaussians", "40", "--log-every", "0",
               "--set", "total_iters=6", "--set", "phase_switch_iter=3",
               "--set", "net_layers=3", "--set", "net_width=16",
               "--set", "queries_per_iter=8", "--set", "checkpoint_every=6"])
    assert rc == 0
    captured = capsys.readouterr()
    assert "eikonal" in captured.out
    cfg = (out / "config.txt").read_text()
    assert "weight_eikonal = 0.1" in cfg


def test_unknown_flag_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--not-a-flag"])
    assert e.value.code == 2


def test_error_line_is_machine_readable(tmp_path, capsys):
    rc = main(["eval-mesh", "--mesh", str(tmp_path / "missing.obj"),
               "--reference", str(tmp_path / "also_missing.obj")])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(err)
    assert "error" in payload and "message" in payload


def test_seed_flag_changes_run(scene_dir, tmp_path):
    outs = []
    for seed in (3, 4):
        out = tmp_path / f"s{seed}"
        rc = main(["train", "--data", str(scene_dir), "--out", str(out),
                   "--gaussians", "30", "--log-every", "0", "--seed", str(seed),
                   "--set", "total_iters=4", "--set", "phase_switch_iter=2",
                   "--set", "net_layers=3", "--set", "net_width=16",
                   "--set", "queries_per_iter=8", "--set", "checkpoint_every=4"])
        assert rc == 0
        outs.append((out / "train_log.csv").read_text())
    assert outs[0] != outs[1]
