import json
import math
import os

import numpy as np
import pytest

from deformsplat.cli import main
from deformsplat.synthetic import SyntheticSceneSpec
from deformsplat.trainer import TrainConfig


def write_spec(tmp_path, **overrides):
    base = dict(width=20, height=16, n_frames=3, seed=5, fx=50.0, fy=50.0,
                occluder_width=5, occluder_height=4, holdout_every=0)
    base.update(overrides)
    path = str(tmp_path / "spec.json")
    with open(path, "w") as fh:
        json.dump(SyntheticSceneSpec(**base).to_dict(), fh)
    return path


def write_config(tmp_path, **overrides):
    base = dict(
        iterations=8, warmup_iterations=2, seed=1, net_depth=2, net_width=8,
        enc_l_x=2, enc_l_t=2, densify_from=10_000, seed_voxel_scale=2.0,
    )
    base.update(overrides)
    path = str(tmp_path / "config.json")
    with open(path, "w") as fh:
        json.dump(TrainConfig(**base).to_dict(), fh)
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    spec = write_spec(tmp_path)
    out = str(tmp_path / "scene")
    assert main(["synth", "--out", out, "--spec", spec]) == 0
    return out


def test_synth_writes_dataset(dataset_dir):
    assert os.path.exists(os.path.join(dataset_dir, "manifest.json"))
    assert os.path.exists(os.path.join(dataset_dir, "frames", "color_0000.png"))
    assert os.path.exists(os.path.join(dataset_dir, "displacement.bin"))


def test_full_pipeline(tmp_path, dataset_dir, capsys):
    cfg = write_config(tmp_path)
    run_dir = str(tmp_path / "run")
    assert main(["train", "--dataset", dataset_dir, "--out", run_dir,
                 "--config", cfg]) == 0
    ckpt = os.path.join(run_dir, "checkpoint_final.ckpt")
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(run_dir, "run_manifest.json"))
    log_lines = open(os.path.join(run_dir, "loss_log.jsonl")).read().splitlines()
    assert len(log_lines) == 8
    assert all("total" in json.loads(line) for line in log_lines)

    render_dir = str(tmp_path / "renders")
    assert main(["render", "--checkpoint", ckpt, "--out", render_dir,
                 "--time", "0.0,0.5,1.0"]) == 0
    assert os.path.exists(os.path.join(render_dir, "render_0002_color.png"))
    assert os.path.exists(os.path.join(render_dir, "render_0002_depth.png"))

    report = str(tmp_path / "report.jsonl")
    assert main(["eval", "--checkpoint", ckpt, "--dataset", dataset_dir,
                 "--out", report]) == 0
    lines = [json.loads(line) for line in open(report).read().splitlines()]
    assert len(lines) == 4  # 3 frames + aggregate
    assert lines[-1]["aggregate"] is True
    assert all("psnr" in rec and "ssim" in rec for rec in lines[:-1])

    # identical checkpoint -> identical report
    report2 = str(tmp_path / "report2.jsonl")
    assert main(["eval", "--checkpoint", ckpt, "--dataset", dataset_dir,
                 "--out", report2]) == 0
    assert open(report).read() == open(report2).read()


def test_eval_frame_subset(tmp_path, dataset_dir):
    cfg = write_config(tmp_path, iterations=3)
    run_dir = str(tmp_path / "run")
    main(["train", "--dataset", dataset_dir, "--out", run_dir, "--config", cfg])
    report = str(tmp_path / "subset.jsonl")
    main(["eval", "--checkpoint", os.path.join(run_dir, "checkpoint_final.ckpt"),
          "--dataset", dataset_dir, "--frames", "0,2", "--out", report])
    lines = [json.loads(line) for line in open(report).read().splitlines()]
    assert [rec["frame"] for rec in lines[:-1]] == [0, 2]


def test_init_dump(tmp_path, dataset_dir):
    out = str(tmp_path / "init")
    assert main(["init-dump", "--dataset", dataset_dir, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "points.ply"))
    assert os.path.exists(os.path.join(out, "intersection_mask.png"))


def test_infinite_psnr_sentinel_roundtrips():
    # identical render/GT reports an infinite PSNR; json module round-trips it
    text = json.dumps({"psnr": math.inf})
    assert "Infinity" in text
    assert json.loads(text)["psnr"] == math.inf


def test_unknown_subcommand_nonzero_exit():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0


def test_missing_dataset_errors(tmp_path):
    rc = main(["train", "--dataset", str(tmp_path / "nope"), "--out",
               str(tmp_path / "run")])
    assert rc == 1


def test_render_bad_checkpoint_errors(tmp_path):
    bad = str(tmp_path / "bad.ckpt")
    open(bad, "wb").write(b"garbage")
    rc = main(["render", "--checkpoint", bad, "--out", str(tmp_path / "r"),
               "--time", "0.0"])
    assert rc == 1


def test_checkpoint_every(tmp_path, dataset_dir):
    cfg = write_config(tmp_path, iterations=6)
    run_dir = str(tmp_path / "run")
    main(["train", "--dataset", dataset_dir, "--out", run_dir,
          "--config", cfg, "--checkpoint-every", "3"])
    assert os.path.exists(os.path.join(run_dir, "checkpoint_000003.ckpt"))
    assert os.path.exists(os.path.join(run_dir, "checkpoint_000006.ckpt"))
