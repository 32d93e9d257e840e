import hashlib
import json
import re

import numpy as np
import pytest
import torch

from stm import losses
from stm.ablation import DEPTH_ON, ROWS
from stm.avatar import Pose, save_poses
from stm.cli import build_parser, main, place_field, report_markdown
from stm.dataset import load_sequence
from stm.gaussians import GaussianField
from stm.imageio import read_pfm
from stm.raster import project, render_projected
from stm.synth import evaluate
from stm.train import (TrainConfig, checkpoint_digest, init_state, load_checkpoint, raster_settings, render_state,
                       save_checkpoint, train)

COMMANDS = ("synth", "train", "render", "eval", "animate", "ablate")


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def small_config():
    return TrainConfig(triplane_resolution=16, triplane_features=8, head_hidden=32, densify_from=2,
                       scene_densify_interval=2, avatar_densify_interval=4, deterministic=True)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "seq"), "--seed", "3", "--frames", "6", "--size", "24",
                 "--scene-primitives", "60"]) == 0
    (root / "cfg.json").write_text(small_config().to_json())
    assert main(["train", "--data", str(root / "seq"), "--out", str(root / "init"), "--config",
                 str(root / "cfg.json"), "--iters", "0"]) == 0
    return root


# ---------------------------------------------------------------------------
# parser and exit codes


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero_and_lists_every_flag(command, capsys):
    assert main([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


def test_top_level_help():
    assert main(["--help"]) == 0


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "not a sequence directory" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "s"), "--frames", "0"]) == 1
    assert main(["ablate", "--out", str(tmp_path / "g"), "--rows", "xz"]) == 1


def test_runtime_errors_exit_two(world, tmp_path, capsys):
    bad = tmp_path / "bad.stm"
    bad.write_bytes(b"not a checkpoint")
    assert main(["render", "--checkpoint", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_thread_cap_from_environment(world, tmp_path, monkeypatch):
    before = torch.get_num_threads()
    monkeypatch.setenv("STM_THREADS", "1")
    try:
        assert main(["render", "--checkpoint", str(world / "init" / "checkpoint.stm"), "--out",
                     str(tmp_path / "r"), "--orbit", "1", "--size", "8"]) == 0
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


# ---------------------------------------------------------------------------
# synth


def test_synth_defaults_are_sixty_frames_at_64px():
    args = build_parser().parse_args(["synth", "--out", "x"])
    assert (args.frames, args.size, args.scene_primitives, args.seed) == (60, 64, 500, 0)


def test_synth_single_frame(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "one"), "--frames", "1", "--size", "16",
                 "--scene-primitives", "20"]) == 0
    assert len(load_sequence(tmp_path / "one").frames) == 1
    assert (tmp_path / "one" / "ground_truth.stm").is_file()


def test_synth_rerun_is_byte_identical(world, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "again"), "--seed", "3", "--frames", "6", "--size", "24",
                 "--scene-primitives", "60"]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(world / "seq")
    assert main(["synth", "--out", str(tmp_path / "other"), "--seed", "4", "--frames", "6", "--size", "24",
                 "--scene-primitives", "60"]) == 0
    assert tree_digest(tmp_path / "other") != tree_digest(world / "seq")


# ---------------------------------------------------------------------------
# train


def test_zero_iterations_checkpoints_the_initial_state(world):
    data = load_sequence(world / "seq")
    assert checkpoint_digest(world / "init" / "checkpoint.stm") == checkpoint_digest(
        init_state(data, small_config().with_overrides(total_iterations=0)))
    cfg = json.loads((world / "init" / "config.json").read_text())
    assert cfg["total_iterations"] == 0


def test_train_writes_one_csv_row_per_iteration(world, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(world / "seq"), "--out", str(out), "--config", str(world / "cfg.json"),
                 "--iters", "5", "--mapping", "separate", "--depth-weight", "0"]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 5
    state = load_checkpoint(out / "checkpoint.stm")
    assert state.iteration == 5
    assert state.config.mapping.mode == "separate" and state.config.weights.depth == 0.0


def test_flags_override_config_file(world, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(world / "seq"), "--out", str(out), "--config", str(world / "cfg.json"),
                 "--iters", "0", "--seed", "11"]) == 0
    cfg = load_checkpoint(out / "checkpoint.stm").config
    assert cfg.seed == 11 and cfg.triplane_resolution == 16


def test_deterministic_reruns_and_resume_match(world, tmp_path):
    common = ["--data", str(world / "seq"), "--config", str(world / "cfg.json"), "--deterministic", "--seed", "7"]
    assert main(["train", "--out", str(tmp_path / "a"), "--iters", "6"] + common) == 0
    assert main(["train", "--out", str(tmp_path / "b"), "--iters", "6"] + common) == 0
    a, b = tmp_path / "a" / "checkpoint.stm", tmp_path / "b" / "checkpoint.stm"
    assert a.read_bytes() == b.read_bytes()
    # an interrupted run: continue from a 3-iteration checkpoint of the same 6-iteration schedule
    data = load_sequence(world / "seq")
    cfg = small_config().with_overrides(seed=7, total_iterations=6)
    mid = train(data, cfg, iterations=3)
    save_checkpoint(mid, tmp_path / "mid.stm")
    assert main(["train", "--data", str(world / "seq"), "--out", str(tmp_path / "resumed"), "--resume",
                 str(tmp_path / "mid.stm"), "--iters", "3"]) == 0
    resumed = load_checkpoint(tmp_path / "resumed" / "checkpoint.stm")
    continuous = load_checkpoint(a)
    for (na, ta), (nb, tb) in zip(resumed.parameters(), continuous.parameters()):
        assert na == nb and ta.shape == tb.shape
        assert torch.allclose(ta, tb, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# render


def render_pfm(world, tmp_path, layer, *extra):
    out = tmp_path / layer
    assert main(["render", "--checkpoint", str(world / "init" / "checkpoint.stm"), "--out", str(out), "--layer",
                 layer, "--pfm", "--orbit", "2", "--size", "24"] + list(extra)) == 0
    return out


def test_scene_layer_of_untrained_checkpoint_is_initial_scene(world, tmp_path):
    from stm.cli import _orbit_cameras

    out = render_pfm(world, tmp_path, "scene")
    state = init_state(load_sequence(world / "seq"), small_config())
    cams = _orbit_cameras(2, 24, 4.0)
    for i, cam in enumerate(cams):
        with torch.no_grad():
            ref = render_projected(project(state.scene, cam), state.config.background, raster_settings(state.config))
        assert np.abs(read_pfm(out / f"{i:03d}.pfm") - ref.color.numpy()).max() <= 1e-6


def test_avatar_layer_identity_pose_matches_canonical_render(world, tmp_path):
    from stm.cli import _orbit_cameras

    out = render_pfm(world, tmp_path, "avatar")
    state = load_checkpoint(world / "init" / "checkpoint.stm")
    with torch.no_grad():
        canon, _ = state.avatar.canonical_field()
    for i, cam in enumerate(_orbit_cameras(2, 24, 4.0)):
        ref = render_projected(project(canon, cam), state.config.background, raster_settings(state.config))
        got = read_pfm(out / f"{i:03d}.pfm")
        assert ref.alpha.max() > 0.1
        assert np.abs(got - ref.color.numpy()).max() <= 1e-6


def test_full_layer_uses_dataset_cameras_and_poses(world, tmp_path):
    out = render_pfm(world, tmp_path, "full", "--data", str(world / "seq"), "--frames", "1", "4")
    state = load_checkpoint(world / "init" / "checkpoint.stm")
    data = load_sequence(world / "seq")
    assert sorted(p.name for p in out.glob("*.png")) == ["001.png", "004.png"]
    for i in (1, 4):
        ref = render_state(state, data.frames[i].camera, data.frames[i].pose)
        assert np.abs(read_pfm(out / f"{i:03d}.pfm") - ref.color.numpy()).max() <= 1e-6


# ---------------------------------------------------------------------------
# eval


def parse_markdown(text):
    lines = [l for l in text.splitlines() if l.startswith("|")]
    head = [c.strip() for c in lines[0].strip("|").split("|")]
    rows = {}
    for l in lines[2:]:
        cells = [c.strip() for c in l.strip("|").split("|")]
        rows[cells[0]] = dict(zip(head[1:], map(float, cells[1:])))
    return head, rows


def test_eval_of_ground_truth_reports_the_cap(world, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(world / "seq" / "ground_truth.stm"), "--data", str(world / "seq"),
                 "--out", str(out), "--frames", "0", "1", "5"]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert [f["psnr"] for f in doc["frames"]] == [100.0] * 3
    assert doc["mean"]["psnr"] == 100.0 and doc["mean"]["psnr_crop"] == 100.0
    assert (out / "frame_psnr.png").is_file() and (out / "comparison.png").is_file()


def test_eval_json_and_markdown_agree(world, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(world / "seq"), "--out", str(run), "--config", str(world / "cfg.json"),
                 "--iters", "3"]) == 0
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.stm"), "--data", str(world / "seq"), "--out",
                 str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    head, rows = parse_markdown((out / "report.md").read_text())
    assert "LPIPS" not in head
    names = {"PSNR": "psnr", "SSIM": "ssim", "Crop PSNR": "psnr_crop", "Crop SSIM": "ssim_crop",
             "Band PSNR": "psnr_band"}
    for f in doc["frames"]:
        for col, key in names.items():
            assert rows[str(f["frame"])][col] == pytest.approx(f[key], abs=5e-5)
    for col, key in names.items():
        assert rows["Mean"][col] == pytest.approx(doc["mean"][key], abs=5e-5)
        per_frame = [f[key] for f in doc["frames"]]
        assert doc["mean"][key] == pytest.approx(np.mean(per_frame), rel=1e-12)
    assert (out / "loss.png").is_file()


def test_lpips_column_only_with_registered_scorer(world, tmp_path):
    losses.register_lpips(lambda a, b: (a - b).abs().mean())
    try:
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(world / "init" / "checkpoint.stm"), "--data", str(world / "seq"),
                     "--out", str(out), "--no-figures"]) == 0
    finally:
        losses.register_lpips(None)
    head, rows = parse_markdown((out / "report.md").read_text())
    doc = json.loads((out / "report.json").read_text())
    assert head[-1] == "LPIPS"
    assert rows["Mean"]["LPIPS"] == pytest.approx(doc["lpips"]["mean"], abs=5e-5)
    assert not list(out.glob("*.png"))


def test_report_markdown_has_frame_and_mean_rows(world):
    state = load_checkpoint(world / "seq" / "ground_truth.stm")
    report = evaluate(state, load_sequence(world / "seq"), (0, 2))
    _, rows = parse_markdown(report_markdown(report))
    assert list(rows) == ["0", "2", "Mean"]


# ---------------------------------------------------------------------------
# animate


def write_poses(path, poses):
    save_poses(poses, path)
    return str(path)


def test_animate_original_scene_and_poses_reproduces_eval_renders(world, tmp_path):
    data = load_sequence(world / "seq")
    ids = (1, 5)
    poses = write_poses(tmp_path / "p.json", [data.frames[i].pose for i in ids])
    (tmp_path / "c.json").write_text(json.dumps([data.frames[i].camera.to_dict() for i in ids]))
    ckpt = world / "seq" / "ground_truth.stm"
    assert main(["animate", "--avatar", str(ckpt), "--poses", poses, "--cameras", str(tmp_path / "c.json"),
                 "--out", str(tmp_path / "an"), "--pfm"]) == 0
    state = load_checkpoint(ckpt)
    for k, i in enumerate(ids):
        ref = render_state(state, data.frames[i].camera, data.frames[i].pose)
        assert np.abs(read_pfm(tmp_path / "an" / f"{k:03d}.pfm") - ref.color.numpy()).max() <= 1e-6
        # the ground-truth checkpoint reproduces the dataset frame itself
        assert np.abs(read_pfm(tmp_path / "an" / f"{k:03d}.pfm") - data.frames[i].image).max() <= 1e-6


def animate_alone(world, tmp_path, name, *extra):
    poses = write_poses(tmp_path / "id.json", [Pose.identity(6)])
    out = tmp_path / name
    assert main(["animate", "--avatar", str(world / "seq" / "ground_truth.stm"), "--scene", "none", "--poses",
                 poses, "--out", str(out), "--pfm", "--background", "0.2", "0.4", "0.6"] + list(extra)) == 0
    return read_pfm(out / "000.pfm"), read_pfm(out / "000_alpha.pfm")


def test_animate_identity_placement_on_empty_scene(world, tmp_path):
    color, alpha = animate_alone(world, tmp_path, "still")
    bg = np.array([0.2, 0.4, 0.6])
    empty = alpha == 0
    assert empty.any() and (~empty).any()
    assert np.abs(color[empty] - bg).max() <= 1e-6
    state = load_checkpoint(world / "seq" / "ground_truth.stm")
    from stm.cli import _orbit_cameras

    cam = _orbit_cameras(1, 64, 4.0)[0]
    ref = render_state(state, cam, Pose.identity(6), "avatar", background=(0.2, 0.4, 0.6))
    assert np.abs(color - ref.color.numpy()).max() <= 1e-6


def test_animate_translation_shifts_centroid_by_projected_offset(world, tmp_path):
    from stm.cli import _orbit_cameras

    offset = np.array([0.3, 0.1, 0.0])
    _, a0 = animate_alone(world, tmp_path, "still")
    _, a1 = animate_alone(world, tmp_path, "moved", "--translate", *map(str, offset))

    def centroid(a):
        ys, xs = np.mgrid[: a.shape[0], : a.shape[1]]
        return np.array([(a * xs).sum(), (a * ys).sum()]) / a.sum()

    state = load_checkpoint(world / "seq" / "ground_truth.stm")
    with torch.no_grad():
        c = state.avatar.deform(Pose.identity(6)).field.positions.mean(0).numpy()
    cam = _orbit_cameras(1, 64, 4.0)[0]
    expected = cam.project_points(np.stack([c + offset, c]))
    shift = expected[0] - expected[1]
    assert np.linalg.norm(shift) > 3
    assert np.abs(centroid(a1) - centroid(a0) - shift).max() <= 1.0


def test_place_field_rotation_keeps_covariances_consistent():
    rng = np.random.default_rng(0)
    n = 5
    f = GaussianField.from_arrays(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(-2, 0.3, (n, 3)),
                                  rng.normal(size=(n, 1)), rng.normal(size=(n, 1, 3)))
    from scipy.spatial.transform import Rotation

    r = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
    t = np.array([0.5, -1.0, 2.0])
    moved = place_field(f, r, t)
    rt = torch.as_tensor(r)
    assert torch.allclose(moved.positions, f.positions @ rt.T + torch.as_tensor(t), atol=1e-12)
    assert torch.allclose(moved.covariances(), rt @ f.covariances() @ rt.T, atol=1e-12)


# ---------------------------------------------------------------------------
# ablate


def test_ablation_grid_listing(tmp_path, capsys):
    assert main(["ablate", "--out", str(tmp_path), "--list"]) == 0
    grid = json.loads((tmp_path / "grid.json").read_text())
    assert tuple(grid) == ROWS and len(grid) == 7
    assert len({g["digest"] for g in grid.values()}) == 7
    b, g = grid["b"]["config"], grid["g"]["config"]
    assert g["weights"]["depth"] == DEPTH_ON
    assert {**b, "weights": {**b["weights"], "depth": DEPTH_ON}} == g
    assert grid["b"]["config"]["total_iterations"] == 5000
    assert len(capsys.readouterr().out.strip().splitlines()) == 7


def test_ablation_run_writes_tables(world, tmp_path):
    out = tmp_path / "grid"
    assert main(["ablate", "--data", str(world / "seq"), "--out", str(out), "--config", str(world / "cfg.json"),
                 "--rows", "b,c", "--iters", "2", "--seeds", "0", "1"]) == 0
    doc = json.loads((out / "table.json").read_text())
    assert [r["row"] for r in doc["runs"]] == ["b", "b", "c", "c"]
    assert set(doc["mean"]) == {"b", "c"}
    md = (out / "table.md").read_text()
    assert re.search(r"^\| \(b\) ", md, re.M) and re.search(r"^\| \(c\) ", md, re.M)
    for r in doc["runs"]:
        assert (out / f"{r['row']}_seed{r['seed']}" / "checkpoint.stm").is_file()
    assert (out / "table.png").is_file()
