"""``stm``: generate data, train, render, evaluate, animate and run the ablation grid."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import StmError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or missing inputs named on the command line."""


@dataclass
class CommandResult:
    code: int = EXIT_OK
    summary: str = ""
    paths: list[Path] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not (p / "meta.json").is_file():
        raise UsageError(f"{what} {p} is not a sequence directory")
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_data(path):
    from .dataset import load_sequence

    return load_sequence(_require_dir(path, "dataset"))


def _load_state(path):
    from .train import load_checkpoint

    return load_checkpoint(_require_file(path, "checkpoint"))


def _write_image(out: Path, stem: str, render, pfm: bool) -> list[Path]:
    from .imageio import write_pfm, write_png

    color = render.color.detach().numpy()
    paths = [out / f"{stem}.png"]
    write_png(paths[0], np.clip(color, 0.0, 1.0))
    if pfm:
        paths += [out / f"{stem}.pfm", out / f"{stem}_alpha.pfm"]
        write_pfm(paths[1], color)
        write_pfm(paths[2], render.alpha.detach().numpy())
    return paths


def _orbit_cameras(n: int, size: int, radius: float, target=(0.0, 0.9, 0.0)):
    from .camera import Camera

    cams = []
    for i in range(n):
        ang = 2 * np.pi * i / max(n, 1)
        eye = [radius * np.sin(ang), 1.6, radius * np.cos(ang)]
        cams.append(Camera.look_at(eye, target, width=size, height=size, fov_deg=50.0))
    return cams


def _load_cameras(path):
    from .camera import Camera

    doc = json.loads(_require_file(path, "camera file").read_text())
    doc = doc if isinstance(doc, list) else [doc]
    return [Camera.from_dict(d) for d in doc]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> CommandResult:
    from .dataset import save_sequence
    from .synth import ground_truth_state, make_avatar, make_scene, make_sequence
    from .train import save_checkpoint

    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    out = Path(args.out)
    scene = make_scene(args.seed, args.scene_primitives)
    avatar = make_avatar(args.seed)
    seq = make_sequence(scene, avatar, args.frames, args.seed, size=args.size)
    paths = save_sequence(seq, out)
    paths.append(save_checkpoint(ground_truth_state(scene, avatar, seq), out / "ground_truth.stm"))
    return CommandResult(EXIT_OK, f"wrote {len(seq.frames)} frames ({len(seq.test_ids)} held out) to {out}", paths)


def _train_config(args, base=None):
    from .losses import LossWeights
    from .train import MappingConfig, TrainConfig, load_config

    cfg = base or (load_config(_require_file(args.config, "config")) if args.config else TrainConfig())
    kw = {}
    if args.iters is not None and base is None:
        kw["total_iterations"] = args.iters
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.deterministic:
        kw["deterministic"] = True
    if args.mapping is not None:
        kw["mapping"] = MappingConfig(args.mapping, cfg.mapping.attributes, cfg.mapping.hidden)
    if args.depth_weight is not None:
        kw["weights"] = LossWeights.from_dict(cfg.weights.to_dict() | {"depth": args.depth_weight})
    return cfg.with_overrides(**kw)


def cmd_train(args) -> CommandResult:
    from .train import init_state, load_checkpoint, train

    data = _load_data(args.data)
    out = Path(args.out)
    if args.resume:
        state = load_checkpoint(_require_file(args.resume, "checkpoint"))
        iterations = args.iters
    else:
        state = init_state(data, _train_config(args))
        iterations = None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(state.config.to_dict(), indent=1, sort_keys=True))

    def progress(it, report):
        if args.log_every and it % args.log_every == 0:
            print(f"iter {it:6d}  loss {float(report.total):.5f}  scene {state.n_scene}  avatar {state.n_avatar}",
                  file=sys.stderr, flush=True)

    train(data, state=state, iterations=iterations, out_dir=out, checkpoint_every=args.checkpoint_every,
          progress=progress)
    paths = [out / "config.json", out / "metrics.csv", out / "checkpoint.stm"]
    return CommandResult(EXIT_OK, f"trained to iteration {state.iteration}; checkpoint {paths[-1]}", paths)


def cmd_render(args) -> CommandResult:
    from .avatar import Pose
    from .train import render_state

    state = _load_state(args.checkpoint)
    if args.data:
        data = _load_data(args.data)
        ids = args.frames if args.frames else range(len(data.frames))
        jobs = [(f"{i:03d}", data.frames[i].camera, data.frames[i].pose) for i in ids]
    else:
        pose = Pose.identity(state.avatar.rig.n_joints)
        jobs = [(f"{i:03d}", c, pose) for i, c in enumerate(_orbit_cameras(args.orbit, args.size, args.radius))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, cam, pose in jobs:
        paths += _write_image(out, stem, render_state(state, cam, pose, args.layer), args.pfm)
    return CommandResult(EXIT_OK, f"rendered {len(jobs)} {args.layer} views to {out}", paths)


def _lpips_scores(state, data, ids):
    from .losses import lpips
    from .train import render_state

    vals = []
    for i in ids:
        fr = data.frames[i]
        img = render_state(state, fr.camera, fr.pose).color
        vals.append(float(lpips(img, torch.as_tensor(fr.image))))
    return vals


def report_markdown(report, lpips_values=None) -> str:
    """PSNR/SSIM table: one row per held-out frame and a mean row."""
    cols = ["PSNR", "SSIM", "Crop PSNR", "Crop SSIM", "Band PSNR"]
    keys = ["psnr", "ssim", "psnr_crop", "ssim_crop", "psnr_band"]
    if lpips_values is not None:
        cols.append("LPIPS")
    lines = ["| Frame | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    rows = [(str(f.frame), [getattr(f, k) for k in keys]) for f in report.frames]
    rows.append(("Mean", [report.mean(k) for k in keys]))
    for n, (name, vals) in enumerate(rows):
        if lpips_values is not None:
            vals = vals + [lpips_values[n] if n < len(report.frames) else float(np.mean(lpips_values))]
        lines.append(f"| {name} | " + " | ".join(f"{v:.4f}" for v in vals) + " |")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> CommandResult:
    from .losses import lpips_registered
    from .plotting import comparison_strip, frame_scores, loss_curve
    from .synth import evaluate
    from .train import render_state

    state = _load_state(args.checkpoint)
    data = _load_data(args.data)
    ids = tuple(args.frames) if args.frames else data.test_ids
    if not ids:
        raise UsageError("no held-out frames to evaluate (pass --frames)")
    report = evaluate(state, data, ids)
    doc = report.to_dict()
    lp = _lpips_scores(state, data, ids) if lpips_registered() else None
    if lp is not None:
        doc["lpips"] = {"frames": lp, "mean": float(np.mean(lp))}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.md"]
    paths[0].write_text(json.dumps(doc, indent=1, sort_keys=True))
    paths[1].write_text(report_markdown(report, lp))
    if not args.no_figures:
        paths.append(frame_scores(report, out / "frame_psnr.png"))
        pairs = [(render_state(state, data.frames[i].camera, data.frames[i].pose).color.numpy(), data.frames[i].image)
                 for i in ids[:4]]
        paths.append(comparison_strip(pairs, out / "comparison.png"))
        metrics = Path(args.checkpoint).parent / "metrics.csv"
        if metrics.is_file():
            paths.append(loss_curve(metrics, out / "loss.png"))
    s = report.summary
    return CommandResult(EXIT_OK, f"PSNR {s['psnr']:.2f} dB, crop {s['psnr_crop']:.2f} dB, "
                                  f"band {s['psnr_band']:.2f} dB, SSIM {s['ssim']:.4f}", paths)


def place_field(field, rotation: np.ndarray, translation: np.ndarray):
    """Rigidly move a Gaussian field: positions and orientations (colors are left as stored)."""
    from .gaussians import DTYPE, matrix_to_quaternion, quaternion_multiply

    r = torch.as_tensor(rotation, dtype=DTYPE)
    t = torch.as_tensor(translation, dtype=DTYPE)
    q = matrix_to_quaternion(r).expand_as(field.rotations)
    return field.replace(positions=field.positions @ r.T + t, rotations=quaternion_multiply(q, field.rotations))


def cmd_animate(args) -> CommandResult:
    from .avatar import load_poses
    from .gaussians import GaussianField, concat_fields
    from .mapping import map_then_concat
    from .raster import project, render_projected
    from .train import raster_settings

    av_state = _load_state(args.avatar)
    if args.scene is None:
        sc_state = av_state
    elif args.scene == "none":
        sc_state = None
    else:
        sc_state = _load_state(args.scene)
    poses = load_poses(_require_file(args.poses, "pose file"))
    if args.cameras:
        cams = _load_cameras(args.cameras)
    elif args.data:
        cams = [f.camera for f in _load_data(args.data).frames]
    else:
        cams = _orbit_cameras(1, args.size, args.radius)
    if len(cams) == 1:
        cams = cams * len(poses)
    if len(cams) < len(poses):
        raise UsageError(f"{len(poses)} poses but only {len(cams)} cameras")
    rot = Rotation.from_euler("xyz", args.rotate, degrees=True).as_matrix()
    trans = np.asarray(args.translate, dtype=np.float64)
    identity = not np.any(args.rotate) and not np.any(trans)
    bg = args.background if args.background is not None else av_state.config.background
    settings = raster_settings(av_state.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with torch.no_grad():
        for i, (pose, cam) in enumerate(zip(poses, cams)):
            posed = av_state.avatar.deform(pose).field
            if sc_state is av_state and identity:
                composite = map_then_concat(av_state.mapping, av_state.scene, posed)
            else:
                placed = place_field(av_state.mapping.apply(posed, "avatar"), rot, trans)
                if sc_state is None:
                    scene = GaussianField.empty(placed.sh_degree)
                else:
                    scene = sc_state.mapping.apply(sc_state.scene, "scene")
                composite = concat_fields(scene, placed)
            render = render_projected(project(composite, cam), bg, settings)
            paths += _write_image(out, f"{i:03d}", render, args.pfm)
    return CommandResult(EXIT_OK, f"rendered {len(poses)} animated frames to {out}", paths)


def ablation_rows(arg: str) -> tuple[str, ...]:
    from .ablation import ROWS

    rows = tuple(dict.fromkeys(arg.replace(",", "")))
    bad = [r for r in rows if r not in ROWS]
    if bad or not rows:
        raise UsageError(f"--rows takes letters from {''.join(ROWS)}, got {arg!r}")
    return rows


def cmd_ablate(args) -> CommandResult:
    from .ablation import ROW_LABELS, ablation_grid, run_ablation
    from .plotting import ablation_bars
    from .train import TrainConfig, load_config

    rows = ablation_rows(args.rows)
    base = load_config(_require_file(args.config, "config")) if args.config else TrainConfig()
    if args.deterministic:
        base = base.with_overrides(deterministic=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = ablation_grid(base.with_overrides(total_iterations=args.iters), rows)
    grid_doc = {r: {"label": ROW_LABELS[r], "digest": c.digest(), "config": c.to_dict()} for r, c in grid.items()}
    (out / "grid.json").write_text(json.dumps(grid_doc, indent=1, sort_keys=True))
    if args.list:
        text = "\n".join(f"({r}) {d['digest'][:16]}  {d['label']}" for r, d in grid_doc.items())
        return CommandResult(EXIT_OK, text, [out / "grid.json"])
    data = _load_data(args.data) if args.data else None
    if data is None:
        raise UsageError("--data is required unless --list is given")

    def progress(run):
        print(f"({run.row}) seed {run.seed}: band PSNR {run.metrics['psnr_band']:.2f} dB in {run.seconds:.0f} s",
              file=sys.stderr, flush=True)

    result = run_ablation(data, base, rows, args.seeds, args.iters, out, progress)
    paths = [out / "grid.json", out / "table.json", out / "table.md", ablation_bars(result, out / "table.png")]
    return CommandResult(EXIT_OK, result.markdown(), paths)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stm", description="Separate-then-map Gaussian reconstruction of a human in a scene.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.add_argument("--frames", type=int, default=60, help="number of frames (default 60)")
    s.add_argument("--size", type=int, default=64, help="image width and height in pixels (default 64)")
    s.add_argument("--scene-primitives", type=int, default=500, help="scene Gaussians (default 500)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize scene, avatar and mapping on a sequence")
    t.add_argument("--data", required=True, help="sequence directory")
    t.add_argument("--out", required=True, help="run directory (metrics.csv, checkpoint.stm)")
    t.add_argument("--config", help="JSON config file; flags below override it")
    t.add_argument("--iters", type=int, help="total iterations (with --resume: additional iterations)")
    t.add_argument("--seed", type=int, help="run seed")
    t.add_argument("--deterministic", action="store_true", help="bit-reproducible rasterization")
    t.add_argument("--mapping", choices=("off", "shared", "separate"), help="mapping mode")
    t.add_argument("--depth-weight", type=float, help="weight of the depth correlation term")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N iterations")
    t.add_argument("--resume", help="continue from this checkpoint (its config is kept)")
    t.add_argument("--log-every", type=int, default=500, help="progress line interval, 0 for none")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint along dataset cameras or an orbit")
    r.add_argument("--checkpoint", required=True, help="checkpoint file")
    r.add_argument("--out", required=True, help="output image directory")
    r.add_argument("--layer", choices=("full", "scene", "avatar"), default="full",
                   help="composite, mapped scene only or mapped avatar only (default full)")
    r.add_argument("--data", help="use this sequence's cameras and poses")
    r.add_argument("--frames", type=int, nargs="+", help="frame ids to render (default all)")
    r.add_argument("--orbit", type=int, default=8, help="orbit views without --data (default 8)")
    r.add_argument("--size", type=int, default=64, help="orbit image size (default 64)")
    r.add_argument("--radius", type=float, default=4.0, help="orbit radius (default 4)")
    r.add_argument("--pfm", action="store_true", help="also write float color and alpha PFMs")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score held-out frames (PSNR/SSIM, full and human region)")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="sequence directory")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--frames", type=int, nargs="+", help="frame ids (default the held-out split)")
    e.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("animate", help="render a trained avatar in new poses and placements")
    a.add_argument("--avatar", required=True, help="checkpoint providing the avatar")
    a.add_argument("--scene", help="checkpoint providing the scene, or 'none' (default: the avatar's own)")
    a.add_argument("--poses", required=True, help="JSON list of poses")
    a.add_argument("--out", required=True, help="output image directory")
    a.add_argument("--cameras", help="JSON camera or list of cameras (one per pose, or one for all)")
    a.add_argument("--data", help="take cameras from this sequence")
    a.add_argument("--rotate", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("RX", "RY", "RZ"),
                   help="placement rotation, xyz Euler degrees")
    a.add_argument("--translate", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("TX", "TY", "TZ"),
                   help="placement translation in scene units")
    a.add_argument("--background", type=float, nargs=3, metavar=("R", "G", "B"), help="background color")
    a.add_argument("--size", type=int, default=64, help="default camera image size (default 64)")
    a.add_argument("--radius", type=float, default=4.0, help="default camera distance (default 4)")
    a.add_argument("--pfm", action="store_true", help="also write float color and alpha PFMs")
    a.set_defaults(func=cmd_animate)

    g = sub.add_parser("ablate", help="run the seven-row mapping/depth ablation grid")
    g.add_argument("--data", help="sequence directory")
    g.add_argument("--out", required=True, help="grid directory (one run directory per row and seed)")
    g.add_argument("--config", help="base JSON config")
    g.add_argument("--iters", type=int, default=5000, help="iterations per run (default 5000)")
    g.add_argument("--seeds", type=int, nargs="+", default=[0], help="run seeds (default 0)")
    g.add_argument("--rows", default="abcdefg", help="subset of rows a-g (default all)")
    g.add_argument("--deterministic", action="store_true", help="bit-reproducible rasterization")
    g.add_argument("--list", action="store_true", help="only write and print the row configs")
    g.set_defaults(func=cmd_ablate)
    return p


def _apply_thread_cap() -> None:
    n = os.environ.get("STM_THREADS")
    if not n:
        return
    from .raster import configure_threads

    n = max(1, int(n))
    torch.set_num_threads(n)
    configure_threads(n)


def run(argv=None) -> CommandResult:
    try:
        args = build_parser().parse_args(argv)
        _apply_thread_cap()
        return args.func(args)
    except SystemExit as exc:  # --help
        return CommandResult(int(exc.code or 0))
    except UsageError as exc:
        return CommandResult(EXIT_USAGE, f"error: {exc}")
    except (StmError, OSError, ValueError) as exc:
        return CommandResult(EXIT_RUNTIME, f"error: {type(exc).__name__}: {exc}")


def main(argv=None) -> int:
    result = run(argv)
    if result.summary:
        print(result.summary, file=sys.stderr if result.code else sys.stdout)
    return result.code


if __name__ == "__main__":
    sys.exit(main())
