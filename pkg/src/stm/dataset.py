"""Posed monocular sequence: frames, cameras, avatar poses, prior rig and a sparse point cloud."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .avatar import Pose, SkeletonRig, load_rig_json, save_rig_json
from .camera import Camera
from .errors import ConfigurationError, StmError
from .imageio import read_pfm, read_png, write_pfm, write_png

FORMAT_VERSION = 1


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) rendered (alpha-weighted) depth
    depth_estimate: np.ndarray  # (H, W) depth up to an unknown affine map
    mask: np.ndarray  # (H, W) bool, avatar region
    camera: Camera
    pose: Pose

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "image": torch.from_numpy(np.ascontiguousarray(self.image, dtype=np.float64)),
            "depth_estimate": torch.from_numpy(np.ascontiguousarray(self.depth_estimate, dtype=np.float64)),
            "mask": torch.from_numpy(np.ascontiguousarray(self.mask, dtype=bool)),
        }


@dataclass
class Sequence:
    frames: list[Frame]
    rig: SkeletonRig
    mesh_vertices: np.ndarray
    mesh_weights: np.ndarray
    points: np.ndarray  # (P, 3) sparse reconstruction used to seed the scene
    point_colors: np.ndarray  # (P, 3)
    test_ids: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frames)
        if any(not 0 <= i < n for i in self.test_ids):
            raise ConfigurationError("test frame id out of range")
        self.test_ids = tuple(sorted(int(i) for i in self.test_ids))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def train_ids(self) -> tuple[int, ...]:
        held = set(self.test_ids)
        return tuple(i for i in range(len(self.frames)) if i not in held)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.frames[0].camera.height, self.frames[0].camera.width

    def scene_extent(self) -> float:
        """Radius of the camera centers around their mean, padded by 10%."""
        centers = np.stack([f.camera.center for f in self.frames])
        radius = np.linalg.norm(centers - centers.mean(0), axis=1).max()
        return float(1.1 * max(radius, 1e-6))

    def subset(self, ids) -> "Sequence":
        ids = list(ids)
        return Sequence([self.frames[i] for i in ids], self.rig, self.mesh_vertices, self.mesh_weights,
                        self.points, self.point_colors, (), dict(self.meta))


def save_sequence(seq: Sequence, root) -> list[Path]:
    """Write the sequence directory layout; returns the files written."""
    root = Path(root)
    for sub in ("frames", "depth", "mask", "estimated_depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    written = []
    for i, fr in enumerate(seq.frames):
        name = f"{i:03d}"
        paths = {
            root / "frames" / f"{name}.png": lambda p, fr=fr: write_png(p, fr.image),
            root / "frames" / f"{name}.pfm": lambda p, fr=fr: write_pfm(p, fr.image),
            root / "depth" / f"{name}.pfm": lambda p, fr=fr: write_pfm(p, fr.depth),
            root / "estimated_depth" / f"{name}.pfm": lambda p, fr=fr: write_pfm(p, fr.depth_estimate),
            root / "mask" / f"{name}.png": lambda p, fr=fr: write_png(p, fr.mask),
        }
        for path, write in paths.items():
            write(path)
            written.append(path)
    docs = {
        "cameras.json": [f.camera.to_dict() for f in seq.frames],
        "poses.json": [f.pose.to_dict() for f in seq.frames],
        "points.json": {"points": seq.points.tolist(), "colors": seq.point_colors.tolist()},
        "meta.json": {**seq.meta, "format_version": FORMAT_VERSION, "n_frames": len(seq.frames),
                      "test_ids": list(seq.test_ids)},
    }
    for name, doc in docs.items():
        (root / name).write_text(json.dumps(doc, indent=1, sort_keys=True))
        written.append(root / name)
    save_rig_json(seq.rig, seq.mesh_vertices, seq.mesh_weights, root / "rig.json")
    written.append(root / "rig.json")
    return written


def load_sequence(root) -> Sequence:
    root = Path(root)
    if not (root / "meta.json").is_file():
        raise StmError(f"{root} is not a sequence directory (no meta.json)")
    meta = json.loads((root / "meta.json").read_text())
    cameras = [Camera.from_dict(d) for d in json.loads((root / "cameras.json").read_text())]
    poses = [Pose.from_dict(d) for d in json.loads((root / "poses.json").read_text())]
    pts = json.loads((root / "points.json").read_text())
    rig, verts, weights = load_rig_json(root / "rig.json")
    frames = []
    for i, (cam, pose) in enumerate(zip(cameras, poses)):
        name = f"{i:03d}"
        pfm = root / "frames" / f"{name}.pfm"
        image = read_pfm(pfm) if pfm.is_file() else read_png(root / "frames" / f"{name}.png")
        depth = read_pfm(root / "depth" / f"{name}.pfm")
        est_path = root / "estimated_depth" / f"{name}.pfm"
        estimate = read_pfm(est_path) if est_path.is_file() else depth
        mask = read_png(root / "mask" / f"{name}.png") > 0.5
        frames.append(Frame(image, depth, estimate, mask, cam, pose))
    meta = {k: v for k, v in meta.items() if k not in ("format_version", "n_frames", "test_ids")}
    return Sequence(frames, rig, verts, weights, np.asarray(pts["points"], dtype=np.float64).reshape(-1, 3),
                    np.asarray(pts["colors"], dtype=np.float64).reshape(-1, 3),
                    tuple(json.loads((root / "meta.json").read_text()).get("test_ids", ())), meta)
