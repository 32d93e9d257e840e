"""Synthetic ground truth: a room-like scene, a walking capsule humanoid, an orbiting camera.

Frames are rendered with the reference renderer; evaluation scores a trained state
against held-out frames over the full frame, the avatar crop and the contact band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .avatar import AvatarModel, Pose, SkeletonRig, forward_skinning, joint_transforms
from .camera import Camera
from .dataset import Frame, Sequence
from .errors import ShapeMismatchError
from .gaussians import DTYPE, SH_C0, GaussianField, concat_fields, rgb_to_sh0, sh_basis_count
from .losses import ssim
from .raster.oracle import render_oracle

GENERATOR_VERSION = 1
PSNR_CAP = 100.0
BAND_PX = 5

GROUND_COLORS = np.array([[0.56, 0.50, 0.40], [0.40, 0.38, 0.33]])
FURNITURE_COLORS = np.array([
    [0.72, 0.22, 0.20],
    [0.20, 0.45, 0.72],
    [0.30, 0.62, 0.30],
    [0.85, 0.72, 0.28],
    [0.52, 0.30, 0.62],
])
SKIN = np.array([0.90, 0.72, 0.58])
SHIRT = np.array([0.15, 0.55, 0.85])
SHIRT_STRIPE = np.array([0.95, 0.95, 0.95])
PANTS = np.array([0.22, 0.22, 0.35])
SHOES = np.array([0.55, 0.25, 0.10])

JOINT_NAMES = ("root", "spine", "left_hip", "left_knee", "right_hip", "right_knee")
HIP_X = 0.1
THIGH = 0.42
SHIN = 0.42
ROOT_Y = 0.05 + THIGH + SHIN  # feet touch y = 0 at rest


def _field(positions, rotations, log_scales, logits, colors, sh_degree) -> GaussianField:
    n = positions.shape[0]
    sh = torch.zeros(n, sh_basis_count(sh_degree), 3, dtype=DTYPE)
    sh[:, 0] = rgb_to_sh0(torch.as_tensor(colors, dtype=DTYPE))
    return GaussianField.from_arrays(positions=positions, rotations=rotations, log_scales=log_scales,
                                     opacity_logits=np.asarray(logits, dtype=np.float64).reshape(n, 1),
                                     sh_coefficients=sh)


def make_scene(seed: int = 0, n_primitives: int = 500, extent: float = 6.0, sh_degree: int = 3) -> GaussianField:
    """Checkered ground slab of flat Gaussians plus a few colored furniture clusters."""
    if n_primitives < 1:
        raise ValueError("n_primitives must be >= 1")
    rng = np.random.default_rng(seed)
    if n_primitives == 1:
        return _field(np.zeros((1, 3)), [[1.0, 0, 0, 0]], np.log([[0.2, 0.01, 0.2]]), [3.0], GROUND_COLORS[:1],
                      sh_degree)
    g = max(1, int(math.floor(math.sqrt(0.6 * n_primitives))))
    n_ground = g * g
    spacing = extent / g
    ij = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), -1).reshape(-1, 2)
    xz = (ij + 0.5) * spacing - extent / 2 + rng.uniform(-0.1, 0.1, ij.shape) * spacing
    ground_pos = np.stack([xz[:, 0], np.full(n_ground, -0.01), xz[:, 1]], -1)
    yaw = rng.uniform(0, np.pi, n_ground)
    ground_rot = np.stack([np.cos(yaw / 2), np.zeros(n_ground), np.sin(yaw / 2), np.zeros(n_ground)], -1)
    tangent = 0.6 * spacing * rng.uniform(0.9, 1.1, (n_ground, 2))
    ground_scale = np.stack([tangent[:, 0], np.full(n_ground, 0.008), tangent[:, 1]], -1)
    ground_col = GROUND_COLORS[(ij.sum(1) // 2) % 2] + rng.normal(0, 0.015, (n_ground, 3))

    n_furn = n_primitives - n_ground
    parts = [(ground_pos, ground_rot, np.log(ground_scale), np.full(n_ground, 3.0), ground_col)]
    if n_furn > 0:
        n_obj = min(len(FURNITURE_COLORS), n_furn)
        counts = np.full(n_obj, n_furn // n_obj)
        counts[: n_furn % n_obj] += 1
        angles = np.linspace(0, 2 * np.pi, n_obj, endpoint=False) + rng.uniform(-0.3, 0.3, n_obj) + 0.4
        for k, cnt in enumerate(counts):
            radius = rng.uniform(0.25, 0.36) * extent
            center = np.array([radius * np.cos(angles[k]), 0.0, radius * np.sin(angles[k])])
            size = np.array([rng.uniform(0.4, 0.8), rng.uniform(0.5, 1.2), rng.uniform(0.4, 0.8)])
            local = rng.uniform(-0.5, 0.5, (cnt, 3)) * size
            local[:, 1] += size[1] / 2
            pos = center + local
            rot = Rotation.random(cnt, random_state=rng).as_quat()[:, [3, 0, 1, 2]]
            scale = rng.uniform(0.05, 0.11, (cnt, 3))
            shade = 0.75 + 0.25 * (local[:, 1:2] / size[1] + 0.5)
            col = np.clip(FURNITURE_COLORS[k] * shade + rng.normal(0, 0.02, (cnt, 3)), 0, 1)
            parts.append((pos, rot, np.log(scale), np.full(cnt, 2.5), col))
    cat = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return _field(*cat, sh_degree)


# ---------------------------------------------------------------------------
# avatar


def humanoid_rig() -> SkeletonRig:
    offsets = [
        [0.0, ROOT_Y, 0.0],
        [0.0, 0.2, 0.0],
        [HIP_X, -0.05, 0.0],
        [0.0, -THIGH, 0.0],
        [-HIP_X, -0.05, 0.0],
        [0.0, -SHIN, 0.0],
    ]
    return SkeletonRig(parents=(-1, 0, 0, 2, 0, 4), offsets=offsets, names=JOINT_NAMES)


def _bone_segments(rig: SkeletonRig) -> np.ndarray:
    j = rig.rest_joints()
    top = ROOT_Y + 0.2
    return np.array([
        [[0.0, ROOT_Y - 0.1, 0.0], [0.0, top, 0.0]],
        [[0.0, top, 0.0], [0.0, top + 0.66, 0.0]],
        [j[2], j[3]],
        [j[3], j[3] - [0.0, SHIN, 0.0]],
        [j[4], j[5]],
        [j[5], j[5] - [0.0, SHIN, 0.0]],
    ])


def analytic_weights(points: np.ndarray, rig: SkeletonRig, falloff: float = 0.05) -> np.ndarray:
    """Nearest-bone dominated weights that blend smoothly where two bones are equally close."""
    seg = _bone_segments(rig)
    a, b = seg[:, 0], seg[:, 1]
    ab = b - a
    t = np.clip(np.einsum("nkc,kc->nk", points[:, None, :] - a, ab) / (ab * ab).sum(1), 0.0, 1.0)
    closest = a + t[..., None] * ab
    d = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    w = np.exp(-(((d - d.min(1, keepdims=True)) / falloff) ** 2))
    return w / w.sum(1, keepdims=True)


def _ring_points(axis_a, axis_b, radius, n_rings, n_around, phase=0.0, half=False):
    """Points and outward normals on an open cylinder; ``half`` keeps the x > 0 side."""
    pts, nrm, tan = [], [], []
    for r in range(n_rings):
        s = (r + 0.5) / n_rings
        c = axis_a + s * (axis_b - axis_a)
        for k in range(n_around):
            if half:
                ang = -np.pi / 2 + (k + 0.5) * np.pi / n_around
            else:
                ang = phase + 2 * np.pi * k / n_around + (np.pi / n_around) * (r % 2)
            n = np.array([np.cos(ang), 0.0, np.sin(ang)])
            pts.append(c + radius * n)
            nrm.append(n)
            tan.append(np.array([-np.sin(ang), 0.0, np.cos(ang)]))
    return np.array(pts), np.array(nrm), np.array(tan)


def _sphere_half(center, radius, n):
    """Fibonacci points on the x > 0 hemisphere."""
    pts, nrm, tan = [], [], []
    i = 0
    golden = np.pi * (3 - np.sqrt(5))
    total = 2 * n
    while len(pts) < n:
        y = 1 - 2 * (i + 0.5) / total
        r = np.sqrt(1 - y * y)
        th = golden * i
        d = np.array([r * np.cos(th), y, r * np.sin(th)])
        i += 1
        if d[0] <= 1e-3:
            continue
        pts.append(center + radius * d)
        nrm.append(d)
        t = np.cross([0.0, 1.0, 0.0], d)
        t = t / np.linalg.norm(t) if np.linalg.norm(t) > 1e-9 else np.array([1.0, 0.0, 0.0])
        tan.append(t)
    return np.array(pts), np.array(nrm), np.array(tan)


def _surfel_quaternions(normals, tangents) -> np.ndarray:
    """wxyz rotations whose local x follows the tangent and local z the normal."""
    t = tangents - (tangents * normals).sum(1, keepdims=True) * normals
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(normals, t)
    mats = np.stack([t, b, normals], axis=-1)
    return Rotation.from_matrix(mats).as_quat()[:, [3, 0, 1, 2]]


def _mirror(pts, quats):
    """Reflection x -> -x of positions and of the rotations (M R M with M = diag(-1, 1, 1))."""
    return pts * [-1.0, 1.0, 1.0], quats * [1.0, 1.0, -1.0, -1.0]


def _humanoid_surface(rig: SkeletonRig):
    """Left-half surfels of the capsule body; the right half is produced by mirroring."""
    j = rig.rest_joints()
    top = ROOT_Y + 0.2
    groups = []
    pts, nrm, tan = _ring_points(np.array([0.0, ROOT_Y - 0.08, 0.0]), np.array([0.0, top + 0.36, 0.0]), 0.15,
                                 11, 6, half=True)
    groups.append((pts, nrm, tan, "torso"))
    pts, nrm, tan = _sphere_half(np.array([0.0, top + 0.52, 0.0]), 0.11, 22)
    groups.append((pts, nrm, tan, "head"))
    # ring phases avoid angle pairs (a, pi - a), which would tie in depth for a camera on the
    # sagittal plane and make the blend order of non-mirrored Gaussians side-dependent
    pts, nrm, tan = _ring_points(j[2], j[3], 0.065, 7, 8, phase=0.1)
    groups.append((pts, nrm, tan, "thigh"))
    pts, nrm, tan = _ring_points(j[3], j[3] - [0.0, SHIN - 0.03, 0.0], 0.05, 7, 8, phase=0.25)
    groups.append((pts, nrm, tan, "shin"))
    return groups


def _surface_color(part: str, p: np.ndarray) -> np.ndarray:
    if part == "head":
        return SKIN
    if part == "torso":
        return SHIRT_STRIPE if int(np.floor((p[1] - ROOT_Y) / 0.09)) % 3 == 2 else SHIRT
    if part == "shin" and p[1] < 0.1:
        return SHOES
    return PANTS


@dataclass
class AvatarTruth:
    """Generated avatar: the ground-truth model plus its prior rig, mesh and weights."""

    model: AvatarModel
    rig: SkeletonRig
    mesh_vertices: np.ndarray
    mesh_weights: np.ndarray
    normals: np.ndarray = field(repr=False, default=None)


def make_avatar(seed: int = 0, sh_degree: int = 3, surface_offset: float = 0.012,
                triplane_resolution: int = 64, triplane_features: int = 16) -> AvatarTruth:
    """Bilaterally symmetric capsule humanoid with one surfel Gaussian per prior vertex."""
    rig = humanoid_rig()
    rng = np.random.default_rng(seed)
    left_p, left_n, left_q, left_c = [], [], [], []
    for pts, nrm, tan, part in _humanoid_surface(rig):
        left_p.append(pts)
        left_n.append(nrm)
        left_q.append(_surfel_quaternions(nrm, tan))
        left_c.append(np.array([_surface_color(part, p) for p in pts]))
    lp, ln, lq, lc = (np.concatenate(x) for x in (left_p, left_n, left_q, left_c))
    lc = np.clip(lc + rng.normal(0, 0.02, lc.shape), 0, 1)
    rp, rq = _mirror(lp, lq)
    verts = np.concatenate([lp, rp])
    normals = np.concatenate([ln, ln * [-1.0, 1.0, 1.0]])
    quats = np.concatenate([lq, rq])
    colors = np.concatenate([lc, lc])
    weights = analytic_weights(verts, rig)

    n = verts.shape[0]
    gt_pos = verts + surface_offset * normals
    spacing = 0.045
    log_scales = np.log(np.tile([spacing, spacing, 0.008], (n, 1)))
    sh = torch.zeros(n, sh_basis_count(sh_degree), 3, dtype=DTYPE)
    sh[:, 0] = rgb_to_sh0(torch.as_tensor(colors, dtype=DTYPE))
    base = {
        "rotations": torch.as_tensor(quats, dtype=DTYPE),
        "log_scales": torch.as_tensor(log_scales, dtype=DTYPE),
        "opacity_logits": torch.full((n, 1), 4.0, dtype=DTYPE),
        "sh_coefficients": sh,
        "lbs_logits": torch.as_tensor(np.log(analytic_weights(gt_pos, rig) + 1e-12), dtype=DTYPE),
    }
    model = AvatarModel(rig, verts, weights, gt_pos, sh_degree=sh_degree, triplane_resolution=triplane_resolution,
                        triplane_features=triplane_features, base=base, seed=seed)
    with torch.no_grad():
        for p in model.heads.parameters():
            p.zero_()
    return AvatarTruth(model, rig, verts, weights, normals)


# ---------------------------------------------------------------------------
# motion + cameras


def walk_pose(rig: SkeletonRig, t: float, phase: float, path_radius: float = 0.6,
              contact_depth: float = 0.0, points=None, weights=None) -> Pose:
    """Cyclic gait along a circular path; the lowest point is placed at ``-contact_depth``.

    ``points``/``weights`` (canonical points and their skinning weights) define what touches
    the ground; by default the two leg-bone ends.
    """
    swing = 0.45 * np.sin(phase)
    rot = np.zeros((rig.n_joints, 3))
    ang = np.pi * t
    heading = ang + np.pi / 2
    rot[0] = [0.0, heading, 0.0]
    rot[1] = [0.05 * np.sin(2 * phase), 0.08 * np.sin(phase), 0.0]
    rot[2] = [-swing, 0.0, 0.0]
    rot[4] = [swing, 0.0, 0.0]
    rot[3] = [0.7 * max(0.0, np.sin(phase + 0.6)), 0.0, 0.0]
    rot[5] = [0.7 * max(0.0, np.sin(phase + 0.6 + np.pi)), 0.0, 0.0]
    xz = np.array([path_radius * np.sin(ang), path_radius * np.cos(ang)])
    trial = Pose(rot, [xz[0], 0.0, xz[1]])
    tf = joint_transforms(rig, trial)
    joints = rig.rest_joints()
    if points is None:
        points = np.stack([joints[3] - [0.0, SHIN, 0.0], joints[5] - [0.0, SHIN, 0.0]])
        weights = np.eye(rig.n_joints)[[3, 5]]
    posed = forward_skinning(torch.as_tensor(points, dtype=DTYPE), torch.as_tensor(weights, dtype=DTYPE), tf)
    lowest = float(posed[:, 1].min())
    return Pose(rot, [xz[0], -lowest - contact_depth, xz[1]])


def orbit_camera(rng: np.random.Generator, t: float, target, size: int = 64, radius: float = 4.0,
                 height: float = 1.6, fov: float = 50.0, jitter: float = 0.05) -> Camera:
    ang = 2 * np.pi * t + rng.uniform(-0.03, 0.03)
    r = radius + rng.uniform(-2, 2) * jitter
    eye = np.array([r * np.sin(ang), height + rng.uniform(-1, 1) * jitter, r * np.cos(ang)])
    look = np.asarray(target, dtype=np.float64) + rng.uniform(-1, 1, 3) * jitter
    return Camera.look_at(eye, look, width=size, height=size, fov_deg=fov)


def _f32(x: np.ndarray) -> np.ndarray:
    # stored frames are float32 on disk; keep the in-memory copy identical
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def render_truth(scene: GaussianField, avatar: AvatarModel, camera: Camera, pose: Pose):
    """Reference renders of the full composition and of the avatar alone."""
    with torch.no_grad():
        posed = avatar.deform(pose).field
        full = render_oracle(concat_fields(scene, posed), camera)
        alone = render_oracle(posed, camera)
    return full, alone


def make_sequence(scene: GaussianField, avatar: AvatarTruth | AvatarModel, n_frames: int = 60, seed: int = 0,
                  size: int = 64, test_every: int = 6, point_noise: float = 0.02) -> Sequence:
    """Orbiting, jittered camera around a walking avatar; every ``test_every``-th frame is held out."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    truth = avatar if isinstance(avatar, AvatarTruth) else AvatarTruth(avatar, avatar.rig, avatar.mesh_vertices,
                                                                      avatar.mesh_weights)
    model = truth.model
    rig = truth.rig
    with torch.no_grad():
        canon, sole_w = model.canonical_field()
        sole_w = sole_w.numpy()
    sole = canon.positions.numpy()
    frames = []
    for i in range(n_frames):
        rng = np.random.default_rng([seed, i])
        t = i / max(n_frames, 1)
        phase = 2 * np.pi * i / 12.0
        contact = 0.01 if i % 4 == 0 else 0.0
        pose = walk_pose(rig, t, phase, contact_depth=contact, points=sole, weights=sole_w)
        target = pose.translation + [0.0, 0.85, 0.0]
        cam = orbit_camera(rng, t, target, size=size)
        full, alone = render_truth(scene, model, cam, pose)
        image = _f32(full.color.numpy())
        depth = _f32(full.depth.numpy())
        mask = alone.alpha.numpy() > 0.5
        valid = full.alpha.numpy() > 0.5
        a = rng.uniform(0.5, 2.0)
        b = rng.uniform(-1.0, 1.0)
        est = a * depth + b
        sigma = 0.01 * (np.abs(est[valid]).mean() if valid.any() else 1.0)
        est = _f32(est + rng.normal(0.0, sigma, est.shape))
        frames.append(Frame(image, depth, est, mask, cam, pose))

    rng = np.random.default_rng([seed, 1_000_003])
    pts = scene.positions.detach().numpy()
    points = pts + rng.normal(0, point_noise, pts.shape)
    colors = np.clip(scene.sh_coefficients.detach().numpy()[:, 0] * SH_C0 + 0.5 + rng.normal(0, 0.02, pts.shape), 0, 1)
    test_ids = tuple(i for i in range(n_frames) if test_every and i % test_every == test_every - 1)
    meta = {"seed": seed, "generator_version": GENERATOR_VERSION, "size": size}
    return Sequence(frames, rig, truth.mesh_vertices, truth.mesh_weights, points, colors, test_ids, meta)


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over all pixels (or the masked ones), capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    if diff.size == 0:
        return float("nan")
    mse = float(diff.mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def image_ssim(a, b) -> float:
    return float(ssim(torch.as_tensor(np.asarray(a, dtype=np.float64)), torch.as_tensor(np.asarray(b, dtype=np.float64))))


def dilate(mask: np.ndarray, px: int = BAND_PX) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((2 * px + 1, 2 * px + 1), bool))


def mask_bbox(mask: np.ndarray, px: int = BAND_PX):
    """Bounding box (rows, cols slices) of the dilated mask, or None if empty."""
    grown = dilate(mask, px)
    if not grown.any():
        return None
    rows = np.flatnonzero(grown.any(1))
    cols = np.flatnonzero(grown.any(0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def boundary_band(mask: np.ndarray, px: int = BAND_PX) -> np.ndarray:
    return dilate(mask, px) & ~mask


@dataclass
class FrameScore:
    frame: int
    psnr: float
    ssim: float
    psnr_crop: float
    ssim_crop: float
    psnr_band: float


@dataclass
class QualityReport:
    frames: list[FrameScore]

    def mean(self, key: str) -> float:
        vals = [getattr(f, key) for f in self.frames]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def summary(self) -> dict[str, float]:
        return {k: self.mean(k) for k in ("psnr", "ssim", "psnr_crop", "ssim_crop", "psnr_band")}

    def to_dict(self) -> dict:
        return {"frames": [vars(f) for f in self.frames], "mean": self.summary}


def score_frame(frame_id: int, rendered: np.ndarray, target: np.ndarray, mask: np.ndarray) -> FrameScore:
    box = mask_bbox(mask)
    if box is None:
        crop_p = crop_s = float("nan")
    else:
        crop_p = psnr(rendered[box], target[box])
        crop_s = image_ssim(rendered[box], target[box])
    band = boundary_band(mask)
    band_p = psnr(rendered, target, band) if band.any() else float("nan")
    return FrameScore(frame_id, psnr(rendered, target), image_ssim(rendered, target), crop_p, crop_s, band_p)


def evaluate(state, held_out: Sequence, ids=None) -> QualityReport:
    """Score a trained state (see ``stm.train``) on the held-out frames of a sequence."""
    from .train import render_state

    ids = held_out.test_ids if ids is None else ids
    scores = []
    for i in ids:
        fr = held_out.frames[i]
        out = render_state(state, fr.camera, fr.pose, "full")
        scores.append(score_frame(i, out.color.numpy(), fr.image, fr.mask))
    return QualityReport(scores)


def ground_truth_state(scene: GaussianField, avatar: AvatarTruth | AvatarModel, seq: Sequence | None = None):
    from .train import state_from_fields

    model = avatar.model if isinstance(avatar, AvatarTruth) else avatar
    return state_from_fields(scene, model, seq.scene_extent() if seq is not None else 1.0)
