"""Joint optimization of the scene field, the avatar and the mapping stack."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from .avatar import AvatarModel, Pose, SkeletonRig
from .camera import Camera
from .dataset import Sequence
from .errors import ConfigurationError, NonFiniteLossError, StmError
from .fieldio import field_from_ply_bytes, ply_bytes
from .gaussians import (
    ATTRIBUTES,
    DTYPE,
    GaussianField,
    normalize_quaternions,
    quaternion_to_matrix,
    rgb_to_sh0,
    sh_basis_count,
)
from .losses import TERMS, LossReport, LossWeights, total_loss
from .mapping import HIDDEN as MAPPING_HIDDEN
from .mapping import MODES, MappingStack, map_then_concat
from .raster import RasterSettings, project, render_projected

CHECKPOINT_MAGIC = b"STMCKPT1"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Schedule:
    """Exponential decay from ``start`` to ``end`` over the run."""

    start: float
    end: float

    def __post_init__(self):
        if not (self.start >= self.end > 0):
            raise ConfigurationError(f"schedule needs start >= end > 0, got {self.start} -> {self.end}")


@dataclass(frozen=True)
class MappingConfig:
    mode: str = "shared"
    attributes: tuple[str, ...] = ATTRIBUTES
    hidden: int = MAPPING_HIDDEN

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mapping.mode must be one of {MODES}")
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if set(self.attributes) - set(ATTRIBUTES):
            raise ConfigurationError(f"unknown mapped attributes {self.attributes}")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 20000
    position_lr: Schedule = Schedule(1.6e-4, 1.6e-6)
    mapping_lr: Schedule = Schedule(1e-3, 1e-5)
    sh_lr: float = 2.5e-3
    sh_rest_factor: float = 0.05
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    network_lr: float = 1e-3
    lbs_logit_lr: float = 1e-3
    scene_densify_interval: int = 100
    avatar_densify_interval: int = 600
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    percent_dense: float = 0.01
    densify_from: int = 500
    densify_until_fraction: float = 0.75
    max_scene_primitives: int = 1000
    max_avatar_primitives: int = 800
    knn_k: int = 6
    lbs_raw_sum: bool = False
    weights: LossWeights = LossWeights()
    mapping: MappingConfig = MappingConfig()
    sh_degree: int = 3
    triplane_resolution: int = 64
    triplane_features: int = 16
    head_hidden: int = 128
    init_opacity: float = 0.1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.total_iterations < 0:
            raise ConfigurationError("total_iterations must be >= 0")
        if self.scene_densify_interval < 1 or self.avatar_densify_interval < 1:
            raise ConfigurationError("densify intervals must be >= 1")
        if self.knn_k < 1:
            raise ConfigurationError("knn_k must be >= 1")
        object.__setattr__(self, "background", tuple(float(b) for b in self.background))

    @property
    def densify_until(self) -> int:
        return int(self.densify_until_fraction * self.total_iterations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mapping"]["attributes"] = list(self.mapping.attributes)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("position_lr", "mapping_lr"):
            if key in kw and isinstance(kw[key], dict):
                kw[key] = Schedule(**kw[key])
        if "weights" in kw and isinstance(kw["weights"], dict):
            kw["weights"] = LossWeights.from_dict(kw["weights"])
        if "mapping" in kw and isinstance(kw["mapping"], dict):
            kw["mapping"] = MappingConfig(**kw["mapping"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# optimizer


def lr_at(iteration: int, start: float, end: float, total: int) -> float:
    """start * (end / start) ** (iteration / total)."""
    if total <= 0:
        return start
    t = min(max(iteration / total, 0.0), 1.0)
    return start * (end / start) ** t


@dataclass
class AdamMoments:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, t: torch.Tensor) -> "AdamMoments":
        return cls(torch.zeros_like(t, dtype=DTYPE), torch.zeros_like(t, dtype=DTYPE), 0)


def adam_update(param: torch.Tensor, grad: torch.Tensor | None, moments: AdamMoments, lr,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One bias-corrected Adam step in place; a non-finite gradient skips the update."""
    if grad is None:
        return True
    if not bool(torch.isfinite(grad).all()):
        return False
    with torch.no_grad():
        moments.step += 1
        moments.m.mul_(beta1).add_(grad, alpha=1 - beta1)
        moments.v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
        m_hat = moments.m / (1 - beta1 ** moments.step)
        v_hat = moments.v / (1 - beta2 ** moments.step)
        param.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))
    return True


def adam_step(params, grads, moments, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam over parallel lists; returns (params, moments, per-parameter ok flags)."""
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    ok = [adam_update(p, g, m, l, beta1, beta2, eps) for p, g, m, l in zip(params, grads, moments, lrs)]
    return params, moments, ok


# ---------------------------------------------------------------------------
# state


AVATAR_ROWS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coefficients", "lbs_logits")


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def _knn_log_scales(points: np.ndarray, k: int = 3) -> torch.Tensor:
    n = points.shape[0]
    if n < 2:
        return torch.full((n, 3), math.log(0.05), dtype=DTYPE)
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    mean_sq = (np.asarray(d).reshape(n, -1)[:, 1:] ** 2).mean(1)
    s = np.sqrt(np.maximum(mean_sq, 1e-14))
    return torch.tensor(np.log(s)[:, None].repeat(3, 1), dtype=DTYPE)


class TrainState:
    """Everything needed to continue a run bit-exactly."""

    def __init__(self, config: TrainConfig, scene: GaussianField, avatar: AvatarModel, mapping: MappingStack,
                 extent: float, rng: np.random.Generator | None = None, iteration: int = 0):
        self.config = config
        self.scene = scene.detach().requires_grad_()
        self.avatar = avatar
        self.mapping = mapping
        self.extent = float(extent)
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.iteration = iteration
        self.moments: dict[str, AdamMoments] = {name: AdamMoments.zeros_like(t) for name, t in self.parameters()}
        self.reset_stats()

    # parameter registry -----------------------------------------------------
    def parameters(self) -> list[tuple[str, torch.Tensor]]:
        out = [(f"scene.{name}", getattr(self.scene, name)) for name in ATTRIBUTES]
        a = self.avatar
        out.append(("avatar.positions", a.canonical_positions))
        for name in AVATAR_ROWS[1:]:
            out.append((f"avatar.{name}", getattr(a, "base_" + name)))
        out.append(("avatar.triplane", a.triplane.planes))
        out += [(f"avatar.heads.{n}", p) for n, p in a.heads.named_parameters()]
        out += [(f"mapping.{n}", p) for n, p in self.mapping.named_parameters()]
        return out

    def reset_stats(self) -> None:
        self.scene_grad_accum = np.zeros(len(self.scene))
        self.scene_grad_count = np.zeros(len(self.scene))
        self.avatar_grad_accum = np.zeros(self.avatar.n_gaussians)
        self.avatar_grad_count = np.zeros(self.avatar.n_gaussians)

    @property
    def n_scene(self) -> int:
        return len(self.scene)

    @property
    def n_avatar(self) -> int:
        return self.avatar.n_gaussians


def lr_kind(name: str) -> str:
    """Which learning-rate rule a parameter follows."""
    # the offset head writes positions directly, so it moves at the position rate
    if name in ("scene.positions", "avatar.positions") or name.startswith("avatar.heads.geometry."):
        return "position"
    if name.startswith("mapping."):
        return "mapping"
    if name.startswith(("avatar.triplane", "avatar.heads.")):
        return "network"
    tail = name.split(".", 1)[1]
    return {
        "rotations": "rotation",
        "log_scales": "scale",
        "opacity_logits": "opacity",
        "sh_coefficients": "sh",
        "lbs_logits": "lbs_logit",
    }[tail]


def learning_rate(config: TrainConfig, kind: str, iteration: int):
    total = config.total_iterations
    if kind == "position":
        return lr_at(iteration, config.position_lr.start, config.position_lr.end, total)
    if kind == "mapping":
        return lr_at(iteration, config.mapping_lr.start, config.mapping_lr.end, total)
    return {
        "network": config.network_lr,
        "rotation": config.rotation_lr,
        "scale": config.scale_lr,
        "opacity": config.opacity_lr,
        "sh": config.sh_lr,
        "lbs_logit": config.lbs_logit_lr,
    }[kind]


def lr_bindings(state: TrainState) -> dict[str, tuple[str, float, float]]:
    """Parameter name -> (rule, lr at iteration 0, lr at the final iteration)."""
    cfg = state.config
    return {
        name: (lr_kind(name), learning_rate(cfg, lr_kind(name), 0), learning_rate(cfg, lr_kind(name), cfg.total_iterations))
        for name, _ in state.parameters()
    }


def _sh_lr(config: TrainConfig, lr: float, n_basis: int) -> torch.Tensor:
    scale = torch.full((1, n_basis, 1), config.sh_rest_factor, dtype=DTYPE)
    scale[:, 0] = 1.0
    return lr * scale


def init_state(data: Sequence, config: TrainConfig) -> TrainState:
    """Scene seeded from the sparse points, avatar seeded one Gaussian per prior vertex."""
    nb = sh_basis_count(config.sh_degree)
    pts = np.asarray(data.points, dtype=np.float64)
    n = pts.shape[0]
    sh = torch.zeros(n, nb, 3, dtype=DTYPE)
    sh[:, 0] = rgb_to_sh0(torch.as_tensor(data.point_colors, dtype=DTYPE))
    rot = torch.zeros(n, 4, dtype=DTYPE)
    rot[:, 0] = 1.0
    scene = GaussianField(
        positions=torch.tensor(pts, dtype=DTYPE),
        rotations=rot,
        log_scales=_knn_log_scales(pts),
        opacity_logits=torch.full((n, 1), _logit(config.init_opacity), dtype=DTYPE),
        sh_coefficients=sh,
    )
    verts = np.asarray(data.mesh_vertices, dtype=np.float64)
    m = verts.shape[0]
    base = {
        "log_scales": _knn_log_scales(verts),
        "opacity_logits": torch.full((m, 1), _logit(config.init_opacity), dtype=DTYPE),
        "lbs_logits": torch.log(torch.as_tensor(data.mesh_weights, dtype=DTYPE) + 1e-8),
    }
    avatar = AvatarModel(data.rig, verts, data.mesh_weights, verts, sh_degree=config.sh_degree,
                         triplane_resolution=config.triplane_resolution, triplane_features=config.triplane_features,
                         head_hidden=config.head_hidden, base=base, seed=config.seed)
    mapping = MappingStack(config.sh_degree, config.mapping.mode, config.mapping.attributes,
                           hidden=config.mapping.hidden, seed=config.seed)
    return TrainState(config, scene, avatar, mapping, data.scene_extent())


def state_from_fields(scene: GaussianField, avatar: AvatarModel, extent: float = 1.0,
                      config: TrainConfig | None = None) -> TrainState:
    """Wrap known fields (e.g. ground truth) as an unmapped state for rendering and scoring."""
    config = config or TrainConfig(mapping=MappingConfig(mode="off"), sh_degree=scene.sh_degree)
    mapping = MappingStack(scene.sh_degree, config.mapping.mode, config.mapping.attributes,
                           hidden=config.mapping.hidden, seed=config.seed)
    return TrainState(config, scene, avatar, mapping, extent)


# ---------------------------------------------------------------------------
# rendering


class FrameRender(NamedTuple):
    full: object  # RenderOutput
    avatar: object | None
    projected: object
    lbs_weights: torch.Tensor
    canonical_positions: torch.Tensor
    n_scene: int


def raster_settings(config: TrainConfig) -> RasterSettings:
    return RasterSettings(deterministic=config.deterministic)


def forward_frame(state: TrainState, camera: Camera, pose: Pose, with_avatar_only: bool = True) -> FrameRender:
    posed = state.avatar.deform(pose)
    composite = map_then_concat(state.mapping, state.scene, posed.field)
    proj = project(composite, camera)
    settings = raster_settings(state.config)
    full = render_projected(proj, state.config.background, settings)
    av = None
    if with_avatar_only:
        av = render_projected(proj.select(slice(state.n_scene, None)), (0.0, 0.0, 0.0), settings)
    return FrameRender(full, av, proj, posed.lbs_weights, posed.canonical.positions, state.n_scene)


def render_state(state: TrainState, camera: Camera, pose: Pose | None = None, layer: str = "full",
                 background=None):
    """Render the mapped composite, the mapped scene alone or the mapped avatar alone."""
    bg = state.config.background if background is None else background
    settings = raster_settings(state.config)
    with torch.no_grad():
        if layer == "scene":
            field = state.mapping.apply(state.scene, "scene")
        else:
            if pose is None:
                pose = Pose.identity(state.avatar.rig.n_joints)
            posed = state.avatar.deform(pose).field
            if layer == "avatar":
                field = state.mapping.apply(posed, "avatar")
            elif layer == "full":
                field = map_then_concat(state.mapping, state.scene, posed)
            else:
                raise ConfigurationError(f"unknown layer {layer!r}")
        return render_projected(project(field, camera), bg, settings)


# ---------------------------------------------------------------------------
# densification


class DensifyResult(NamedTuple):
    rows: dict  # attribute name -> tensor (detached)
    source: np.ndarray  # origin row of every output row
    fresh: np.ndarray  # True where the row is new (zero optimizer moments)
    n_clone: int
    n_split: int
    n_pruned: int


def _split_offsets(rotations: torch.Tensor, scales: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    noise = torch.tensor(rng.standard_normal(scales.shape), dtype=DTYPE)
    rot = quaternion_to_matrix(normalize_quaternions(rotations))
    return torch.einsum("nij,nj->ni", rot, noise * scales)


def densify_rows(rows: dict, grad_avg: np.ndarray, rotations: torch.Tensor, log_scales: torch.Tensor,
                 opacity_logits: torch.Tensor, config: TrainConfig, extent: float, rng: np.random.Generator,
                 max_rows: int | None = None, position_key: str = "positions",
                 scale_key: str = "log_scales") -> DensifyResult:
    """Clone small high-gradient rows, split large ones in two, then prune transparent rows.

    ``rotations``/``log_scales``/``opacity_logits`` are the attributes the rules are evaluated
    on (for the avatar these include head outputs); ``rows`` holds the stored parameters.
    """
    n = grad_avg.shape[0]
    with torch.no_grad():
        scales = torch.exp(log_scales)
        max_scale = scales.max(dim=1).values.numpy()
        high = grad_avg >= config.densify_grad_threshold
        small = max_scale <= config.percent_dense * extent
        clone = high & small
        split = high & ~small
        if max_rows is not None:
            budget = max(0, max_rows - n)
            cand = np.flatnonzero(clone | split)
            # a clone and a split each add one row net
            if cand.size > budget:
                # keep the largest gradients within the budget, ties by index
                order = cand[np.lexsort((cand, -grad_avg[cand]))]
                chosen = order[:budget]
                mask = np.zeros(n, bool)
                mask[chosen] = True
                clone &= mask
                split &= mask
        clone_idx = np.flatnonzero(clone)
        split_idx = np.flatnonzero(split)

        keep_idx = np.flatnonzero(~split)
        parts = {k: [v[torch.as_tensor(keep_idx)], v[torch.as_tensor(clone_idx)]] for k, v in rows.items()}
        source = [keep_idx, clone_idx]
        fresh = [np.zeros(keep_idx.size, bool), np.ones(clone_idx.size, bool)]
        if split_idx.size:
            si = torch.as_tensor(split_idx)
            rep = torch.cat([si, si])
            pos = rows[position_key][rep] + _split_offsets(rotations[rep], scales[rep], rng)
            for k, v in rows.items():
                if k == position_key:
                    parts[k].append(pos)
                elif k == scale_key:
                    parts[k].append(v[rep] - math.log(config.split_factor))
                else:
                    parts[k].append(v[rep])
            source.append(np.concatenate([split_idx, split_idx]))
            fresh.append(np.ones(2 * split_idx.size, bool))
        out = {k: torch.cat(v) for k, v in parts.items()}
        source = np.concatenate(source)
        fresh = np.concatenate(fresh)

        opac = torch.sigmoid(opacity_logits[:, 0]).numpy()[source]
        live = opac >= config.prune_opacity
        n_pruned = int((~live).sum())
        if n_pruned:
            li = torch.as_tensor(np.flatnonzero(live))
            out = {k: v[li] for k, v in out.items()}
            source, fresh = source[live], fresh[live]
    return DensifyResult(out, source, fresh, int(clone_idx.size), int(split_idx.size), n_pruned)


def densify_and_prune(field: GaussianField, grad_avg, config: TrainConfig, scene_extent: float,
                      rng: np.random.Generator | None = None, max_rows: int | None = None) -> DensifyResult:
    """Field-level densification; the result's ``rows`` form the new field's attributes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = {k: v.detach() for k, v in field.attributes().items()}
    return densify_rows(rows, np.asarray(grad_avg, dtype=np.float64), rows["rotations"], rows["log_scales"],
                        rows["opacity_logits"], config, scene_extent, rng, max_rows)


def _remap_moments(old: AdamMoments, result: DensifyResult) -> AdamMoments:
    keep = ~result.fresh
    m = torch.zeros((result.source.size,) + tuple(old.m.shape[1:]), dtype=DTYPE)
    v = torch.zeros_like(m)
    idx = torch.as_tensor(np.flatnonzero(keep))
    src = torch.as_tensor(result.source[keep])
    m[idx] = old.m[src]
    v[idx] = old.v[src]
    return AdamMoments(m, v, old.step)


def densify_scene(state: TrainState) -> DensifyResult:
    cfg = state.config
    avg = state.scene_grad_accum / np.maximum(state.scene_grad_count, 1)
    res = densify_and_prune(state.scene, avg, cfg, state.extent, state.rng, cfg.max_scene_primitives)
    for name in ATTRIBUTES:
        key = f"scene.{name}"
        state.moments[key] = _remap_moments(state.moments[key], res)
    state.scene = GaussianField(**res.rows).detach().requires_grad_()
    state.scene_grad_accum = np.zeros(len(state.scene))
    state.scene_grad_count = np.zeros(len(state.scene))
    return res


def densify_avatar(state: TrainState) -> DensifyResult:
    cfg = state.config
    av = state.avatar
    with torch.no_grad():
        canon, _ = av.canonical_field()
    rows = {"positions": av.canonical_positions.detach()}
    for name in AVATAR_ROWS[1:]:
        rows[name] = getattr(av, "base_" + name).detach()
    avg = state.avatar_grad_accum / np.maximum(state.avatar_grad_count, 1)
    res = densify_rows(rows, avg, canon.rotations, canon.log_scales, canon.opacity_logits, cfg, state.extent,
                       state.rng, cfg.max_avatar_primitives)
    for name in AVATAR_ROWS:
        key = f"avatar.{name}"
        state.moments[key] = _remap_moments(state.moments[key], res)
    av.set_rows(res.rows)
    if res.fresh.any():
        # new rows start on the k-NN prior at their own position; split children land about one
        # scale away from the parent, where the parent's blend weights can belong to another limb
        with torch.no_grad():
            out = av.head_outputs()
            fresh = torch.as_tensor(np.flatnonzero(res.fresh))
            pos = (av.canonical_positions + out.offset)[fresh].numpy()
            prior = torch.as_tensor(av.knn_prior_at(pos, cfg.knn_k), dtype=DTYPE)
            av.base_lbs_logits[fresh] = torch.log(prior + 1e-8) - out.lbs_logits[fresh]
    state.avatar_grad_accum = np.zeros(av.n_gaussians)
    state.avatar_grad_count = np.zeros(av.n_gaussians)
    return res


def check_moment_shapes(state: TrainState) -> None:
    for name, p in state.parameters():
        mo = state.moments[name]
        if mo.m.shape != p.shape or mo.v.shape != p.shape:
            raise StmError(f"optimizer moments of {name} have shape {tuple(mo.m.shape)}, parameter {tuple(p.shape)}")


# ---------------------------------------------------------------------------
# training loop


class PreparedData:
    """Frames converted to tensors once."""

    def __init__(self, data: Sequence):
        self.sequence = data
        self.train_ids = data.train_ids
        if not self.train_ids:
            raise ConfigurationError("sequence has no training frames")
        self.tensors = {i: data.frames[i].tensors() for i in self.train_ids}


def _accumulate_screen_grads(state: TrainState, fr: FrameRender) -> None:
    g = fr.projected.mean2d.grad
    if g is None:
        return
    h, w = fr.projected.height, fr.projected.width
    ndc = torch.stack([g[:, 0] * (0.5 * w), g[:, 1] * (0.5 * h)], dim=-1)
    norm = torch.linalg.vector_norm(ndc, dim=-1).numpy()
    mean = fr.projected.mean2d.detach().numpy()
    pad_x, pad_y = 0.15 * w, 0.15 * h
    seen = (fr.projected.visible & (mean[:, 0] > -pad_x) & (mean[:, 0] < w - 1 + pad_x)
            & (mean[:, 1] > -pad_y) & (mean[:, 1] < h - 1 + pad_y))
    ns = fr.n_scene
    state.scene_grad_accum += np.where(seen[:ns], norm[:ns], 0.0)
    state.scene_grad_count += seen[:ns]
    state.avatar_grad_accum += np.where(seen[ns:], norm[ns:], 0.0)
    state.avatar_grad_count += seen[ns:]


def compute_loss(state: TrainState, frame, tensors: dict) -> tuple[LossReport, FrameRender]:
    cfg = state.config
    fr = forward_frame(state, frame.camera, frame.pose)
    fr.projected.mean2d.retain_grad()
    mask = tensors["mask"]
    avatar_target = tensors["image"] * mask[..., None]
    with torch.no_grad():
        prior = torch.as_tensor(
            state.avatar.knn_prior_at(fr.canonical_positions.detach().numpy(), cfg.knn_k),
            dtype=DTYPE,
        )
    report = total_loss(
        fr.full.color, tensors["image"], cfg.weights,
        avatar_color=fr.avatar.color, avatar_target=avatar_target,
        rendered_depth=fr.full.depth, estimated_depth=tensors["depth_estimate"],
        depth_mask=(fr.full.alpha.detach() > 0.5),
        lbs_weights=fr.lbs_weights, lbs_prior=prior, lbs_raw_sum=cfg.lbs_raw_sum,
    )
    return report, fr


def train_step(state: TrainState, data: PreparedData) -> tuple[LossReport, int]:
    """One iteration on a randomly drawn training frame; returns the loss report and frame id."""
    cfg = state.config
    fid = int(data.train_ids[int(state.rng.integers(len(data.train_ids)))])
    frame = data.sequence.frames[fid]
    params = state.parameters()
    for _, p in params:
        p.grad = None
    report, fr = compute_loss(state, frame, data.tensors[fid])
    report.total.backward()
    _accumulate_screen_grads(state, fr)

    it = state.iteration
    nb = state.scene.sh_coefficients.shape[1]
    for name, p in params:
        kind = lr_kind(name)
        lr = learning_rate(cfg, kind, it)
        if kind == "sh":
            lr = _sh_lr(cfg, lr, nb)
        adam_update(p, p.grad, state.moments[name], lr)
    state.iteration += 1

    it = state.iteration
    if cfg.densify_from <= it <= cfg.densify_until:
        if it % cfg.scene_densify_interval == 0:
            densify_scene(state)
            check_moment_shapes(state)
        if it % cfg.avatar_densify_interval == 0:
            densify_avatar(state)
            check_moment_shapes(state)
    return report, fid


CSV_FIELDS = ("iteration", "frame") + TERMS + ("total", "n_scene", "n_avatar")


def train(data: Sequence, config: TrainConfig | None = None, state: TrainState | None = None,
          iterations: int | None = None, out_dir=None, checkpoint_every: int = 0,
          progress: Callable[[int, LossReport], None] | None = None) -> TrainState:
    """Run (or continue) optimization until ``iterations`` more steps or the configured total.

    With ``out_dir`` set, per-iteration metrics go to ``metrics.csv`` and the final state to
    ``checkpoint.stm``. A non-finite loss writes ``crash.stm`` and raises.
    """
    if state is None:
        state = init_state(data, config or TrainConfig())
    cfg = state.config
    end = cfg.total_iterations if iterations is None else state.iteration + iterations
    prepared = PreparedData(data)
    out = Path(out_dir) if out_dir is not None else None
    writer = handle = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        fresh = state.iteration == 0 or not csv_path.exists()
        handle = csv_path.open("w" if fresh else "a", newline="")
        writer = csv.writer(handle)
        if fresh:
            writer.writerow(CSV_FIELDS)
    try:
        while state.iteration < end:
            try:
                report, fid = train_step(state, prepared)
            except NonFiniteLossError:
                if out is not None:
                    save_checkpoint(state, out / "crash.stm")
                raise
            if writer is not None:
                v = report.values()
                writer.writerow([state.iteration, fid] + [repr(v[t]) for t in TERMS] + [repr(v["total"]),
                                                                                     state.n_scene, state.n_avatar])
            if progress is not None:
                progress(state.iteration, report)
            if out is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoint.stm")
    finally:
        if handle is not None:
            handle.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint.stm")
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_entry(blobs: list, name: str, t) -> dict:
    arr = np.ascontiguousarray(t.detach().numpy() if isinstance(t, torch.Tensor) else t)
    dtype = {np.dtype(np.float64): "<f8", np.dtype(bool): "|b1", np.dtype(np.int64): "<i8"}[arr.dtype]
    data = arr.astype(dtype).tobytes()
    blobs.append(data)
    return {"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(data)}


def checkpoint_bytes(state: TrainState) -> bytes:
    blobs: list[bytes] = []
    entries = []
    av = state.avatar
    canon = GaussianField(
        positions=av.canonical_positions, rotations=av.base_rotations, log_scales=av.base_log_scales,
        opacity_logits=av.base_opacity_logits, sh_coefficients=av.base_sh_coefficients,
    )
    for name, f in (("scene.ply", state.scene), ("avatar.ply", canon)):
        data = ply_bytes(f)
        blobs.append(data)
        entries.append({"name": name, "dtype": "ply", "shape": [], "nbytes": len(data)})
    tensors = {
        "avatar.lbs_logits": av.base_lbs_logits,
        "avatar.mesh_vertices": av.mesh_vertices,
        "avatar.mesh_weights": av.mesh_weights,
        "avatar.bbox_min": av.triplane.bbox_min,
        "avatar.bbox_max": av.triplane.bbox_max,
        "avatar.triplane": av.triplane.planes,
        "scene.grad_accum": state.scene_grad_accum,
        "scene.grad_count": state.scene_grad_count,
        "avatar.grad_accum": state.avatar_grad_accum,
        "avatar.grad_count": state.avatar_grad_count,
    }
    tensors.update({f"avatar.heads.{n}": p for n, p in av.heads.named_parameters()})
    tensors.update({f"mapping.{n}": p for n, p in state.mapping.named_parameters()})
    for name in sorted(state.moments):
        tensors[f"moments.m.{name}"] = state.moments[name].m
        tensors[f"moments.v.{name}"] = state.moments[name].v
    for name in sorted(tensors):
        entries.append(_tensor_entry(blobs, name, tensors[name]))
    header = {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "extent": state.extent,
        "rng": state.rng.bit_generator.state,
        "rig": av.rig.to_dict(),
        "moment_steps": {name: state.moments[name].step for name in sorted(state.moments)},
        "entries": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def checkpoint_from_bytes(data: bytes) -> TrainState:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise StmError("not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    offset = 16 + n
    blobs = {}
    for e in header["entries"]:
        raw = data[offset : offset + e["nbytes"]]
        offset += e["nbytes"]
        if e["dtype"] == "ply":
            blobs[e["name"]] = field_from_ply_bytes(raw)
        else:
            blobs[e["name"]] = torch.from_numpy(np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy())
    config = TrainConfig.from_dict(header["config"])
    rig = SkeletonRig.from_dict(header["rig"])
    canon = blobs["avatar.ply"]
    base = {
        "rotations": canon.rotations,
        "log_scales": canon.log_scales,
        "opacity_logits": canon.opacity_logits,
        "sh_coefficients": canon.sh_coefficients,
        "lbs_logits": blobs["avatar.lbs_logits"],
    }
    avatar = AvatarModel(rig, blobs["avatar.mesh_vertices"].numpy(), blobs["avatar.mesh_weights"].numpy(),
                         canon.positions, sh_degree=config.sh_degree,
                         triplane_resolution=config.triplane_resolution, triplane_features=config.triplane_features,
                         head_hidden=config.head_hidden, base=base, seed=config.seed)
    with torch.no_grad():
        avatar.triplane.bbox_min.copy_(blobs["avatar.bbox_min"])
        avatar.triplane.bbox_max.copy_(blobs["avatar.bbox_max"])
        avatar.triplane.planes.copy_(blobs["avatar.triplane"])
        for name, p in avatar.heads.named_parameters():
            p.copy_(blobs[f"avatar.heads.{name}"])
    mapping = MappingStack(config.sh_degree, config.mapping.mode, config.mapping.attributes,
                           hidden=config.mapping.hidden, seed=config.seed)
    with torch.no_grad():
        for name, p in mapping.named_parameters():
            p.copy_(blobs[f"mapping.{name}"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = TrainState(config, blobs["scene.ply"], avatar, mapping, header["extent"], rng, header["iteration"])
    for name in state.moments:
        state.moments[name] = AdamMoments(blobs[f"moments.m.{name}"], blobs[f"moments.v.{name}"],
                                          int(header["moment_steps"][name]))
    state.scene_grad_accum = blobs["scene.grad_accum"].numpy().copy()
    state.scene_grad_count = blobs["scene.grad_count"].numpy().copy()
    state.avatar_grad_accum = blobs["avatar.grad_accum"].numpy().copy()
    state.avatar_grad_count = blobs["avatar.grad_count"].numpy().copy()
    return state


def load_checkpoint(path) -> TrainState:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_digest(path_or_state) -> str:
    data = checkpoint_bytes(path_or_state) if isinstance(path_or_state, TrainState) else Path(path_or_state).read_bytes()
    return hashlib.sha256(data).hexdigest()
