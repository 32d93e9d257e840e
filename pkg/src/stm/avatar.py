"""LBS-driven deformable Gaussian avatar.

Canonical Gaussians sit at prior-mesh vertices; a triplane feature of each
canonical position feeds three small MLP heads (geometry offset, appearance,
transform + skinning weights). Forward skinning poses the result per frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .errors import ConfigurationError, InvalidWeightsError
from .gaussians import DTYPE, GaussianField, as_tensor, quaternion_multiply, quaternion_to_matrix, sh_basis_count


@dataclass
class SkeletonRig:
    """Joint tree in topological order; ``offsets[k]`` is joint k's rest position
    relative to its parent (the root's offset is its rest world position)."""

    parents: tuple[int, ...]
    offsets: np.ndarray
    names: tuple[str, ...] = ()
    shape_basis: np.ndarray | None = None  # (S, K, 3) joint-offset correction per shape coefficient

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.parents = tuple(int(p) for p in self.parents)
        k = len(self.parents)
        if self.offsets.shape[0] != k:
            raise ConfigurationError("one offset per joint required")
        if k == 0 or self.parents[0] != -1:
            raise ConfigurationError("joint 0 must be the root (parent -1)")
        for j in range(1, k):
            if not 0 <= self.parents[j] < j:
                raise ConfigurationError(f"joint {j} parent {self.parents[j]} breaks topological order")
            if np.linalg.norm(self.offsets[j]) <= 0:
                raise ConfigurationError(f"joint {j} has a zero-length bone")
        if not self.names:
            self.names = tuple(f"joint{j}" for j in range(k))
        if self.shape_basis is not None:
            self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64).reshape(-1, k, 3)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def rest_joints(self, shape=None) -> np.ndarray:
        offsets = self.offsets.copy()
        if shape is not None and self.shape_basis is not None:
            offsets = offsets + np.einsum("s,skc->kc", np.asarray(shape, dtype=np.float64), self.shape_basis)
        joints = np.zeros_like(offsets)
        for j, p in enumerate(self.parents):
            joints[j] = offsets[j] if p < 0 else joints[p] + offsets[j]
        return joints

    def to_dict(self) -> dict:
        d = {
            "joints": [
                {"name": n, "parent": p, "offset": o.tolist()}
                for n, p, o in zip(self.names, self.parents, self.offsets)
            ]
        }
        if self.shape_basis is not None:
            d["shape_basis"] = self.shape_basis.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonRig":
        joints = d["joints"]
        return cls(
            parents=[j["parent"] for j in joints],
            offsets=[j["offset"] for j in joints],
            names=tuple(j["name"] for j in joints),
            shape_basis=d.get("shape_basis"),
        )


@dataclass
class Pose:
    rotations: np.ndarray  # (K, 3) axis-angle, radians
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.rotations).all() and np.isfinite(self.translation).all()):
            raise ConfigurationError("pose entries must be finite")

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def to_dict(self) -> dict:
        return {"rotations": self.rotations.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["rotations"], d.get("translation", [0.0, 0.0, 0.0]))


def load_poses(path) -> list[Pose]:
    return [Pose.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_poses(poses, path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in poses]))


def axis_angle_to_quaternion(v: torch.Tensor) -> torch.Tensor:
    theta = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 as x -> 0
    small = theta < 1e-12
    k = torch.where(small, torch.full_like(theta, 0.5), torch.sin(half) / torch.where(small, torch.ones_like(theta), theta))
    return torch.cat([torch.cos(half), v * k], dim=-1)


class JointTransforms(NamedTuple):
    rotations: torch.Tensor  # (K, 3, 3) B_k
    translations: torch.Tensor  # (K, 3) b_k
    quaternions: torch.Tensor  # (K, 4) unit wxyz of B_k, w >= 0


def joint_transforms(rig: SkeletonRig, pose: Pose, shape=None) -> JointTransforms:
    """Per-joint rigid maps from canonical (rest) space to posed space."""
    if pose.rotations.shape[0] != rig.n_joints:
        raise ConfigurationError(f"pose has {pose.rotations.shape[0]} joints, rig has {rig.n_joints}")
    rest = torch.as_tensor(rig.rest_joints(shape), dtype=DTYPE)
    local_q = axis_angle_to_quaternion(torch.as_tensor(pose.rotations, dtype=DTYPE))
    world_q = [None] * rig.n_joints
    world_p = [None] * rig.n_joints
    for j, p in enumerate(rig.parents):
        if p < 0:
            world_q[j] = local_q[j]
            world_p[j] = rest[j] + torch.as_tensor(pose.translation, dtype=DTYPE)
        else:
            world_q[j] = quaternion_multiply(world_q[p], local_q[j])
            world_p[j] = world_p[p] + quaternion_to_matrix(world_q[p]) @ (rest[j] - rest[p])
    quats = torch.stack(world_q)
    quats = torch.where(quats[:, :1] < 0, -quats, quats)
    rots = quaternion_to_matrix(quats)
    trans = torch.stack(world_p) - torch.einsum("kij,kj->ki", rots, rest)
    return JointTransforms(rots, trans, quats)


def forward_skinning(p_c, weights, transforms: JointTransforms, atol: float = 1e-6) -> torch.Tensor:
    """p_theta = sum_k w_k (B_k p_c + b_k)."""
    p_c = as_tensor(p_c)
    weights = as_tensor(weights)
    if weights.shape[0] and float((weights.detach().sum(-1) - 1.0).abs().max()) > atol:
        raise InvalidWeightsError("skinning weight rows must sum to 1")
    moved = torch.einsum("kij,nj->nki", transforms.rotations, p_c) + transforms.translations
    return torch.einsum("nk,nki->ni", weights, moved)


class Triplane(nn.Module):
    """Three axis-aligned R x R x F feature planes (XY, XZ, YZ) over a bounding box."""

    PLANE_AXES = ((0, 1), (0, 2), (1, 2))

    def __init__(self, bbox_min, bbox_max, resolution: int = 64, features: int = 16,
                 init_scale: float = 1e-4, generator: torch.Generator | None = None):
        super().__init__()
        if resolution < 2:
            raise ConfigurationError("triplane resolution must be >= 2")
        planes = (torch.rand(3, resolution, resolution, features, dtype=DTYPE, generator=generator) * 2 - 1) * init_scale
        self.planes = nn.Parameter(planes)
        self.register_buffer("bbox_min", as_tensor(bbox_min).reshape(3))
        self.register_buffer("bbox_max", as_tensor(bbox_max).reshape(3))

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def features(self) -> int:
        return self.planes.shape[3]

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        return query_triplane(self, positions)


def query_triplane(triplane: Triplane, positions) -> torch.Tensor:
    """Bilinear samples of the three planes, concatenated to (N, 3F)."""
    positions = as_tensor(positions)
    single = positions.ndim == 1
    if single:
        positions = positions[None]
    r = triplane.resolution
    u = (positions - triplane.bbox_min) / (triplane.bbox_max - triplane.bbox_min)
    grid = u.clamp(0.0, 1.0) * (r - 1)
    base = torch.floor(grid.detach()).clamp(0, r - 2).long()
    frac = grid - base
    out = []
    for plane, (a, b) in zip(triplane.planes, Triplane.PLANE_AXES):
        i, j = base[:, a], base[:, b]
        fi, fj = frac[:, a : a + 1], frac[:, b : b + 1]
        out.append(
            (1 - fi) * (1 - fj) * plane[i, j]
            + fi * (1 - fj) * plane[i + 1, j]
            + (1 - fi) * fj * plane[i, j + 1]
            + fi * fj * plane[i + 1, j + 1]
        )
    feat = torch.cat(out, dim=-1)
    return feat[0] if single else feat


class HeadOutputs(NamedTuple):
    offset: torch.Tensor  # (N, 3)
    sh: torch.Tensor  # (N, B, 3)
    opacity_logit: torch.Tensor  # (N, 1)
    rotation: torch.Tensor  # (N, 4)
    log_scale: torch.Tensor  # (N, 3)
    lbs_logits: torch.Tensor  # (N, K)


def _mlp(d_in: int, hidden: int, d_out: int, generator: torch.Generator | None) -> nn.Sequential:
    first = nn.Linear(d_in, hidden, dtype=DTYPE)
    last = nn.Linear(hidden, d_out, dtype=DTYPE)
    with torch.no_grad():
        bound = 1.0 / np.sqrt(d_in)
        first.weight.copy_((torch.rand(first.weight.shape, dtype=DTYPE, generator=generator) * 2 - 1) * bound)
        # zero bias: hidden units respond to the (spatially varying) triplane features rather than
        # acting as constants that would shift every Gaussian alike
        first.bias.zero_()
        # zero output layer: a fresh avatar starts exactly at its base attributes
        last.weight.zero_()
        last.bias.zero_()
    return nn.Sequential(first, nn.ReLU(), last)


class DeformationHeads(nn.Module):
    def __init__(self, feature_dim: int, n_joints: int, sh_degree: int = 3, hidden: int = 128,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.feature_dim = feature_dim
        self.n_joints = n_joints
        self.n_basis = sh_basis_count(sh_degree)
        self.geometry = _mlp(feature_dim, hidden, 3, generator)
        self.appearance = _mlp(feature_dim, hidden, 3 * self.n_basis + 1, generator)
        self.transform = _mlp(feature_dim, hidden, 4 + 3 + n_joints, generator)

    def forward(self, feature: torch.Tensor) -> HeadOutputs:
        return run_heads(self, feature)


def run_heads(heads: DeformationHeads, feature) -> HeadOutputs:
    feature = as_tensor(feature)
    if feature.shape[-1] != heads.feature_dim:
        raise ConfigurationError(f"feature width {feature.shape[-1]} != heads input {heads.feature_dim}")
    n = feature.shape[0]
    app = heads.appearance(feature)
    tr = heads.transform(feature)
    return HeadOutputs(
        offset=heads.geometry(feature),
        sh=app[:, : 3 * heads.n_basis].reshape(n, heads.n_basis, 3),
        opacity_logit=app[:, 3 * heads.n_basis :],
        rotation=tr[:, :4],
        log_scale=tr[:, 4:7],
        lbs_logits=tr[:, 7:],
    )


class PosedAvatar(NamedTuple):
    field: GaussianField
    lbs_weights: torch.Tensor  # (N, K)
    canonical: GaussianField


class AvatarModel(nn.Module):
    """Canonical Gaussians + triplane + heads + rig + prior mesh.

    Head outputs are added to learnable per-Gaussian base attributes; with zero
    heads the canonical field equals the base exactly.
    """

    def __init__(self, rig: SkeletonRig, mesh_vertices, mesh_weights, canonical_positions,
                 *, sh_degree: int = 3, triplane_resolution: int = 64, triplane_features: int = 16,
                 head_hidden: int = 128, bbox_padding: float = 0.1, base: dict | None = None, seed: int = 0):
        super().__init__()
        self.rig = rig
        self.mesh_vertices = np.asarray(mesh_vertices, dtype=np.float64)
        self.mesh_weights = np.asarray(mesh_weights, dtype=np.float64)
        if self.mesh_weights.shape != (self.mesh_vertices.shape[0], rig.n_joints):
            raise ConfigurationError("mesh weights must be (M, K)")
        self._mesh_tree = cKDTree(self.mesh_vertices)
        pos = as_tensor(canonical_positions)
        n = pos.shape[0]
        lo = self.mesh_vertices.min(0)
        hi = self.mesh_vertices.max(0)
        pad = bbox_padding * (hi - lo).max()
        gen = torch.Generator().manual_seed(int(seed))
        self.triplane = Triplane(lo - pad, hi + pad, triplane_resolution, triplane_features, generator=gen)
        self.heads = DeformationHeads(3 * triplane_features, rig.n_joints, sh_degree, hidden=head_hidden, generator=gen)
        self.canonical_positions = nn.Parameter(pos.clone())
        nb = sh_basis_count(sh_degree)
        base = dict(base or {})
        defaults = {
            "rotations": torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=DTYPE).repeat(n, 1),
            "log_scales": torch.full((n, 3), float(np.log(0.02)), dtype=DTYPE),
            "opacity_logits": torch.zeros(n, 1, dtype=DTYPE),
            "sh_coefficients": torch.zeros(n, nb, 3, dtype=DTYPE),
            "lbs_logits": torch.zeros(n, rig.n_joints, dtype=DTYPE),
        }
        for name, value in defaults.items():
            v = as_tensor(base[name]).reshape(value.shape) if name in base else value
            setattr(self, "base_" + name, nn.Parameter(v.clone()))

    @property
    def n_gaussians(self) -> int:
        return self.canonical_positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.heads.n_basis))) - 1

    def head_outputs(self) -> HeadOutputs:
        return run_heads(self.heads, query_triplane(self.triplane, self.canonical_positions))

    def canonical_field(self, outputs: HeadOutputs | None = None) -> tuple[GaussianField, torch.Tensor]:
        """Canonical Gaussians (offset applied) and softmax LBS weights."""
        o = self.head_outputs() if outputs is None else outputs
        canon = GaussianField(
            positions=self.canonical_positions + o.offset,
            rotations=self.base_rotations + o.rotation,
            log_scales=self.base_log_scales + o.log_scale,
            opacity_logits=self.base_opacity_logits + o.opacity_logit,
            sh_coefficients=self.base_sh_coefficients + o.sh,
        )
        weights = torch.softmax(self.base_lbs_logits + o.lbs_logits, dim=-1)
        return canon, weights

    def deform(self, pose: Pose, shape=None) -> PosedAvatar:
        canon, weights = self.canonical_field()
        tf = joint_transforms(self.rig, pose, shape)
        posed_pos = forward_skinning(canon.positions, weights, tf)
        blend = weights @ tf.quaternions
        blend = blend / torch.linalg.vector_norm(blend, dim=-1, keepdim=True)
        posed = canon.replace(positions=posed_pos, rotations=quaternion_multiply(blend, canon.rotations))
        return PosedAvatar(posed, weights, canon)

    def lbs_prior(self, k: int = 6) -> np.ndarray:
        return self.knn_prior_at(self.canonical_positions.detach().numpy(), k)

    def knn_prior_at(self, positions, k: int = 6) -> np.ndarray:
        return knn_lbs_prior(positions, self.mesh_vertices, self.mesh_weights, k, tree=self._mesh_tree)

    def set_rows(self, rows: dict) -> None:
        """Replace the per-Gaussian parameters (densification bookkeeping)."""
        self.canonical_positions = nn.Parameter(rows["positions"].detach().clone())
        for name in ("rotations", "log_scales", "opacity_logits", "sh_coefficients", "lbs_logits"):
            setattr(self, "base_" + name, nn.Parameter(rows[name].detach().clone()))


def pose_avatar(avatar: AvatarModel, pose: Pose, shape=None) -> GaussianField:
    return avatar.deform(pose, shape).field


def knn_lbs_prior(positions, mesh_vertices, mesh_weights, k: int = 6, eps: float = 1e-8, tree=None) -> np.ndarray:
    """Inverse-distance blend of the prior weights of each position's k nearest vertices."""
    positions = np.asarray(positions.detach() if isinstance(positions, torch.Tensor) else positions, dtype=np.float64)
    mesh_vertices = np.asarray(mesh_vertices, dtype=np.float64)
    mesh_weights = np.asarray(mesh_weights, dtype=np.float64)
    if mesh_vertices.shape[0] < k:
        raise ConfigurationError(f"need at least k={k} mesh vertices")
    tree = tree if tree is not None else cKDTree(mesh_vertices)
    positions = positions.reshape(-1, 3)
    _, idx = tree.query(positions, k=k)
    idx = idx.reshape(-1, k)
    # distances recomputed directly so they do not depend on the tree's internal arithmetic
    dist = np.sqrt(((mesh_vertices[idx] - positions[:, None, :]) ** 2).sum(axis=-1))
    inv = 1.0 / (dist + eps)
    inv = inv / inv.sum(axis=1, keepdims=True)
    return (inv[:, :, None] * mesh_weights[idx]).sum(axis=1)


def load_rig_json(path) -> tuple[SkeletonRig, np.ndarray, np.ndarray]:
    """Rig + prior mesh + per-vertex weights from the documented JSON schema."""
    doc = json.loads(Path(path).read_text())
    rig = SkeletonRig.from_dict(doc["rig"])
    verts = np.asarray(doc["mesh"]["vertices"], dtype=np.float64)
    weights = np.asarray(doc["mesh"]["weights"], dtype=np.float64)
    if weights.shape != (verts.shape[0], rig.n_joints):
        raise ConfigurationError("mesh weights must be (M, K)")
    return rig, verts, weights


def save_rig_json(rig: SkeletonRig, vertices, weights, path) -> None:
    doc = {
        "rig": rig.to_dict(),
        "mesh": {"vertices": np.asarray(vertices).tolist(), "weights": np.asarray(weights).tolist()},
    }
    Path(path).write_text(json.dumps(doc))
