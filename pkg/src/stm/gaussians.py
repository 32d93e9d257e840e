"""Gaussian primitives: storage, covariance, kernel and view-dependent color."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from .errors import DegenerateRotationError, IncompatibleFieldsError, SingularCovarianceError

DTYPE = torch.float64

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# Names of the per-primitive attributes, in storage order.
ATTRIBUTES = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coefficients")


def sh_basis_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(math.sqrt(count))) - 1
    if degree < 0 or degree > 3 or (degree + 1) ** 2 != count:
        raise IncompatibleFieldsError(f"{count} SH coefficients is not a supported degree (0..3)")
    return degree


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


@dataclass
class GaussianField:
    """Columnar set of N Gaussian primitives holding raw (pre-activation) parameters.

    positions (N,3), rotations (N,4) unnormalized wxyz quaternions, log_scales (N,3),
    opacity_logits (N,1), sh_coefficients (N,B,3).
    """

    positions: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh_coefficients: torch.Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n, 1),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if tuple(value.shape) != shape:
                raise IncompatibleFieldsError(f"{name} has shape {tuple(value.shape)}, expected {shape}")
        sh = self.sh_coefficients
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise IncompatibleFieldsError(f"sh_coefficients has shape {tuple(sh.shape)}, expected ({n},B,3)")
        sh_degree_from_count(sh.shape[1])

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh_coefficients.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 3, dtype=DTYPE) -> "GaussianField":
        b = sh_basis_count(sh_degree)
        return cls(
            positions=torch.zeros(0, 3, dtype=dtype),
            rotations=torch.zeros(0, 4, dtype=dtype),
            log_scales=torch.zeros(0, 3, dtype=dtype),
            opacity_logits=torch.zeros(0, 1, dtype=dtype),
            sh_coefficients=torch.zeros(0, b, 3, dtype=dtype),
        )

    @classmethod
    def from_arrays(cls, positions, rotations, log_scales, opacity_logits, sh_coefficients) -> "GaussianField":
        opacity = as_tensor(opacity_logits)
        if opacity.ndim == 1:
            opacity = opacity[:, None]
        return cls(
            positions=as_tensor(positions),
            rotations=as_tensor(rotations),
            log_scales=as_tensor(log_scales),
            opacity_logits=opacity,
            sh_coefficients=as_tensor(sh_coefficients),
        )

    def attributes(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "GaussianField":
        return replace(self, **changes)

    def map(self, fn) -> "GaussianField":
        return GaussianField(**{k: fn(v) for k, v in self.attributes().items()})

    def detach(self) -> "GaussianField":
        return self.map(lambda t: t.detach().clone())

    def select(self, index) -> "GaussianField":
        return self.map(lambda t: t[index])

    def requires_grad_(self) -> "GaussianField":
        for t in self.attributes().values():
            t.requires_grad_(True)
        return self

    # activated views
    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def unit_rotations(self) -> torch.Tensor:
        return normalize_quaternions(self.rotations)

    def covariances(self) -> torch.Tensor:
        return covariance_from_params(self.rotations, self.log_scales)


def normalize_quaternions(q: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateRotationError("zero-norm quaternion")
    return q / norm


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (...,3,3) from (possibly unnormalized) wxyz quaternions."""
    q = normalize_quaternions(q)
    w, x, y, z = q.unbind(-1)
    rows = (
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    )
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(m: torch.Tensor) -> torch.Tensor:
    """wxyz unit quaternions from rotation matrices, w >= 0 where possible."""
    m = as_tensor(m)
    flat = m.reshape(-1, 3, 3)
    out = torch.empty(flat.shape[0], 4, dtype=m.dtype)
    for i, r in enumerate(flat):
        trace = r[0, 0] + r[1, 1] + r[2, 2]
        if trace > 0:
            s = torch.sqrt(trace + 1.0) * 2
            q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = torch.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
        elif r[1, 1] > r[2, 2]:
            s = torch.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
        else:
            s = torch.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
        q = torch.stack([torch.as_tensor(v, dtype=m.dtype) for v in q])
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(m.shape[:-2] + (4,))


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def covariance_from_params(rotations: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Batched R S S^T R^T with S = diag(exp(log_scale))."""
    r = quaternion_to_matrix(rotations)
    m = r * torch.exp(log_scales).unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def build_covariance(rotation, log_scale) -> torch.Tensor:
    """3x3 covariance of a single primitive from a wxyz quaternion and per-axis log std."""
    cov = covariance_from_params(as_tensor(rotation), as_tensor(log_scale))
    # exact symmetrization; the product is symmetric only up to rounding
    return 0.5 * (cov + cov.transpose(-1, -2))


def eval_gaussian(cov, mean, x) -> torch.Tensor:
    """Unnormalized Gaussian kernel exp(-1/2 (x-mu)^T cov^-1 (x-mu))."""
    cov = as_tensor(cov)
    chol, info = torch.linalg.cholesky_ex(cov)
    if int(info) != 0:
        raise SingularCovarianceError("covariance is singular or not positive definite")
    d = (as_tensor(x) - as_tensor(mean)).unsqueeze(-1)
    y = torch.linalg.solve_triangular(chol, d, upper=False)
    return torch.exp(-0.5 * (y * y).sum())


def sh_basis(directions: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis (N, (degree+1)^2) at unit directions (N,3), splatting sign convention."""
    x, y, z = directions.unbind(-1)
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return torch.stack(out, dim=-1)


def sh_to_color(sh: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """Batched color (N,3): basis contraction, +0.5 shift, clamp to [0,1]."""
    basis = sh_basis(directions, sh_degree_from_count(sh.shape[-2]))
    raw = (basis.unsqueeze(-1) * sh).sum(dim=-2)
    return torch.clamp(raw + 0.5, 0.0, 1.0)


def eval_sh_color(sh_coefficients, view_direction) -> torch.Tensor:
    sh = as_tensor(sh_coefficients)
    d = as_tensor(view_direction)
    if abs(float(torch.linalg.vector_norm(d)) - 1.0) > 1e-6:
        raise ValueError("view_direction must be unit length")
    return sh_to_color(sh[None], d[None])[0]


def rgb_to_sh0(rgb) -> torch.Tensor:
    return (as_tensor(rgb) - 0.5) / SH_C0


def concat_fields(a: GaussianField, b: GaussianField) -> GaussianField:
    """Rows of a followed by rows of b."""
    if a.sh_coefficients.shape[1] != b.sh_coefficients.shape[1]:
        raise IncompatibleFieldsError(f"SH degree mismatch: {a.sh_degree} vs {b.sh_degree}")
    return GaussianField(
        **{
            name: torch.cat([getattr(a, name), getattr(b, name)], dim=0)
            for name in ATTRIBUTES
        }
    )
