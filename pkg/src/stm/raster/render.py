"""Differentiable tile rasterizer.

Preprocessing (projection, covariance, SH color, activations) is written in torch
and differentiated by autograd; per-pixel blending runs in numba with a
hand-derived reverse pass (``_BlendSplats``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
import torch

from ..camera import Camera
from ..gaussians import DTYPE, GaussianField, as_tensor, covariance_from_params, sh_to_color
from . import kernels

# TBB in this image is too old for numba; prefer OpenMP unless the user chose.
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "omp")

NEAR_CLIP = 0.01
COV2D_FLOOR = 0.3


@dataclass(frozen=True)
class RasterSettings:
    tile: int = 16
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4
    # contributions below this are skipped; 1e-10 keeps the tile renderer within
    # 1e-6 of the full-sum oracle for up to ~1000 splats per pixel
    alpha_min: float = 1e-10
    deterministic: bool = False


DEFAULT_SETTINGS = RasterSettings()


def configure_threads(n: int | None = None) -> int:
    """Cap numba worker threads (``STM_THREADS`` env var when ``n`` is None)."""
    if n is None:
        env = os.environ.get("STM_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


configure_threads()


@dataclass
class Splat2D:
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    view_depth: torch.Tensor
    color: torch.Tensor | None = None
    opacity: torch.Tensor | None = None


@dataclass
class RenderOutput:
    color: torch.Tensor  # H x W x 3
    depth: torch.Tensor  # H x W
    alpha: torch.Tensor  # H x W

    def numpy(self) -> dict[str, np.ndarray]:
        return {
            "color": self.color.detach().numpy(),
            "depth": self.depth.detach().numpy(),
            "alpha": self.alpha.detach().numpy(),
        }


@dataclass
class Projected:
    """Screen-space splats for every primitive of a field (culled rows flagged)."""

    mean2d: torch.Tensor  # N x 2
    cov2d: torch.Tensor  # N x 3 (a, b, c) of [[a, b], [b, c]]
    conic: torch.Tensor  # N x 3 inverse of cov2d, same packing
    depth: torch.Tensor  # N
    colors: torch.Tensor  # N x 3
    opacity: torch.Tensor  # N
    visible: np.ndarray  # N bool
    height: int
    width: int

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def select(self, rows) -> "Projected":
        return Projected(
            self.mean2d[rows], self.cov2d[rows], self.conic[rows], self.depth[rows],
            self.colors[rows], self.opacity[rows], self.visible[rows], self.height, self.width,
        )


def _camera_tensors(camera: Camera, dtype):
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    trans = torch.as_tensor(camera.translation, dtype=dtype)
    return rot, trans


def _project_covariance(positions, cov3, camera: Camera):
    rot, trans = _camera_tensors(camera, positions.dtype)
    p = positions @ rot.T + trans
    z = p[:, 2]
    visible = (z > NEAR_CLIP).detach().numpy().copy()
    # culled rows get a harmless depth so their (unused) gradients stay finite
    zs = torch.where(torch.as_tensor(visible), z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    mean2d = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], dim=-1)
    zero = torch.zeros_like(zs)
    jac = torch.stack(
        [
            torch.stack([camera.fx / zs, zero, -camera.fx * x / (zs * zs)], dim=-1),
            torch.stack([zero, camera.fy / zs, -camera.fy * y / (zs * zs)], dim=-1),
        ],
        dim=-2,
    )
    m = jac @ rot
    cov2 = m @ cov3 @ m.transpose(-1, -2)
    cov2d = torch.stack([cov2[:, 0, 0] + COV2D_FLOOR, cov2[:, 0, 1], cov2[:, 1, 1] + COV2D_FLOOR], dim=-1)
    return mean2d, cov2d, z, visible


def _conic(cov2d):
    a, b, c = cov2d.unbind(-1)
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def project_gaussian(mean, cov, camera: Camera) -> Splat2D | None:
    """Screen-space splat of one 3D Gaussian; None when behind the near clip."""
    mean = as_tensor(mean).reshape(1, 3)
    cov = as_tensor(cov).reshape(1, 3, 3)
    mean2d, cov2d, z, visible = _project_covariance(mean, cov, camera)
    if not visible[0]:
        return None
    a, b, c = cov2d[0]
    return Splat2D(mean2d=mean2d[0], cov2d=torch.stack([torch.stack([a, b]), torch.stack([b, c])]), view_depth=z[0])


def project(field: GaussianField, camera: Camera) -> Projected:
    cov3 = covariance_from_params(field.rotations, field.log_scales)
    mean2d, cov2d, z, visible = _project_covariance(field.positions, cov3, camera)
    center = torch.as_tensor(camera.center, dtype=field.positions.dtype)
    dirs = field.positions - center
    dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    colors = sh_to_color(field.sh_coefficients, dirs)
    opacity = torch.sigmoid(field.opacity_logits[:, 0])
    return Projected(mean2d, cov2d, _conic(cov2d), z, colors, opacity, visible, camera.height, camera.width)


def _splat_reach(cov2d: np.ndarray, opacity: np.ndarray, alpha_min: float):
    """Quadratic-form cutoff and axis-aligned half extents beyond which alpha < ``alpha_min``.

    The ellipse ``d^T cov^-1 d <= Q`` spans ``sqrt(Q * cov_xx)`` horizontally and
    ``sqrt(Q * cov_yy)`` vertically; both bounds carry a small safety margin.
    """
    with np.errstate(divide="ignore"):
        log_ratio = np.log(np.maximum(opacity, 1e-300) / alpha_min)
    q_max = 2.0 * np.maximum(log_ratio, 0.0)
    q_cut = q_max * (1.0 + 1e-12) + 1e-12
    extent = np.sqrt(q_max[:, None] * cov2d[:, [0, 2]]) * (1.0 + 1e-9) + 1e-9
    return q_cut, extent, log_ratio > 0


def _sorted_order(depth: np.ndarray, keep: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(keep)
    # front-to-back by view depth, equal depths by primitive index
    return idx[np.lexsort((idx, depth[idx]))].astype(np.int64)


class _BlendSplats(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, colors, opacity, depth, cov2d, visible, background, height, width, settings):
        s: RasterSettings = settings
        m = mean2d.detach().numpy()
        cn = conic.detach().numpy()
        col = colors.detach().numpy()
        op = opacity.detach().numpy()
        dp = depth.detach().numpy()
        bg = np.asarray(background, dtype=np.float64)
        q_cut, extent, reachable = _splat_reach(cov2d.detach().numpy(), op, s.alpha_min)
        order = _sorted_order(dp, visible & reachable)
        packed = np.empty((order.size, kernels.PACKED_WIDTH))
        packed[:, [kernels.MX, kernels.MY]] = m[order]
        packed[:, [kernels.CA, kernels.CB, kernels.CC]] = cn[order]
        packed[:, kernels.OP] = op[order]
        packed[:, kernels.QCUT] = q_cut[order]
        packed[:, [kernels.R, kernels.G, kernels.B]] = col[order]
        packed[:, kernels.DEPTH] = dp[order]
        offsets, ids = kernels.bin_splats(packed[:, :2].copy(), extent[order], height, width, s.tile)

        out_color = np.empty((height, width, 3))
        out_depth = np.empty((height, width))
        out_trans = np.empty((height, width))
        out_last = np.empty((height, width), dtype=np.int64)
        kernels.forward_tiles(
            offsets, ids, packed, bg, height, width, s.tile,
            s.alpha_min, s.alpha_max, s.transmittance_min,
            out_color, out_depth, out_trans, out_last,
        )
        ctx.raster = (offsets, ids, packed, order, m.shape[0], bg, height, width, s, out_trans, out_last)
        dtype = mean2d.dtype
        return (
            torch.from_numpy(out_color).to(dtype),
            torch.from_numpy(out_depth).to(dtype),
            torch.from_numpy(1.0 - out_trans).to(dtype),
        )

    @staticmethod
    def backward(ctx, g_color, g_depth, g_alpha):
        offsets, ids, packed, order, n_total, bg, height, width, s, out_trans, out_last = ctx.raster
        n = packed.shape[0]
        chunks = 1 if s.deterministic else numba.get_num_threads()
        d_mean2d = np.zeros((chunks, n, 2))
        d_conic = np.zeros((chunks, n, 3))
        d_colors = np.zeros((chunks, n, 3))
        d_opacity = np.zeros((chunks, n))
        d_depth = np.zeros((chunks, n))

        def grad_array(g, shape):
            if g is None:
                return np.zeros(shape)
            return np.ascontiguousarray(g.detach().numpy(), dtype=np.float64)

        kernels.backward_tiles(
            offsets, ids, packed, bg, height, width, s.tile, s.alpha_min, s.alpha_max,
            out_trans, out_last,
            grad_array(g_color, (height, width, 3)),
            grad_array(g_depth, (height, width)),
            grad_array(g_alpha, (height, width)),
            d_mean2d, d_conic, d_colors, d_opacity, d_depth,
        )
        dtype = g_color.dtype if g_color is not None else DTYPE

        def reduce(buf):
            # fixed chunk order: reductions are reproducible for a given chunk count
            total = buf[0].copy()
            for k in range(1, buf.shape[0]):
                total += buf[k]
            # packed rows back to primitive rows
            full = np.zeros((n_total,) + total.shape[1:])
            full[order] = total
            return torch.from_numpy(full).to(dtype)

        return (
            reduce(d_mean2d), reduce(d_conic), reduce(d_colors), reduce(d_opacity), reduce(d_depth),
            None, None, None, None, None, None,
        )


def _background_output(background, height, width, dtype=DTYPE) -> RenderOutput:
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    return RenderOutput(
        color=bg.expand(height, width, 3).clone(),
        depth=torch.zeros(height, width, dtype=dtype),
        alpha=torch.zeros(height, width, dtype=dtype),
    )


def render_projected(proj: Projected, background=(0.0, 0.0, 0.0), settings: RasterSettings = DEFAULT_SETTINGS) -> RenderOutput:
    if len(proj) == 0 or not proj.visible.any():
        out = _background_output(background, proj.height, proj.width, proj.mean2d.dtype)
        if proj.mean2d.requires_grad:
            # keep the graph connected so callers can always backpropagate
            out.color = out.color + 0.0 * proj.mean2d.sum()
        return out
    color, depth, alpha = _BlendSplats.apply(
        proj.mean2d, proj.conic, proj.colors, proj.opacity, proj.depth, proj.cov2d,
        proj.visible, tuple(float(v) for v in background), proj.height, proj.width, settings,
    )
    return RenderOutput(color=color, depth=depth, alpha=alpha)


def render(field: GaussianField, camera: Camera, background=(0.0, 0.0, 0.0), settings: RasterSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Render a field: depth-sorted front-to-back alpha blending per 16x16 tile."""
    if len(field) == 0:
        return _background_output(background, camera.height, camera.width, field.positions.dtype)
    return render_projected(project(field, camera), background, settings)


@dataclass
class RasterGradients:
    d_position: torch.Tensor
    d_rotation: torch.Tensor
    d_log_scale: torch.Tensor
    d_opacity_logit: torch.Tensor
    d_sh: torch.Tensor


def render_backward(field: GaussianField, camera: Camera, background, d_color, d_depth,
                    settings: RasterSettings = DEFAULT_SETTINGS) -> RasterGradients:
    """Gradients of <d_color, color> + <d_depth, depth> w.r.t. every raw attribute."""
    leaf = field.detach().requires_grad_()
    attrs = list(leaf.attributes().values())
    if len(leaf) == 0:
        return RasterGradients(*[torch.zeros_like(t) for t in attrs])
    out = render(leaf, camera, background, settings)
    objective = (out.color * as_tensor(d_color)).sum() + (out.depth * as_tensor(d_depth)).sum()
    grads = torch.autograd.grad(objective, attrs, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, attrs)]
    return RasterGradients(*grads)
