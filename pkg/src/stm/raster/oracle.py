"""Reference renderer: every pixel blends every primitive after one global sort.

Independent of the tile path: projection, covariance and color are recomputed
in plain numpy and no splat is culled by footprint.
"""

from __future__ import annotations

import numpy as np
import torch

from ..camera import Camera
from ..gaussians import SH_C0, SH_C1, SH_C2, SH_C3, GaussianField
from .render import COV2D_FLOOR, NEAR_CLIP, RenderOutput


def _rotation_matrices(q):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def _sh_colors(sh, dirs):
    n_basis = sh.shape[1]
    x, y, z = dirs.T
    basis = [np.full_like(x, SH_C0)]
    if n_basis > 1:
        basis += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if n_basis > 4:
        basis += [
            SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y),
        ]
    if n_basis > 9:
        basis += [
            SH_C3[0] * y * (3 * x * x - y * y), SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * z * z - x * x - y * y), SH_C3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y),
            SH_C3[4] * x * (4 * z * z - x * x - y * y), SH_C3[5] * z * (x * x - y * y),
            SH_C3[6] * x * (x * x - 3 * y * y),
        ]
    basis = np.stack(basis, -1)
    return np.clip(np.einsum("nb,nbc->nc", basis, sh) + 0.5, 0.0, 1.0)


def render_oracle(field: GaussianField, camera: Camera, background=(0.0, 0.0, 0.0),
                  alpha_max: float = 0.99, transmittance_min: float = 1e-4,
                  alpha_min: float = 1e-10) -> RenderOutput:
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    color = np.empty((h, w, 3))
    depth_img = np.zeros((h, w))
    alpha_img = np.zeros((h, w))
    color[:] = bg

    mu = field.positions.detach().numpy().astype(np.float64)
    if mu.shape[0] > 0:
        rot = camera.rotation
        p = mu @ rot.T + camera.translation
        front = p[:, 2] > NEAR_CLIP
        idx = np.flatnonzero(front)
        if idx.size:
            p = p[idx]
            order = np.lexsort((idx, p[:, 2]))
            idx, p = idx[order], p[order]
            r = _rotation_matrices(field.rotations.detach().numpy()[idx])
            s = np.exp(field.log_scales.detach().numpy()[idx])
            cov3 = np.einsum("nij,nj,nkj->nik", r, s * s, r)
            z = p[:, 2]
            jac = np.zeros((idx.size, 2, 3))
            jac[:, 0, 0] = camera.fx / z
            jac[:, 0, 2] = -camera.fx * p[:, 0] / (z * z)
            jac[:, 1, 1] = camera.fy / z
            jac[:, 1, 2] = -camera.fy * p[:, 1] / (z * z)
            t = jac @ rot
            cov2 = t @ cov3 @ np.transpose(t, (0, 2, 1)) + COV2D_FLOOR * np.eye(2)
            inv = np.linalg.inv(cov2)
            mean = np.stack([camera.fx * p[:, 0] / z + camera.cx, camera.fy * p[:, 1] / z + camera.cy], -1)
            dirs = mu[idx] - camera.center
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            cols = _sh_colors(field.sh_coefficients.detach().numpy()[idx], dirs)
            opac = 1.0 / (1.0 + np.exp(-field.opacity_logits.detach().numpy()[idx, 0]))

            for py in range(h):
                px = np.arange(w, dtype=np.float64)
                dx = px[:, None] - mean[None, :, 0]
                dy = py - mean[None, :, 1]
                q = inv[:, 0, 0] * dx * dx + (inv[:, 0, 1] + inv[:, 1, 0]) * dx * dy + inv[:, 1, 1] * dy * dy
                alpha = opac * np.exp(-0.5 * q)
                alpha = np.where(alpha < alpha_min, 0.0, np.minimum(alpha, alpha_max))
                trans_after = np.cumprod(1.0 - alpha, axis=1)
                trans_before = np.concatenate([np.ones((w, 1)), trans_after[:, :-1]], axis=1)
                # a splat is blended iff transmittance before it has not dropped below the cutoff
                used = trans_before >= transmittance_min
                weight = np.where(used, alpha * trans_before, 0.0)
                t_final = np.where(used, trans_after, 1.0).min(axis=1)
                color[py] = weight @ cols + t_final[:, None] * bg
                depth_img[py] = weight @ z
                alpha_img[py] = 1.0 - t_final

    return RenderOutput(
        color=torch.from_numpy(color),
        depth=torch.from_numpy(depth_img),
        alpha=torch.from_numpy(alpha_img),
    )
