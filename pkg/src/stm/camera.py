"""Pinhole camera with a rigid world-to-camera pose."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCameraError


@dataclass(frozen=True)
class Camera:
    """Pixel centers sit at integer coordinates: column j, row i -> (x=j, y=i).

    ``rotation``/``translation`` map world points into camera space (x right, y down,
    z forward): p_cam = R p_world + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidCameraError("image size must be at least 1x1")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise InvalidCameraError("rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, width=64, height=64, fov_deg=60.0, cx=None, cy=None):
        """Camera at ``eye`` looking at ``target`` with world ``up`` pointing to image-up."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        # re-orthonormalize to keep the 1e-9 invariant under accumulated rounding
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(
            fx=f,
            fy=f,
            cx=(width - 1) / 2 if cx is None else cx,
            cy=(height - 1) / 2 if cy is None else cy,
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ eye,
        )

    def project_points(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], -1)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
        )
