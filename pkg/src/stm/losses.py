"""Training objectives: photometric, SSIM, Pearson depth, LBS prior and their weighted sum."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateDepthError, NonFiniteLossError, ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 0.8
    ssim: float = 0.2
    lpips: float = 1.0
    lbs: float = 100.0
    depth: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rgb_l1(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(rendered, target)
    return (rendered - target).abs().mean()


def _gaussian_1d(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _as_nchw(img: torch.Tensor) -> torch.Tensor:
    # (H, W) or (H, W, C) -> (C, 1, H, W) so every channel is filtered independently
    if img.dim() == 2:
        img = img[..., None]
    return img.permute(2, 0, 1)[:, None]


def ssim(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over valid (unpadded) windows and channels; images are (H, W[, C])."""
    _check_shapes(rendered, target)
    x, y = _as_nchw(rendered), _as_nchw(target)
    h, w = x.shape[-2:]
    # the window shrinks to fit images smaller than 11 px
    gy = _gaussian_1d(min(SSIM_WINDOW, h), SSIM_SIGMA, x.dtype)
    gx = _gaussian_1d(min(SSIM_WINDOW, w), SSIM_SIGMA, x.dtype)
    c = x.shape[0]
    # separable window applied to all five moment maps in one batch
    stack = torch.cat([x, y, x * x, y * y, x * y], dim=0)
    stack = F.conv2d(F.conv2d(stack, gy.view(1, 1, -1, 1)), gx.view(1, 1, 1, -1))
    mu1, mu2, ex2, ey2, exy = stack.split(c, dim=0)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = ex2 - mu1_sq
    sigma2_sq = ey2 - mu2_sq
    sigma12 = exy - mu12
    num = (2 * mu12 + SSIM_C1) * (2 * sigma12 + SSIM_C2)
    den = (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    return (num / den).mean()


def pearson_depth(rendered_depth: torch.Tensor, estimated_depth: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """1 - Pearson correlation between the two depth maps over valid pixels."""
    _check_shapes(rendered_depth, estimated_depth)
    a, b = rendered_depth.reshape(-1), estimated_depth.reshape(-1)
    if mask is not None:
        m = mask.reshape(-1).bool()
        a, b = a[m], b[m]
    if a.numel() < 2:
        raise DegenerateDepthError("fewer than two valid depth pixels")
    a = a - a.mean()
    b = b - b.mean()
    va, vb = (a * a).sum(), (b * b).sum()
    if float(va.detach()) <= 0.0 or float(vb.detach()) <= 0.0:
        raise DegenerateDepthError("depth map has zero variance")
    return 1.0 - (a * b).sum() / torch.sqrt(va * vb)


def lbs_loss(weights: torch.Tensor, prior: torch.Tensor, raw_sum: bool = False) -> torch.Tensor:
    """Squared Frobenius distance to the prior, averaged over rows unless ``raw_sum``."""
    _check_shapes(weights, prior)
    sq = ((weights - prior) ** 2).sum()
    if raw_sum or weights.shape[0] == 0:
        return sq
    return sq / weights.shape[0]


_LPIPS_SCORER = None


def register_lpips(scorer) -> None:
    """Install a perceptual scorer ``scorer(rendered, target) -> scalar tensor``; None removes it."""
    global _LPIPS_SCORER
    _LPIPS_SCORER = scorer


def lpips_registered() -> bool:
    return _LPIPS_SCORER is not None


def lpips(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if _LPIPS_SCORER is None:
        return rendered.new_zeros(())
    return _LPIPS_SCORER(rendered, target)


TERMS = ("rgb", "rgb_avatar", "ssim", "ssim_avatar", "lpips", "lpips_avatar", "lbs", "depth")


@dataclass
class LossReport:
    """Per-term values (``ssim`` terms hold 1 - SSIM) and the weighted total as tensors."""

    rgb: torch.Tensor
    rgb_avatar: torch.Tensor
    ssim: torch.Tensor
    ssim_avatar: torch.Tensor
    lpips: torch.Tensor
    lpips_avatar: torch.Tensor
    lbs: torch.Tensor
    depth: torch.Tensor
    total: torch.Tensor

    def values(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in TERMS + ("total",)}

    def recomputed_total(self, weights: LossWeights) -> float:
        v = self.values()
        return (weights.rgb * (v["rgb"] + v["rgb_avatar"]) + weights.ssim * (v["ssim"] + v["ssim_avatar"])
                + weights.lpips * (v["lpips"] + v["lpips_avatar"]) + weights.lbs * v["lbs"]
                + weights.depth * v["depth"])


def weighted_total(terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    return (weights.rgb * (terms["rgb"] + terms["rgb_avatar"])
            + weights.ssim * (terms["ssim"] + terms["ssim_avatar"])
            + weights.lpips * (terms["lpips"] + terms["lpips_avatar"])
            + weights.lbs * terms["lbs"]
            + weights.depth * terms["depth"])


def total_loss(full_color: torch.Tensor, target: torch.Tensor, weights: LossWeights = LossWeights(), *,
               avatar_color: torch.Tensor | None = None, avatar_target: torch.Tensor | None = None,
               rendered_depth: torch.Tensor | None = None, estimated_depth: torch.Tensor | None = None,
               depth_mask: torch.Tensor | None = None, lbs_weights: torch.Tensor | None = None,
               lbs_prior: torch.Tensor | None = None, lbs_raw_sum: bool = False) -> LossReport:
    """Weighted objective over the full render, the avatar-only render, depth and skinning terms.

    Terms whose inputs are missing (or whose weight is zero) contribute an exact zero.
    A degenerate depth map skips the depth term with a warning.
    """
    zero = full_color.new_zeros(())
    terms = dict.fromkeys(TERMS, zero)
    terms["rgb"] = rgb_l1(full_color, target)
    if weights.ssim > 0:
        terms["ssim"] = 1.0 - ssim(full_color, target)
    if weights.lpips > 0:
        terms["lpips"] = lpips(full_color, target)
    if avatar_color is not None and avatar_target is not None:
        terms["rgb_avatar"] = rgb_l1(avatar_color, avatar_target)
        if weights.ssim > 0:
            terms["ssim_avatar"] = 1.0 - ssim(avatar_color, avatar_target)
        if weights.lpips > 0:
            terms["lpips_avatar"] = lpips(avatar_color, avatar_target)
    if lbs_weights is not None and lbs_prior is not None and weights.lbs > 0:
        terms["lbs"] = lbs_loss(lbs_weights, lbs_prior, raw_sum=lbs_raw_sum)
    if rendered_depth is not None and estimated_depth is not None and weights.depth > 0:
        try:
            terms["depth"] = pearson_depth(rendered_depth, estimated_depth, depth_mask)
        except DegenerateDepthError as exc:
            warnings.warn(f"depth term skipped: {exc}", stacklevel=2)
    total = weighted_total(terms, weights)
    if not math.isfinite(float(total.detach())):
        raise NonFiniteLossError(f"non-finite loss: { {k: float(v.detach()) for k, v in terms.items()} }")
    return LossReport(**terms, total=total)
