"""Per-attribute residual mappers that move scene and avatar primitives into a common space."""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigurationError
from .gaussians import ATTRIBUTES, DTYPE, GaussianField, concat_fields

MODES = ("shared", "separate", "off")
HIDDEN = 64


def attribute_widths(sh_degree: int) -> dict[str, int]:
    n_basis = (sh_degree + 1) ** 2
    return {
        "positions": 3,
        "rotations": 4,
        "log_scales": 3,
        "opacity_logits": 1,
        "sh_coefficients": 3 * n_basis,
    }


class AttributeMapper(nn.Module):
    """v -> v + W2 relu(W1 v + b1) + b2, identity when the second layer is zero."""

    def __init__(self, dim: int, hidden: int = HIDDEN, generator: torch.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.linear1 = nn.Linear(dim, hidden, dtype=DTYPE)
        self.linear2 = nn.Linear(hidden, dim, dtype=DTYPE)
        bound = 1.0 / math.sqrt(dim)
        with torch.no_grad():
            self.linear1.weight.uniform_(-bound, bound, generator=generator)
            self.linear1.bias.uniform_(-bound, bound, generator=generator)
            self.linear2.weight.zero_()
            self.linear2.bias.zero_()

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return map_attribute(self, values)


def map_attribute(mapper: AttributeMapper, values: torch.Tensor) -> torch.Tensor:
    if values.shape[-1] != mapper.dim:
        raise ConfigurationError(f"mapper expects width {mapper.dim}, got {values.shape[-1]}")
    return values + mapper.linear2(torch.relu(mapper.linear1(values)))


class MappingStack(nn.Module):
    """One mapper per attribute (shared), two per attribute (separate), or none (off).

    ``attributes`` restricts which attributes are mapped; the rest pass through.
    """

    def __init__(self, sh_degree: int = 3, mode: str = "shared", attributes=ATTRIBUTES,
                 hidden: int = HIDDEN, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ConfigurationError(f"unknown mapping mode {mode!r}")
        unknown = set(attributes) - set(ATTRIBUTES)
        if unknown:
            raise ConfigurationError(f"unknown attributes {sorted(unknown)}")
        self.mode = mode
        self.sh_degree = sh_degree
        self.attributes = tuple(a for a in ATTRIBUTES if a in attributes)
        gen = torch.Generator().manual_seed(seed)
        widths = attribute_widths(sh_degree)
        self.scene = nn.ModuleDict()
        self.avatar = nn.ModuleDict()
        if mode == "off":
            return
        for name in self.attributes:
            self.scene[name] = AttributeMapper(widths[name], hidden, gen)
            if mode == "separate":
                self.avatar[name] = AttributeMapper(widths[name], hidden, gen)

    def mapper_for(self, name: str, which: str) -> AttributeMapper | None:
        if self.mode == "off" or name not in self.scene:
            return None
        if which == "avatar" and self.mode == "separate":
            return self.avatar[name]
        return self.scene[name]

    def apply(self, field: GaussianField, which: str) -> GaussianField:
        if self.mode == "off":
            return field
        if field.sh_degree != self.sh_degree:
            raise ConfigurationError("field SH degree does not match the mapping stack")
        out = {}
        for name, value in field.attributes().items():
            mapper = self.mapper_for(name, which)
            if mapper is None or value.shape[0] == 0:
                out[name] = value
                continue
            flat = value.reshape(value.shape[0], -1)
            out[name] = map_attribute(mapper, flat).reshape(value.shape)
        return GaussianField(**out)


def map_fields(stack: MappingStack, scene: GaussianField, avatar: GaussianField):
    if stack.mode == "shared":
        # one batched pass over both fields, then split back
        n = len(scene)
        both = stack.apply(concat_fields(scene, avatar), "scene")
        return both.select(slice(0, n)), both.select(slice(n, None))
    return stack.apply(scene, "scene"), stack.apply(avatar, "avatar")


def map_then_concat(stack: MappingStack, scene: GaussianField, avatar: GaussianField) -> GaussianField:
    if stack.mode == "shared":
        return stack.apply(concat_fields(scene, avatar), "scene")
    mapped_scene, mapped_avatar = map_fields(stack, scene, avatar)
    return concat_fields(mapped_scene, mapped_avatar)
