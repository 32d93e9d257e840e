from .oracle import render_oracle
from .render import (
    COV2D_FLOOR,
    DEFAULT_SETTINGS,
    NEAR_CLIP,
    Projected,
    RasterGradients,
    RasterSettings,
    RenderOutput,
    Splat2D,
    configure_threads,
    project,
    project_gaussian,
    render,
    render_backward,
    render_projected,
)

__all__ = [
    "COV2D_FLOOR",
    "DEFAULT_SETTINGS",
    "NEAR_CLIP",
    "Projected",
    "RasterGradients",
    "RasterSettings",
    "RenderOutput",
    "Splat2D",
    "configure_threads",
    "project",
    "project_gaussian",
    "render",
    "render_backward",
    "render_oracle",
    "render_projected",
]
