"""Differentiable tiled rasterizer for 3D Gaussian splats."""

from .backend import active_backend, available_backends, set_backend
from .blending import RenderOutput, bin_tiles, blend_order, rasterize, rasterize_reference
from .projection import ProjectedSplats, RasterConfig, project_gaussians

__all__ = [
    "ProjectedSplats",
    "RasterConfig",
    "RenderOutput",
    "active_backend",
    "available_backends",
    "bin_tiles",
    "blend_order",
    "project_gaussians",
    "rasterize",
    "rasterize_reference",
    "set_backend",
]
