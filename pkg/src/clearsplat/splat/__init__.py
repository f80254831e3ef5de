from .gaussians import GaussianCloud, build_covariance, eval_gaussian
from .project import ProjectionCache, project_gaussians, project_gaussians_backward
from .rasterize import (
    RasterizeOptions,
    RenderCache,
    RenderOutput,
    rasterize,
    rasterize_backward,
    rasterize_reference,
)

__all__ = [
    "GaussianCloud",
    "build_covariance",
    "eval_gaussian",
    "ProjectionCache",
    "project_gaussians",
    "project_gaussians_backward",
    "RasterizeOptions",
    "RenderCache",
    "RenderOutput",
    "rasterize",
    "rasterize_backward",
    "rasterize_reference",
]
