"""Flattened-Gaussian splatting with global and local integrate-and-fire gates."""

from ._accel import BACKEND
from .camera import Camera
from .core import (FlattenedGaussian, GaussianSet, GlobalThresholds, SurrogateConfig,
                   covariance, eval_gaussian, fif_backward, fif_forward, normal_of)
from .projection import cutoff_radius, project_gaussian
from .render import (GradientBundle, RenderBuffers, Upstream, rasterize_backward,
                     rasterize_forward, render_ray_profile)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Camera", "FlattenedGaussian", "GaussianSet", "GlobalThresholds",
    "SurrogateConfig", "covariance", "eval_gaussian", "fif_backward", "fif_forward",
    "normal_of", "cutoff_radius", "project_gaussian", "GradientBundle", "RenderBuffers",
    "Upstream", "rasterize_backward", "rasterize_forward", "render_ray_profile",
]
