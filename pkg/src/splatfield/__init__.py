"""splatfield: joint 3D Gaussian splatting and neural SDF reconstruction.

The package optimizes a set of 3D Gaussians together with a neural signed
distance field from posed multi-view images, keeps the Gaussians aligned
with the SDF zero-level set through a differentiable pulling operator,
extracts surfaces with marching cubes, and evaluates reconstruction and
rendering quality on synthetic scenes.
"""

__version__ = "0.1.0"

from .camera import CameraView, look_at, make_camera
from .gaussians import (Gaussian, GaussianSet, PulledGaussian, covariance,
                        density3d, disk_normal, load_set, save_set)
from .losses import (LossReport, LossWeights, loss_splatting, loss_thin,
                     nearest_pulled, ssim)
from .mesh import (TriangleMesh, export_mesh, extract_chunked, load_mesh,
                   marching_cubes, mesh_stats)
from .metrics import MetricReport, chamfer, f_score, psnr
from .raster import RenderSettings, RenderedImage, Splat2D, composite, project, render
from .sdf import SceneTransform, SdfNetwork, init_sphere, load_network, pull_points, save_network
from .synth import AnalyticShape, Dataset, analytic_sdf, init_gaussians, load_dataset, make_scene, make_shape, save_dataset
from .tape import Tape, TapeError, Value, grad_check
from .train import TrainConfig, TrainState, fit, resume, sample_queries, train_step

__all__ = [
    "AnalyticShape", "CameraView", "Dataset", "Gaussian", "GaussianSet",
    "LossReport", "LossWeights", "MetricReport", "PulledGaussian",
    "RenderSettings", "RenderedImage", "SceneTransform", "SdfNetwork",
    "Splat2D", "Tape", "TapeError", "TrainConfig", "TrainState",
    "TriangleMesh", "Value", "analytic_sdf", "chamfer", "composite",
    "covariance", "density3d", "disk_normal", "export_mesh",
    "extract_chunked", "f_score", "fit", "grad_check", "init_gaussians",
    "init_sphere", "load_dataset", "load_mesh", "load_network", "load_set",
    "look_at", "loss_splatting", "loss_thin", "make_camera", "make_scene",
    "make_shape", "marching_cubes", "mesh_stats", "nearest_pulled", "project",
    "psnr", "pull_points", "render", "resume", "sample_queries", "save_dataset",
    "save_network", "save_set", "ssim", "train_step", "__version__",
]
