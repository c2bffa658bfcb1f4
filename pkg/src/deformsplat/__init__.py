"""Deformable 3D Gaussian splatting for masked RGB-D video reconstruction."""

from .scene import (
    Camera,
    FrameRecord,
    GaussianSet,
    RenderOutput,
    validate_camera,
    validate_frame,
    validate_gaussian_set,
)
from .deformation import DeformationNet, EncodingConfig, apply_deformation, encode
from .estimator import DeformableSplatReconstructor
from .initialize import RefinedFrame, backproject, build_refined_frame, seed_gaussians
from .losses import LossWeights, NeighborGraph, psnr, ssim, total_loss
from .rasterizer import (
    bin_and_sort,
    composite_backward,
    composite_forward,
    render_gaussians,
    render_gaussians_vjp,
    render_naive_oracle,
)
from .trainer import TrainConfig, Trainer, adam_step
from .dataset import DatasetManifest, load_dataset
from .synthetic import SyntheticSceneSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "DatasetManifest",
    "DeformableSplatReconstructor",
    "DeformationNet",
    "EncodingConfig",
    "FrameRecord",
    "GaussianSet",
    "LossWeights",
    "NeighborGraph",
    "RefinedFrame",
    "RenderOutput",
    "SyntheticSceneSpec",
    "TrainConfig",
    "Trainer",
    "adam_step",
    "apply_deformation",
    "backproject",
    "bin_and_sort",
    "build_refined_frame",
    "composite_backward",
    "composite_forward",
    "encode",
    "generate_synthetic",
    "load_dataset",
    "psnr",
    "render_gaussians",
    "render_gaussians_vjp",
    "render_naive_oracle",
    "seed_gaussians",
    "ssim",
    "total_loss",
    "validate_camera",
    "validate_frame",
    "validate_gaussian_set",
]
