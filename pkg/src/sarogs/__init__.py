"""4D Gaussian splatting with per-primitive lifespans, a scale-aware residual field,
a software rasterizer with analytic compositing gradients, and a lifespan-aware
training schedule."""

from .analysis import evaluate, segment_by_lifespan, segment_lifespans
from .gaussian4d import Gaussian4D, GaussianCloud, activate, deactivate, init_from_points, init_random
from .losses import LossWeights, dssim, l1_loss, l_sr, psnr, ssim, total_loss
from .model import ModelConfig, SaroModel
from .optimizer import ScheduleConfig, adaptive_schedule, profile, train
from .projection import bake, render, render_from_baked
from .rasterizer import Camera, look_at, rasterize, rasterize_oracle
from .scene_io import generate_teacher_scene, load_checkpoint, load_dataset, save_checkpoint
from .temporal import TemporalState, state_function, temporal_cdf, temporal_integral

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian4D", "GaussianCloud", "LossWeights", "ModelConfig", "SaroModel",
    "ScheduleConfig", "TemporalState", "activate", "adaptive_schedule", "bake", "deactivate",
    "dssim", "evaluate", "generate_teacher_scene", "init_from_points", "init_random", "l1_loss",
    "l_sr", "load_checkpoint", "load_dataset", "look_at", "profile", "psnr", "rasterize",
    "rasterize_oracle", "render", "render_from_baked", "save_checkpoint", "segment_by_lifespan",
    "segment_lifespans", "ssim", "state_function", "temporal_cdf", "temporal_integral",
    "total_loss", "train",
]
