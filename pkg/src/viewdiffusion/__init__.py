"""Pose-conditional image-to-image diffusion for novel view synthesis."""

__version__ = "0.1.0"

from .diffusion import (
    NoiseSchedule,
    eps_loss,
    guide,
    logsnr_cosine,
    posterior_step,
    predict_x,
    q_sample,
)
from .geometry import Camera, Pose, RayBundle, make_rays, posenc_ddpm, posenc_nerf
from .xunet import ConcatUNet, DenoiserBatch, XUNet, XUNetConfig

__all__ = [
    "Camera",
    "ConcatUNet",
    "DenoiserBatch",
    "NoiseSchedule",
    "Pose",
    "RayBundle",
    "XUNet",
    "XUNetConfig",
    "eps_loss",
    "guide",
    "logsnr_cosine",
    "make_rays",
    "posenc_ddpm",
    "posenc_nerf",
    "posterior_step",
    "predict_x",
    "q_sample",
]
