"""Conditional pixel-space diffusion with classifier-free guidance and EMA weights."""

from .autodiff import Tape, Tensor, apply_op, backward, grad_check
from .denoiser import DenoiserConfig, DenoiserParams, denoiser_forward, init_params
from .metrics import FeatureProjector, frechet_distance, gaussian_stats
from .sampler import SampleRequest, cfg_combine, sample
from .schedule import Schedule, build_schedule
from .trainer import TrainConfig, train

__version__ = "0.1.0"
