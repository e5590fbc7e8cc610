"""Seed the next sampling cycle: re-noise the finished sample to step T and nudge it up the target gradient."""

from __future__ import annotations

import torch

from .diffusion import NoiseSchedule, RandomStream, forward_diffuse
from .guidance import (Label, TargetImage, classification_log_prob_grad, diffusion_range_grad,
                       recognition_log_prob_grad)
from .errors import ParameterError


def target_gradient(f, x: torch.Tensor, target, surrogate: str = "cosine", kappa: float = 10.0) -> torch.Tensor:
    """Diffusion-range gradient of ``log p_f(target | x)`` for either target variant."""
    if isinstance(target, Label):
        return diffusion_range_grad(lambda xp: classification_log_prob_grad(f, xp, target.y_tar), x)
    if isinstance(target, TargetImage):
        return diffusion_range_grad(lambda xp: recognition_log_prob_grad(f, xp, target.x_tar, surrogate, kappa), x)
    raise ParameterError(f"unsupported attack target {type(target).__name__}")


def optimize_initial_noise(x0: torch.Tensor, schedule: NoiseSchedule, s_n: float, f, target,
                           rng: RandomStream = None, surrogate: str = "cosine", kappa: float = 10.0,
                           gradient=None) -> torch.Tensor:
    """``forward_diffuse(x0, T) + terminal_sigma**2 * s_n * grad log p_f(target | x0)``.

    ``gradient`` may be passed in when the caller already evaluated it.
    """
    x_T = forward_diffuse(x0, schedule.T, schedule, rng)
    if gradient is None:
        gradient = target_gradient(f, x0, target, surrogate, kappa)
    return x_T + (schedule.terminal_sigma ** 2 * s_n) * gradient
