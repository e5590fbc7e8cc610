"""Reference-image injection: noise the reference to the current step and blend it in under a saliency mask."""

from __future__ import annotations

import torch

from .diffusion import NoiseSchedule, RandomStream, forward_diffuse
from .errors import InvariantError


def noisy_reference(x_ref: torch.Tensor, t_minus_1: int, schedule: NoiseSchedule,
                    rng: RandomStream = None) -> torch.Tensor:
    """Sample the reference at step ``t - 1`` of the forward process (identity at step 0)."""
    return forward_diffuse(x_ref, t_minus_1, schedule, rng)


def _broadcast_mask(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # [H, W] or [B, H, W] maps are shared across image channels
    if m.dim() == like.dim() - 1:
        m = m.unsqueeze(-3)
    elif m.dim() == like.dim() - 2:
        m = m.unsqueeze(0)
    return m.to(like.dtype)


def fuse(x_tilde: torch.Tensor, x_ref_noisy: torch.Tensor, m) -> torch.Tensor:
    """``x_tilde * (1 - m) + x_ref_noisy * m`` with ``m`` in [0, 1] (a tensor or a ``SaliencyMap``)."""
    m = getattr(m, "m", m)
    if x_tilde.shape != x_ref_noisy.shape:
        raise InvariantError(f"fusion inputs differ in shape: {tuple(x_tilde.shape)} vs {tuple(x_ref_noisy.shape)}")
    if torch.any(m < 0) or torch.any(m > 1) or torch.any(torch.isnan(m)):
        raise InvariantError("saliency mask must lie in [0, 1]")
    m = _broadcast_mask(m, x_tilde)
    return x_tilde * (1.0 - m) + x_ref_noisy * m
