"""Targeted L-infinity PGD, used as a reference point in the attack harness."""

from __future__ import annotations

import torch

from ..errors import ParameterError


def pgd_baseline(f, x: torch.Tensor, y_tar, epsilon: float, step_size: float, iterations: int) -> torch.Tensor:
    """Signed-gradient ascent on ``log p_f(y_tar | x)`` projected onto the epsilon ball and [0, 1]."""
    if epsilon < 0 or step_size < 0 or iterations < 0:
        raise ParameterError("epsilon, step_size and iterations must be non-negative")
    x0 = x.detach()
    adv = x0.clone()
    if epsilon == 0 or iterations == 0:
        return adv
    for _ in range(iterations):
        g = f.grad_log_prob(adv, y_tar)
        adv = adv + step_size * g.sign()
        adv = torch.min(torch.max(adv, x0 - epsilon), x0 + epsilon).clamp(0.0, 1.0)
    return adv.detach()
