"""Adversarial guidance terms added to each reverse-sampling step.

Classification targets push the sampled state along the gradient of the
target-class log-probability; recognition targets use the gradient of a
similarity surrogate evaluated at the clean-image estimate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Union

import torch

from .diffusion import straight_through_clamp, to_pixel
from .errors import CapabilityError, ParameterError

GRAD_POINTS = ("sample", "mean")
SIMILARITY_SURROGATES = ("cosine", "neg_sqdist")


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs of the guided sampler.  Defaults target a 1000-step schedule."""

    T: int = 1000
    T_star: int = 500
    N: int = 3
    s_a: float = 0.3
    s_c: float = 1.0
    s_n: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError("T must be >= 1")
        if not 0 <= self.T_star <= self.T:
            raise ParameterError(f"T_star must lie in [0, T={self.T}], got {self.T_star}")
        if self.N < 1:
            raise ParameterError("N must be >= 1")
        if self.s_a < 0 or self.s_n < 0:
            raise ParameterError("s_a and s_n must be non-negative")

    def in_window(self, t: int) -> bool:
        """Guidance is active during the final ``T_star`` reverse steps, i.e. for t <= T_star."""
        return t <= self.T_star

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Label:
    """Classification target: class index (or a ``[B]`` tensor of indices)."""

    y_tar: Union[int, torch.Tensor]


@dataclass(frozen=True)
class TargetImage:
    """Recognition target: a pixel-range image (``[C,H,W]`` or ``[B,C,H,W]``)."""

    x_tar: torch.Tensor


AttackTarget = Union[Label, TargetImage]


def _require_gradients(model):
    if not getattr(model, "has_gradients", False):
        raise CapabilityError(f"{getattr(model, 'name', type(model).__name__)} does not expose gradients")


def classification_log_prob_grad(f, x: torch.Tensor, y_tar) -> torch.Tensor:
    """``grad_x log p_f(y_tar | x)`` for a pixel-range input."""
    _require_gradients(f)
    return f.grad_log_prob(x, y_tar)


def recognition_log_prob_grad(f_sim, x_hat0: torch.Tensor, x_tar: torch.Tensor, surrogate: str = "cosine",
                              kappa: float = 10.0) -> torch.Tensor:
    """Gradient of the similarity log-probability surrogate w.r.t. the pixel-range clean estimate.

    ``cosine``: ``kappa * cos(e(x_hat0), e(x_tar))``; ``neg_sqdist``: ``-||e(x_hat0) - e(x_tar)||^2``.
    """
    _require_gradients(f_sim)
    if surrogate not in SIMILARITY_SURROGATES:
        raise ParameterError(f"surrogate must be one of {SIMILARITY_SURROGATES}")
    return f_sim.grad_surrogate(x_hat0, x_tar, surrogate, kappa)


def diffusion_range_grad(grad_fn, x: torch.Tensor) -> torch.Tensor:
    """Evaluate a pixel-range gradient for a diffusion-range state.

    The state is mapped to pixels and clamped; the clamp is treated as the
    identity in the backward pass, so only the affine factor 1/2 remains.
    """
    x_pix = straight_through_clamp(to_pixel(x.detach()), 0.0, 1.0)
    return 0.5 * grad_fn(x_pix)


def apply_adversarial_guidance(x_bar: torch.Tensor, g: torch.Tensor, sigma_t: float, s_a: float) -> torch.Tensor:
    """``x_bar + sigma_t**2 * s_a * g``."""
    if x_bar.shape != g.shape:
        raise ParameterError(f"gradient shape {tuple(g.shape)} != state shape {tuple(x_bar.shape)}")
    if sigma_t < 0:
        raise ParameterError("sigma_t must be non-negative")
    return x_bar + (sigma_t ** 2 * s_a) * g


def exact_guided_posterior_oracle(mu: float, sigma: float, a: float):
    """Posterior of a N(mu, sigma^2) prior under a linear log-likelihood ``a * x``.

    Completing the square gives N(mu + sigma^2 a, sigma^2); returns ``(mean, variance)``.
    """
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    return mu + sigma * sigma * a, sigma * sigma


def chain_factor(alpha_bar: float) -> float:
    """d x_hat0 / d x for the clean-image estimate at a step with cumulative alpha ``alpha_bar``."""
    return 1.0 / math.sqrt(alpha_bar)
