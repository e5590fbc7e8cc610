"""
Core DDPM mechanics: noise schedules, the forward marginal, classifier-free
guided noise prediction, the ancestral reverse step and the clean-image
estimate.

All per-step arrays are stored with a leading t=0 entry so that indexing by
the step number is direct: ``alpha_bar[0] == 1`` and ``beta[0] == 0``.

Images are plain ``torch.Tensor`` objects shaped ``[B, C, H, W]`` (or
``[C, H, W]``); "diffusion range" means nominally [-1, 1] and "pixel range"
means [0, 1].  Random streams are either a single ``torch.Generator`` or a
sequence of generators, one per batch row, so that each attack instance in a
batch owns an independent stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import torch

from .errors import InvariantError, ParameterError

RandomStream = Union[torch.Generator, Sequence[torch.Generator], None]

SIGMA_MODES = ("posterior", "beta")


def to_pixel(x: torch.Tensor) -> torch.Tensor:
    """Affine map from diffusion range [-1, 1] to pixel range [0, 1] (no clamping)."""
    return (x + 1.0) * 0.5


def to_diffusion(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def straight_through_clamp(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Clamp in the forward pass, identity in the backward pass."""
    return x + (x.clamp(lo, hi) - x).detach()


def randn(shape_like: torch.Tensor, rng: RandomStream) -> torch.Tensor:
    """Standard normal noise shaped like ``shape_like``.

    With a sequence of generators, row ``i`` of the batch is drawn from
    ``rng[i]`` so results do not depend on how instances are batched.
    """
    dtype, device = shape_like.dtype, shape_like.device
    if rng is None or isinstance(rng, torch.Generator):
        return torch.randn(shape_like.shape, generator=rng, dtype=dtype, device=device)
    if len(rng) != shape_like.shape[0]:
        raise ParameterError(f"got {len(rng)} generators for a batch of {shape_like.shape[0]}")
    row = shape_like.shape[1:]
    return torch.stack([torch.randn(row, generator=g, dtype=dtype, device=device) for g in rng])


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step scalar coefficients of a DDPM.

    Every array has length ``T + 1``; entry 0 is the t=0 convention.
    """

    beta: np.ndarray
    sigma_mode: str = "posterior"
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    posterior_beta: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.shape[0] < 2 or beta[0] != 0.0:
            raise ParameterError("beta must be a 1-D array [0, beta_1, ..., beta_T] with T >= 1")
        if np.any(beta[1:] < 0.0) or np.any(beta[1:] >= 1.0):
            raise ParameterError("every beta_t must lie in [0, 1)")
        if self.sigma_mode not in SIGMA_MODES:
            raise ParameterError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        posterior = np.zeros_like(beta)
        one_minus = 1.0 - alpha_bar
        ok = one_minus[1:] > 0
        posterior[1:][ok] = (one_minus[:-1][ok] / one_minus[1:][ok]) * beta[1:][ok]
        sigma = np.sqrt(posterior if self.sigma_mode == "posterior" else beta)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_beta", posterior)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_betas(cls, betas: Sequence[float], sigma_mode: str = "posterior") -> "NoiseSchedule":
        """Build a schedule from ``[beta_1, ..., beta_T]``."""
        return cls(np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)]), sigma_mode)

    @property
    def T(self) -> int:
        return self.beta.shape[0] - 1

    @property
    def terminal_sigma(self) -> float:
        return math.sqrt(1.0 - self.alpha_bar[self.T])

    def check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ParameterError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sigma_mode": self.sigma_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_linear_schedule(d["T"], d["beta_start"], d["beta_end"], d.get("sigma_mode", "posterior"))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                         sigma_mode: str = "posterior") -> NoiseSchedule:
    """Linearly spaced betas over steps 1..T."""
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be an integer >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    sched = NoiseSchedule(np.concatenate([[0.0], betas]), sigma_mode, float(beta_start), float(beta_end))
    return sched


def _coef(value: float, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(value, dtype=like.dtype, device=like.device)


def forward_diffuse(x0: torch.Tensor, t: int, schedule: NoiseSchedule, rng: RandomStream = None,
                    noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sample q(x_t | x_0) = N(sqrt(abar_t) x0, (1 - abar_t) I).  ``t == 0`` returns ``x0``."""
    t = schedule.check_step(t, lo=0)
    if t == 0:
        return x0.clone()
    if noise is None:
        noise = randn(x0, rng)
    ab = schedule.alpha_bar[t]
    return _coef(math.sqrt(ab), x0) * x0 + _coef(math.sqrt(1.0 - ab), x0) * noise


class DiffusionModelAdapter(Protocol):
    """Anything that predicts the noise in ``x_t``; ``y=None`` selects the unconditional branch."""

    thread_safe: bool

    def predict_noise(self, x_t: torch.Tensor, t: int, y: Optional[torch.Tensor] = None) -> torch.Tensor:
        ...


def predict_noise_cfg(model: DiffusionModelAdapter, x_t: torch.Tensor, t: int, y, s_c: float) -> torch.Tensor:
    """Classifier-free guided noise: ``(1 + s_c) * eps(x_t, y) - s_c * eps(x_t)``."""
    eps_cond = model.predict_noise(x_t, t, y)
    eps_uncond = model.predict_noise(x_t, t, None)
    if eps_cond.shape != eps_uncond.shape or eps_cond.shape != x_t.shape:
        raise InvariantError(
            f"noise branches disagree: cond {tuple(eps_cond.shape)}, uncond {tuple(eps_uncond.shape)}, "
            f"input {tuple(x_t.shape)}"
        )
    return (1.0 + s_c) * eps_cond - s_c * eps_uncond


def reverse_mean(x_t: torch.Tensor, eps_tilde: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    t = schedule.check_step(t)
    a, ab = schedule.alpha[t], schedule.alpha_bar[t]
    # beta_t == 0 makes the noise coefficient 0 regardless of abar_t
    k = (1.0 - a) / math.sqrt(1.0 - ab) if ab < 1.0 else 0.0
    return (x_t - _coef(k, x_t) * eps_tilde) / _coef(math.sqrt(a), x_t)


def reverse_step(x_t: torch.Tensor, eps_tilde: torch.Tensor, t: int, schedule: NoiseSchedule,
                 rng: RandomStream = None, mean: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}.  The noise term is dropped at t == 1."""
    t = schedule.check_step(t)
    if eps_tilde.shape != x_t.shape:
        raise InvariantError(f"eps shape {tuple(eps_tilde.shape)} != x_t shape {tuple(x_t.shape)}")
    if mean is None:
        mean = reverse_mean(x_t, eps_tilde, t, schedule)
    if t == 1:
        return mean
    return mean + _coef(schedule.sigma[t], x_t) * randn(x_t, rng)


def predict_x0(x_t: torch.Tensor, eps_tilde: torch.Tensor, t: int, schedule: NoiseSchedule,
               clamp: bool = False) -> torch.Tensor:
    """Invert the forward marginal: ``(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``.

    ``t == 0`` is accepted and returns ``x_t``.
    """
    t = schedule.check_step(t, lo=0)
    ab = schedule.alpha_bar[t]
    assert ab > 0.0, "alpha_bar must stay positive"
    x0 = (x_t - _coef(math.sqrt(1.0 - ab), x_t) * eps_tilde) / _coef(math.sqrt(ab), x_t)
    return x0.clamp(-1.0, 1.0) if clamp else x0
