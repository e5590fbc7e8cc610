"""Guided adversarial sampling loop.

One attack runs ``N`` full reverse-diffusion cycles.  Each step computes the
classifier-free guided noise, takes the ancestral step, adds the adversarial
gradient during the last ``T_star`` steps and, when a reference image is
given, blends in the noised reference under a saliency mask.  After each
cycle the sample is checked against the target and re-noised (plus a target
gradient) to seed the next cycle.

Attacks are processed in batches; every batch row owns its own random
stream, so per-instance results do not depend on the batch composition
beyond floating-point reduction order.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .diffusion import (NoiseSchedule, predict_noise_cfg, predict_x0, randn, reverse_mean, reverse_step,
                        to_diffusion, to_pixel)
from .errors import AttackError, CapabilityError, ParameterError, UaediffError
from .fusion import fuse, noisy_reference
from .guidance import (GRAD_POINTS, GuidanceConfig, Label, TargetImage, apply_adversarial_guidance, chain_factor,
                       classification_log_prob_grad, diffusion_range_grad, recognition_log_prob_grad)
from .noise_opt import optimize_initial_noise, target_gradient
from .saliency import METHODS, saliency

X0_SOURCES = ("pre_step", "post_step")
FUSION_ORDERS = ("guide_then_fuse", "fuse_then_guide")


@dataclass(frozen=True)
class AttackOptions:
    """Interpretation switches and recognition/saliency settings.

    ``grad_at``: evaluate the classification gradient at the sampled state
    (``"sample"``) or at the step mean (``"mean"``).
    ``x0_source``: clean estimate for recognition guidance from the pre-step
    state x_t (``"pre_step"``) or from the sampled x_{t-1} with a fresh noise
    prediction at t-1 (``"post_step"``).
    ``chain_rule``: multiply the recognition gradient by 1/sqrt(alpha_bar).
    """

    grad_at: str = "sample"
    x0_source: str = "pre_step"
    chain_rule: bool = False
    fusion_order: str = "guide_then_fuse"
    surrogate: str = "cosine"
    kappa: float = 10.0
    tau: float = 0.7
    saliency_method: str = "scorecam"
    saliency_layer: Optional[str] = None
    combine_at: str = "feature"
    early_stop: bool = False
    quantize_check: bool = True

    def __post_init__(self):
        if self.grad_at not in GRAD_POINTS:
            raise ParameterError(f"grad_at must be one of {GRAD_POINTS}")
        if self.x0_source not in X0_SOURCES:
            raise ParameterError(f"x0_source must be one of {X0_SOURCES}")
        if self.fusion_order not in FUSION_ORDERS:
            raise ParameterError(f"fusion_order must be one of {FUSION_ORDERS}")
        if self.saliency_method not in METHODS:
            raise ParameterError(f"saliency_method must be one of {METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    final_image: torch.Tensor  # pixel range [C, H, W]
    accepted_images: List[torch.Tensor]
    success_per_cycle: List[bool]
    final_prediction: float
    gradient_calls: int
    model_forward_calls: int
    diffusion_calls: int
    config_snapshot: GuidanceConfig
    seed: int
    wall_time: float
    instance: int = 0
    y: int = 0
    y_tar: Optional[int] = None
    mask: Optional[torch.Tensor] = None
    mask_meta: Optional[dict] = None
    options: Optional[AttackOptions] = None

    @property
    def succeeded(self) -> bool:
        return any(self.success_per_cycle)

    def to_record(self) -> dict:
        """JSON-ready summary (images are written separately)."""
        return {
            "instance": self.instance,
            "seed": self.seed,
            "y": self.y,
            "y_tar": self.y_tar,
            "success_per_cycle": list(self.success_per_cycle),
            "success": self.succeeded,
            "accepted_count": len(self.accepted_images),
            "final_prediction": self.final_prediction,
            "gradient_calls": self.gradient_calls,
            "model_forward_calls": self.model_forward_calls,
            "diffusion_calls": self.diffusion_calls,
            "config": self.config_snapshot.to_dict(),
            "options": self.options.to_dict() if self.options else None,
            "mask": self.mask_meta,
            "wall_time": self.wall_time,
        }


def instance_generator(seed: int, index: int) -> torch.Generator:
    """Independent random stream for attack ``index`` of a run seeded with ``seed``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def quantize(x_pix: torch.Tensor) -> torch.Tensor:
    """Round pixel values to the 8-bit grid (half-up), as written to PNG."""
    return torch.floor(x_pix.clamp(0.0, 1.0) * 255.0 + 0.5) / 255.0


def success_check(f, x0: torch.Tensor, target, tau: float = 0.7):
    """Target condition on a pixel-range image (or batch).

    Classification: ``argmax f(x0) == y_tar``.  Recognition: cosine similarity
    of embeddings ``>= tau``.  Returns a bool for one image, a bool tensor for a batch.
    """
    single = x0.dim() == 3
    if isinstance(target, Label):
        ok = f.predict(x0) == torch.as_tensor(target.y_tar)
    elif isinstance(target, TargetImage):
        ok = f.score(x0, target.x_tar) >= tau
    else:
        raise ParameterError(f"unsupported attack target {type(target).__name__}")
    return bool(ok) if single else ok


def _prediction(f, x0_pix, target):
    if isinstance(target, Label):
        return f.predict(x0_pix).to(torch.float64)
    return f.score(x0_pix, target.x_tar).to(torch.float64)


def plain_cfg_sample(diffusion, schedule: NoiseSchedule, y, s_c: float, rngs, x_T=None) -> torch.Tensor:
    """Unguided classifier-free guided ancestral sampling (diffusion range)."""
    x = x_T
    if x is None:
        shape_like = torch.empty(len(rngs), *diffusion.sample_shape)
        x = randn(shape_like, rngs)
    for t in range(schedule.T, 0, -1):
        eps = predict_noise_cfg(diffusion, x, t, y, s_c)
        x = reverse_step(x, eps, t, schedule, rngs)
    return x


def _slice_target(target, i):
    if isinstance(target, Label):
        y = torch.as_tensor(target.y_tar)
        return Label(int(y) if y.dim() == 0 else int(y[i]))
    x = target.x_tar
    return TargetImage(x if x.dim() == 3 else x[i])


def _check_capabilities(f, config: GuidanceConfig, target, x_ref, options, saliency_model):
    needs_grad = config.T_star > 0 or config.N > 1
    if needs_grad and not getattr(f, "has_gradients", False):
        raise CapabilityError(f"{getattr(f, 'name', 'target model')} must expose gradients for guidance")
    if isinstance(target, Label) and not hasattr(f, "predict"):
        raise ParameterError("label targets need a classifier adapter")
    if isinstance(target, TargetImage) and not hasattr(f, "score"):
        raise ParameterError("image targets need a similarity adapter")
    if x_ref is not None:
        sal = saliency_model or f
        if not getattr(sal, "has_activations", False):
            raise CapabilityError("reference fusion needs a saliency model exposing activations")
        if options.saliency_method != "scorecam" and not getattr(sal, "has_gradients", False):
            raise CapabilityError(f"{options.saliency_method} needs gradients from the saliency model")


def run_attack_batch(config: GuidanceConfig, diffusion, schedule: NoiseSchedule, f, target, y,
                     rngs: Sequence[torch.Generator], x_ref: Optional[torch.Tensor] = None,
                     options: Optional[AttackOptions] = None, saliency_model=None,
                     instance_ids: Optional[Sequence[int]] = None, x_T: Optional[torch.Tensor] = None,
                     mask=None) -> List[AttackResult]:
    """Attack a batch of ``B = len(rngs)`` instances.

    ``y`` holds ground-truth labels ``[B]``; ``target`` is a batched
    :class:`Label` or :class:`TargetImage`; ``x_ref`` is an optional
    pixel-range reference batch.  ``mask`` may supply precomputed saliency
    maps ``[B, H, W]`` instead of computing them from ``x_ref``.
    """
    options = options or AttackOptions()
    if schedule.T != config.T:
        raise ParameterError(f"schedule has T={schedule.T} but config has T={config.T}")
    _check_capabilities(f, config, target, x_ref, options, saliency_model)
    B = len(rngs)
    y = torch.as_tensor(y, dtype=torch.long).expand(B) if torch.as_tensor(y).dim() == 0 \
        else torch.as_tensor(y, dtype=torch.long)
    ids = list(instance_ids) if instance_ids is not None else list(range(B))
    start = time.perf_counter()
    grad_calls = 0
    fwd_calls = 0
    diff_calls = 0

    sal = None
    if x_ref is not None:
        if mask is None:
            sal = saliency(options.saliency_method, saliency_model or f, x_ref, y, options.saliency_layer,
                           options.combine_at)
            mask = sal.m
            fwd_calls += sal.forward_calls
        x_ref_d = to_diffusion(x_ref)

    def cls_grad(point):
        return diffusion_range_grad(lambda xp: classification_log_prob_grad(f, xp, target.y_tar), point)

    def rec_grad(point):
        return diffusion_range_grad(
            lambda xp: recognition_log_prob_grad(f, xp, target.x_tar, options.surrogate, options.kappa), point)

    def guide(x_bar, mean, x_t, eps, t):
        nonlocal grad_calls, diff_calls
        if isinstance(target, Label):
            g = cls_grad(mean if options.grad_at == "mean" else x_bar)
        else:
            if options.x0_source == "pre_step":
                idx = t
                x0_hat = predict_x0(x_t, eps, t, schedule, clamp=True)
            else:
                idx = t - 1
                if idx >= 1:
                    eps_prev = predict_noise_cfg(diffusion, x_bar, idx, y, config.s_c)
                    diff_calls += 2
                else:
                    eps_prev = torch.zeros_like(x_bar)
                x0_hat = predict_x0(x_bar, eps_prev, idx, schedule, clamp=True)
            g = rec_grad(x0_hat)
            if options.chain_rule:
                g = g * chain_factor(schedule.alpha_bar[idx])
        grad_calls += 1
        return apply_adversarial_guidance(x_bar, g, float(schedule.sigma[t]), config.s_a)

    if x_T is None:
        x_T = randn(torch.empty(B, *diffusion.sample_shape), rngs)
    successes = [[] for _ in range(B)]
    accepted = [[] for _ in range(B)]
    last_pix = None
    last_pred = None
    done = torch.zeros(B, dtype=torch.bool)

    for cycle in range(1, config.N + 1):
        x_t = x_T
        t = schedule.T
        try:
            for t in range(schedule.T, 0, -1):
                eps = predict_noise_cfg(diffusion, x_t, t, y, config.s_c)
                diff_calls += 2
                mean = reverse_mean(x_t, eps, t, schedule)
                x_bar = reverse_step(x_t, eps, t, schedule, rngs, mean=mean)
                active = config.in_window(t)
                if x_ref is not None and options.fusion_order == "fuse_then_guide":
                    x_bar = fuse(x_bar, noisy_reference(x_ref_d, t - 1, schedule, rngs), mask)
                x_tilde = guide(x_bar, mean, x_t, eps, t) if active else x_bar
                if x_ref is not None and options.fusion_order == "guide_then_fuse":
                    x_tilde = fuse(x_tilde, noisy_reference(x_ref_d, t - 1, schedule, rngs), mask)
                x_t = x_tilde
            t = 0
            x0 = x_t.clamp(-1.0, 1.0)
            x0_pix = to_pixel(x0).clamp(0.0, 1.0)
            if options.quantize_check:
                x0_pix = quantize(x0_pix)
            ok = success_check(f, x0_pix, target, options.tau)
            pred = _prediction(f, x0_pix, target)
            fwd_calls += 1
            for i in range(B):
                if done[i]:
                    continue
                successes[i].append(bool(ok[i]))
                if ok[i]:
                    accepted[i].append(x0_pix[i].clone())
            if last_pix is None:
                last_pix, last_pred = x0_pix.clone(), pred.clone()
            else:
                keep = done.clone()
                last_pix[~keep] = x0_pix[~keep]
                last_pred[~keep] = pred[~keep]
            if options.early_stop:
                done |= ok.to(torch.bool)
                if bool(done.all()):
                    break
            if cycle < config.N:
                g_n = target_gradient(f, x0, target, options.surrogate, options.kappa)
                grad_calls += 1
                x_T = optimize_initial_noise(x0, schedule, config.s_n, f, target, rngs, gradient=g_n)
        except UaediffError as exc:
            if isinstance(exc, (CapabilityError, ParameterError)):
                raise
            raise AttackError(f"attack failed: {exc}", cycle, t) from exc
        except RuntimeError as exc:
            raise AttackError(f"adapter failure: {exc}", cycle, t) from exc

    wall = time.perf_counter() - start
    results = []
    for i in range(B):
        tgt = _slice_target(target, i)
        final = accepted[i][0] if accepted[i] else last_pix[i]
        final_pred = float(_prediction(f, final, tgt)) if accepted[i] else float(last_pred[i])
        results.append(AttackResult(
            final_image=final,
            accepted_images=accepted[i],
            success_per_cycle=successes[i],
            final_prediction=final_pred,
            gradient_calls=grad_calls,
            model_forward_calls=fwd_calls,
            diffusion_calls=diff_calls,
            config_snapshot=config,
            seed=config.seed,
            wall_time=wall,
            instance=ids[i],
            y=int(y[i]),
            y_tar=tgt.y_tar if isinstance(tgt, Label) else None,
            mask=mask[i].clone() if mask is not None else None,
            mask_meta=sal.sidecar(i) if sal is not None else None,
            options=options,
        ))
    return results


def score_adv_attack(config: GuidanceConfig, diffusion, schedule: NoiseSchedule, f, target, y: int,
                     x_ref: Optional[torch.Tensor] = None, rng: Optional[torch.Generator] = None,
                     options: Optional[AttackOptions] = None, saliency_model=None) -> AttackResult:
    """Single-instance entry point; ``rng`` defaults to the stream of instance 0 under ``config.seed``."""
    rng = rng or instance_generator(config.seed, 0)
    if isinstance(target, TargetImage) and target.x_tar.dim() == 3:
        target = TargetImage(target.x_tar.unsqueeze(0))
    elif isinstance(target, Label):
        target = Label(torch.as_tensor([int(target.y_tar)]))
    x_ref = x_ref.unsqueeze(0) if x_ref is not None and x_ref.dim() == 3 else x_ref
    return run_attack_batch(config, diffusion, schedule, f, target, torch.tensor([int(y)]), [rng], x_ref,
                            options, saliency_model)[0]

