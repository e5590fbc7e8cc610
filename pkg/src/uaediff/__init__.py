"""Unrestricted adversarial examples from guided diffusion sampling, at desk scale."""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, forward_diffuse, make_linear_schedule, predict_noise_cfg, reverse_step  # noqa: E402
from .guidance import GuidanceConfig, Label, TargetImage  # noqa: E402
from .pipeline import AttackOptions, AttackResult, run_attack_batch, score_adv_attack, success_check  # noqa: E402

__all__ = [
    "AttackOptions", "AttackResult", "GuidanceConfig", "Label", "NoiseSchedule", "TargetImage",
    "forward_diffuse", "make_linear_schedule", "predict_noise_cfg", "reverse_step", "run_attack_batch",
    "score_adv_attack", "success_check",
]
