import math

import pytest
import torch
import torch.nn as nn

from uaediff.diffusion import make_linear_schedule, to_pixel
from uaediff.errors import AttackError, CapabilityError, ParameterError
from uaediff.guidance import GuidanceConfig, Label, TargetImage
from uaediff.models.adapters import ClassifierAdapter, EmbedderAdapter, ForwardOnlyAdapter
from uaediff.models.networks import Embedder
from uaediff.pipeline import (AttackOptions, instance_generator, plain_cfg_sample, quantize, run_attack_batch,
                              score_adv_attack, success_check)

T = 8


class FixedLogits(nn.Module):
    """Logits independent of the input (but differentiable through it)."""

    def __init__(self, logits):
        super().__init__()
        self.features = nn.Sequential()
        self.features.add_module("block3", nn.Conv2d(3, 2, 1))
        self.register_buffer("fixed", torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        return self.fixed[None].expand(x.shape[0], -1) + 0.0 * self.features(x).sum(dim=(1, 2, 3))[:, None]


def _final_pixels(x_diff):
    return quantize(to_pixel(x_diff.clamp(-1, 1)).clamp(0, 1))


@pytest.fixture(scope="module")
def schedule():
    return make_linear_schedule(T, 5e-4, 0.1)


def _rngs(seed, n):
    return [instance_generator(seed, i) for i in range(n)]


def _attack(cfg, diffusion, schedule, f, y_tar, n=2, seed=0, **kw):
    return run_attack_batch(cfg, diffusion, schedule, f, Label((torch.arange(n) + 1) % 10 if y_tar is None else y_tar),
                            torch.arange(n) % 10, _rngs(seed, n), **kw)


def test_guidance_off_matches_plain_sampling(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=T, N=1, s_a=0.0, s_n=0.0)
    out = _attack(cfg, random_diffusion, schedule, random_classifier, torch.tensor([3, 4]), n=2, seed=5)
    plain = plain_cfg_sample(random_diffusion, schedule, torch.tensor([0, 1]), cfg.s_c, _rngs(5, 2))
    assert torch.equal(torch.stack([r.final_image for r in out]), _final_pixels(plain))


def test_guidance_changes_the_sample(random_diffusion, random_classifier, schedule):
    base = GuidanceConfig(T=T, T_star=T, N=1, s_a=0.0, s_n=0.0)
    guided = GuidanceConfig(T=T, T_star=T, N=1, s_a=50.0, s_n=0.0)
    a = _attack(base, random_diffusion, schedule, random_classifier, torch.tensor([3, 4]))
    b = _attack(guided, random_diffusion, schedule, random_classifier, torch.tensor([3, 4]))
    assert not torch.equal(a[0].final_image, b[0].final_image)


def _comparable(r):
    rec = r.to_record()
    rec.pop("wall_time")
    return rec, r.final_image, r.accepted_images


def test_determinism(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=4, N=3, s_a=5.0, s_n=0.8, seed=11)
    runs = [_attack(cfg, random_diffusion, schedule, random_classifier, None, n=3, seed=11) for _ in range(2)]
    for a, b in zip(*runs):
        ra, ia, acc_a = _comparable(a)
        rb, ib, acc_b = _comparable(b)
        assert ra == rb and torch.equal(ia, ib)
        assert len(acc_a) == len(acc_b) and all(torch.equal(p, q) for p, q in zip(acc_a, acc_b))


def test_instances_do_not_depend_on_batch_neighbours(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=4, N=2, s_a=1.0, s_n=0.8)
    y = torch.tensor([0, 1, 2])
    full = run_attack_batch(cfg, random_diffusion, schedule, random_classifier, Label(torch.tensor([5, 6, 7])), y,
                            _rngs(3, 3))
    alone = run_attack_batch(cfg, random_diffusion, schedule, random_classifier, Label(torch.tensor([6])), y[1:2],
                             [instance_generator(3, 1)])
    torch.testing.assert_close(full[1].final_image, alone[0].final_image, atol=2 / 255, rtol=0)


@pytest.mark.parametrize("N,T_star", [(1, 0), (1, T), (3, 4), (2, T)])
def test_counters(random_diffusion, random_classifier, schedule, N, T_star):
    cfg = GuidanceConfig(T=T, T_star=T_star, N=N, s_a=0.3, s_n=0.8)
    r = _attack(cfg, random_diffusion, schedule, random_classifier, None, n=1)[0]
    assert r.gradient_calls == N * min(T_star, T) + (N - 1)
    assert r.diffusion_calls == 2 * T * N
    assert r.model_forward_calls == N
    assert len(r.success_per_cycle) == N


def test_counters_with_reference(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=4, N=2)
    K = random_classifier.activations(torch.rand(1, 3, 32, 32)).maps.shape[1]
    r = _attack(cfg, random_diffusion, schedule, random_classifier, None, n=2, x_ref=torch.rand(2, 3, 32, 32))[0]
    assert r.gradient_calls == 2 * 4 + 1
    assert r.model_forward_calls == 1 + K + 2
    assert r.mask.shape == (32, 32) and r.mask_meta["method"] == "scorecam"


def test_post_step_recognition_costs_extra_diffusion_calls(random_diffusion, schedule):
    torch.manual_seed(0)
    emb = EmbedderAdapter(Embedder(8))
    cfg = GuidanceConfig(T=T, T_star=3, N=1)
    tar = TargetImage(torch.rand(1, 3, 32, 32))
    opts = AttackOptions(x0_source="post_step")
    r = run_attack_batch(cfg, random_diffusion, schedule, emb, tar, torch.tensor([0]), _rngs(0, 1), options=opts)[0]
    # steps t = 3, 2 need a fresh prediction at t - 1; the t = 1 step lands on x_0 directly
    assert r.diffusion_calls == 2 * T + 2 * 2
    assert r.y_tar is None and -1 - 1e-6 <= r.final_prediction <= 1 + 1e-6


def test_always_successful_target(random_diffusion, schedule):
    f = ClassifierAdapter(FixedLogits([0.0, 5.0, 0.0]), name="fixed")
    cfg = GuidanceConfig(T=T, T_star=2, N=3)
    r = _attack(cfg, random_diffusion, schedule, f, torch.tensor([1, 1]), n=2)
    for res in r:
        assert res.success_per_cycle == [True, True, True] and len(res.accepted_images) == 3
        assert torch.equal(res.final_image, res.accepted_images[0])
        assert res.final_prediction == 1.0 and res.succeeded
    stopped = _attack(cfg, random_diffusion, schedule, f, torch.tensor([1, 1]), n=2,
                      options=AttackOptions(early_stop=True))
    assert all(res.success_per_cycle == [True] for res in stopped)


def test_never_successful_target(random_diffusion, schedule):
    f = ClassifierAdapter(FixedLogits([0.0, 5.0, 0.0]), name="fixed")
    cfg = GuidanceConfig(T=T, T_star=2, N=2)
    r = _attack(cfg, random_diffusion, schedule, f, torch.tensor([2]), n=1)[0]
    assert r.success_per_cycle == [False, False] and r.accepted_images == [] and not r.succeeded
    assert r.final_prediction == 1.0


def test_accepted_images_are_valid(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=T, N=3, s_a=20.0, s_n=0.8)
    results = _attack(cfg, random_diffusion, schedule, random_classifier, None, n=6, seed=2)
    for r in results:
        assert bool(r.accepted_images) == any(r.success_per_cycle)
        assert len(r.accepted_images) == sum(r.success_per_cycle)
        for img in r.accepted_images:
            assert success_check(random_classifier, img, Label(r.y_tar))
    assert any(r.succeeded for r in results)


def test_full_mask_reproduces_reference(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=4, N=1)
    ref = quantize(torch.rand(1, 3, 32, 32))
    r = _attack(cfg, random_diffusion, schedule, random_classifier, torch.tensor([3]), n=1, x_ref=ref,
                mask=torch.ones(1, 32, 32))[0]
    torch.testing.assert_close(r.final_image, ref[0], atol=1e-6, rtol=0)


def test_success_check_examples(random_classifier):
    f = ClassifierAdapter(FixedLogits([0.0, 0.0, 9.0]), name="fixed")
    x = torch.rand(3, 32, 32)
    assert success_check(f, x, Label(2)) is True
    assert success_check(f, x, Label(0)) is False
    assert success_check(f, torch.rand(4, 3, 32, 32), Label(2)).all()
    torch.manual_seed(0)
    emb = EmbedderAdapter(Embedder(8))
    assert success_check(emb, x, TargetImage(x), tau=1.0 - 1e-6)
    assert success_check(emb, x, TargetImage(x), tau=0.7)
    assert not success_check(emb, x, TargetImage(x), tau=math.inf)
    with pytest.raises(ParameterError):
        success_check(f, x, 3)


class Exploding:
    thread_safe = True
    sample_shape = (3, 32, 32)

    def __init__(self, after):
        self.after, self.calls = after, 0

    def predict_noise(self, x_t, t, y=None):
        self.calls += 1
        if self.calls > self.after:
            raise RuntimeError("device lost")
        return torch.zeros_like(x_t)


def test_adapter_failure_reports_cycle_and_step(random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=2, N=2)
    with pytest.raises(AttackError) as info:
        _attack(cfg, Exploding(after=2 * T + 4), schedule, random_classifier, None, n=1)
    assert info.value.cycle == 2 and info.value.step == T - 2


def test_capability_and_parameter_errors(random_diffusion, random_classifier, schedule):
    blind = ForwardOnlyAdapter(random_classifier)
    with pytest.raises(CapabilityError):
        _attack(GuidanceConfig(T=T, T_star=2, N=1), random_diffusion, schedule, blind, None, n=1)
    with pytest.raises(CapabilityError):
        _attack(GuidanceConfig(T=T, T_star=0, N=2), random_diffusion, schedule, blind, None, n=1)
    # nothing to differentiate: forward-only access is enough
    r = _attack(GuidanceConfig(T=T, T_star=0, N=1), random_diffusion, schedule, blind, None, n=1)
    assert r[0].gradient_calls == 0
    with pytest.raises(CapabilityError):
        _attack(GuidanceConfig(T=T, T_star=0, N=1), random_diffusion, schedule, blind, None, n=1,
                x_ref=torch.rand(1, 3, 32, 32), options=AttackOptions(saliency_method="gradcam"))
    with pytest.raises(ParameterError):
        _attack(GuidanceConfig(T=T + 1, T_star=2, N=1), random_diffusion, schedule, random_classifier, None, n=1)
    with pytest.raises(ParameterError):
        AttackOptions(grad_at="elsewhere")


def test_single_instance_wrapper(random_diffusion, random_classifier, schedule):
    cfg = GuidanceConfig(T=T, T_star=3, N=2, seed=4)
    r = score_adv_attack(cfg, random_diffusion, schedule, random_classifier, Label(7), 2)
    batch = run_attack_batch(cfg, random_diffusion, schedule, random_classifier, Label(torch.tensor([7])),
                             torch.tensor([2]), [instance_generator(4, 0)])[0]
    assert torch.equal(r.final_image, batch.final_image)
    assert r.y == 2 and r.y_tar == 7 and r.seed == 4
    assert r.final_image.shape == (3, 32, 32)


def test_instance_generators_are_distinct():
    a = torch.rand(4, generator=instance_generator(0, 0))
    b = torch.rand(4, generator=instance_generator(0, 1))
    c = torch.rand(4, generator=instance_generator(1, 0))
    assert not torch.equal(a, b) and not torch.equal(a, c)
    assert torch.equal(a, torch.rand(4, generator=instance_generator(0, 0)))
