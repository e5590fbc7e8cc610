import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy import integrate

from uaediff.errors import CapabilityError, ParameterError
from uaediff.guidance import (GuidanceConfig, Label, apply_adversarial_guidance, chain_factor,
                              classification_log_prob_grad, diffusion_range_grad, exact_guided_posterior_oracle,
                              recognition_log_prob_grad)
from uaediff.models.adapters import ClassifierAdapter, EmbedderAdapter, ForwardOnlyAdapter
from uaediff.models.networks import Embedder, build_classifier

from conftest import central_difference, rel_err, smooth_twin, unit


class LinearLogit(nn.Module):
    def __init__(self, d, classes=2, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.features = nn.Sequential()
        self.features.add_module("block3", nn.Identity())
        self.w = nn.Parameter(torch.randn(classes, d, generator=g))

    def forward(self, x):
        return x.flatten(1) @ self.w.T


class Flatten(nn.Module):
    def forward(self, x):
        return x.flatten(1)


def test_config_defaults_and_validation():
    c = GuidanceConfig()
    assert (c.T, c.N, c.s_a, c.s_n) == (1000, 3, 0.3, 0.8)
    for bad in [dict(T_star=1001), dict(T_star=-1), dict(N=0), dict(s_a=-0.1), dict(s_n=-1), dict(T=0)]:
        with pytest.raises(ParameterError):
            GuidanceConfig(**bad)
    w = GuidanceConfig(T=10, T_star=3)
    assert [t for t in range(10, 0, -1) if w.in_window(t)] == [3, 2, 1]
    assert not any(GuidanceConfig(T=10, T_star=0).in_window(t) for t in range(1, 11))


def test_linear_model_gradient_is_constant():
    # two classes: log p0 = l0 - logsumexp(l0, l1); for a binary problem with w1 = 0 at x where l0 = l1
    # the gradient is (1 - p0) * (w0 - w1); with w = [a, -a] and x = 0 (p0 = 1/2) it is a.
    net = LinearLogit(12)
    with torch.no_grad():
        net.w[1] = -net.w[0]
    f = ClassifierAdapter(net, name="lin")
    g = classification_log_prob_grad(f, torch.zeros(1, 3, 2, 2, dtype=torch.float64), 0)
    torch.testing.assert_close(g.flatten(), net.w[0].double(), rtol=1e-12, atol=1e-12)


def test_symmetric_boundary_gradients_are_opposite():
    net = LinearLogit(12, seed=3)
    with torch.no_grad():
        net.w[1] = -net.w[0]
    f = ClassifierAdapter(net, name="lin")
    x = torch.zeros(3, 2, 2, dtype=torch.float64)
    torch.testing.assert_close(classification_log_prob_grad(f, x, 0), -classification_log_prob_grad(f, x, 1))


def _classification_fd(f, h, along_gradient, seed=5):
    g = torch.Generator().manual_seed(seed)
    for probe in range(20):
        x = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
        c = probe % 10
        grad = classification_log_prob_grad(f, x, c)
        v = grad.clone() if along_gradient else torch.randn(3, 32, 32, generator=g, dtype=torch.float64)
        fd = central_difference(lambda z: float(f.log_probs(z)[c]), x, v, h=h)
        assert rel_err(float((grad * unit(v)).sum()), fd) < 1e-3


@pytest.mark.parametrize("arch", ["cnn_a", "cnn_b"])
def test_classification_gradient_finite_differences(arch):
    torch.manual_seed(0)
    f = ClassifierAdapter(smooth_twin(build_classifier(arch)), name=arch)
    _classification_fd(f, h=1e-3, along_gradient=True)
    _classification_fd(f, h=1e-3, along_gradient=False)


@pytest.mark.parametrize("arch", ["cnn_a", "cnn_b"])
def test_classification_gradient_finite_differences_piecewise_linear(arch):
    # the deployed ReLU nets, with a step small enough to stay on one linear piece
    torch.manual_seed(0)
    _classification_fd(ClassifierAdapter(build_classifier(arch), name=arch), h=1e-6, along_gradient=True)


def test_forward_only_model_has_no_gradients(random_classifier):
    with pytest.raises(CapabilityError):
        classification_log_prob_grad(ForwardOnlyAdapter(random_classifier), torch.rand(3, 32, 32), 0)


def test_apply_guidance_arithmetic():
    x = torch.zeros(2, 2)
    assert torch.equal(apply_adversarial_guidance(x, torch.full_like(x, 2.0), 0.2, 0.0), x)
    torch.testing.assert_close(apply_adversarial_guidance(x.double(), torch.full_like(x, 2.0).double(), 0.2, 0.3),
                               torch.full((2, 2), 0.024, dtype=torch.float64), rtol=0, atol=1e-15)
    g = torch.randn(2, 2, dtype=torch.float64)
    d1 = apply_adversarial_guidance(x.double(), g, 0.5, 0.3) - x
    d2 = apply_adversarial_guidance(x.double(), g, 0.5, 0.6) - x
    torch.testing.assert_close(d2, 2 * d1)
    with pytest.raises(ParameterError):
        apply_adversarial_guidance(x, torch.zeros(3, 3), 0.1, 0.3)


@pytest.mark.parametrize("mu,sigma,a,expected", [(0, 1, 0, (0, 1)), (0, 1, 2, (2, 1)), (1, 0.5, -1, (0.75, 0.25))])
def test_posterior_oracle_matches_numerical_integration(mu, sigma, a, expected):
    mean, var = exact_guided_posterior_oracle(mu, sigma, a)
    assert (mean, var) == pytest.approx(expected, abs=1e-12)
    dens = lambda x: math.exp(-(x - mu) ** 2 / (2 * sigma ** 2) + a * x)  # noqa: E731
    z = integrate.quad(dens, -np.inf, np.inf)[0]
    m1 = integrate.quad(lambda x: x * dens(x), -np.inf, np.inf)[0] / z
    m2 = integrate.quad(lambda x: (x - m1) ** 2 * dens(x), -np.inf, np.inf)[0] / z
    assert m1 == pytest.approx(mean, abs=1e-6)
    assert m2 == pytest.approx(var, abs=1e-6)
    with pytest.raises(ParameterError):
        exact_guided_posterior_oracle(0, 0, 1)


class FlatEmbed(nn.Module):
    def forward(self, x):
        return x.flatten(1)


def test_identity_embedding_sqdist_gradient():
    f = EmbedderAdapter(FlatEmbed(), normalize=False)
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    tar = torch.rand(3, 4, 4, dtype=torch.float64)
    g = recognition_log_prob_grad(f, x, tar, surrogate="neg_sqdist")
    torch.testing.assert_close(g, 2 * (tar - x))


def test_cosine_gradient_vanishes_at_target():
    torch.manual_seed(0)
    f = EmbedderAdapter(Embedder(16))
    x = torch.rand(3, 32, 32, dtype=torch.float64)
    g = recognition_log_prob_grad(f, x, x.clone(), "cosine", kappa=10.0)
    assert float(g.abs().max()) < 1e-6
    # and central differences agree along random directions (value stays at the maximum)
    v = torch.randn_like(x)
    fd = central_difference(lambda z: 10.0 * float(f.score(z, x)), x, v)
    assert abs(fd) < 1e-3


@pytest.mark.parametrize("surrogate", ["cosine", "neg_sqdist"])
def test_recognition_gradient_finite_differences(surrogate):
    torch.manual_seed(1)
    f = EmbedderAdapter(smooth_twin(Embedder(16)))
    g = torch.Generator().manual_seed(7)

    def objective(z, tar):
        if surrogate == "cosine":
            return 10.0 * float(f.score(z, tar))
        e, et = f.embed(z), f.embed(tar)
        return -float(((e - et) ** 2).sum())

    for _ in range(20):
        x = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
        tar = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
        v = torch.randn(3, 32, 32, generator=g, dtype=torch.float64)
        grad = recognition_log_prob_grad(f, x, tar, surrogate, 10.0)
        fd = central_difference(lambda z: objective(z, tar), x, v)
        assert rel_err(float((grad * unit(v)).sum()), fd) < 1e-3


def test_recognition_rejects_unknown_surrogate():
    f = EmbedderAdapter(FlatEmbed())
    with pytest.raises(ParameterError):
        recognition_log_prob_grad(f, torch.rand(1, 2, 2), torch.rand(1, 2, 2), "hinge")


def test_diffusion_range_gradient_finite_differences(random_classifier):
    random_classifier = ClassifierAdapter(smooth_twin(random_classifier.net), name="smooth")
    g = torch.Generator().manual_seed(11)
    for probe in range(20):
        # keep the state inside (-1, 1) so the clamp is inactive
        x = torch.rand(3, 32, 32, generator=g, dtype=torch.float64) * 1.6 - 0.8
        v = torch.randn(3, 32, 32, generator=g, dtype=torch.float64)
        c = probe % 10
        grad = diffusion_range_grad(lambda xp: classification_log_prob_grad(random_classifier, xp, c), x)
        fd = central_difference(lambda z: float(random_classifier.log_probs((z + 1) / 2)[c]), x, v)
        assert rel_err(float((grad * unit(v)).sum()), fd) < 1e-3


def test_diffusion_range_gradient_is_straight_through(random_classifier):
    x = torch.full((3, 32, 32), 3.0, dtype=torch.float64)
    grad = diffusion_range_grad(lambda xp: classification_log_prob_grad(random_classifier, xp, 2), x)
    ref = 0.5 * classification_log_prob_grad(random_classifier, torch.ones_like(x), 2)
    torch.testing.assert_close(grad, ref)


def test_first_order_ascent(random_classifier):
    g = torch.Generator().manual_seed(2)
    wins = 0
    trials = 40
    for i in range(trials):
        x = torch.rand(3, 32, 32, generator=g)
        c = i % 10
        grad = classification_log_prob_grad(random_classifier, x, c)
        step = apply_adversarial_guidance(x, grad, 0.1, 0.3)
        wins += float(random_classifier.log_probs(step)[c]) >= float(random_classifier.log_probs(x)[c])
    assert wins / trials >= 0.95


def test_chain_factor():
    assert chain_factor(0.25) == 2.0


def test_label_target_round_trip():
    assert Label(3).y_tar == 3
