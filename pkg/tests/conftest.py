import numpy as np
import pytest
import torch
import torch.nn as nn

from uaediff.models.adapters import ClassifierAdapter, DiffusionAdapter
from uaediff.models.data import load_dataset, write_dataset
from uaediff.models.networks import TinyUNet, build_classifier

torch.set_num_threads(1)


class SumPoolNet(nn.Module):
    """conv block -> spatial sum -> linear.  Logits are linear in the block activations."""

    def __init__(self, in_ch=3, k=2, classes=3, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.features = nn.Sequential()
        self.features.add_module("block3", nn.Conv2d(in_ch, k, 3, padding=1))
        self.head = nn.Linear(k, classes)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)

    def forward(self, x):
        return self.head(self.features(x).sum(dim=(2, 3)))

    def embed(self, x):
        return self.features(x).sum(dim=(2, 3))


class ConstNoise:
    """Diffusion adapter stub returning fixed conditional / unconditional noise."""

    thread_safe = True
    sample_shape = (1, 4, 4)

    def __init__(self, cond=0.2, uncond=0.1):
        self.cond, self.uncond = cond, uncond
        self.calls = 0

    def predict_noise(self, x_t, t, y=None):
        self.calls += 1
        return torch.full_like(x_t, self.cond if y is not None else self.uncond)


@pytest.fixture
def sum_pool_adapter():
    return ClassifierAdapter(SumPoolNet(), name="toy")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    return load_dataset(write_dataset(d, 30, 10, seed=0))


@pytest.fixture(scope="session")
def random_diffusion():
    torch.manual_seed(0)
    net = TinyUNet(3, 8, 10)
    # break the zero-initialised output layer so predictions are non-trivial
    with torch.no_grad():
        net.out[-1].weight.normal_(0, 0.05)
    return DiffusionAdapter(net, 10)


@pytest.fixture(scope="session")
def random_classifier():
    torch.manual_seed(1)
    return ClassifierAdapter(build_classifier("cnn_a"), name="cnn_a")


def smooth_twin(net: nn.Module) -> nn.Module:
    """Same architecture and weights with ReLU -> SiLU and MaxPool -> AvgPool.

    Central differences at a 1e-3 step are only meaningful on a smooth
    function; piecewise-linear nets cross many activation kinks within one step.
    """
    import copy

    twin = copy.deepcopy(net)
    for name, mod in list(twin.named_modules()):
        for child_name, child in list(mod.named_children()):
            if isinstance(child, nn.ReLU):
                setattr(mod, child_name, nn.SiLU())
            elif isinstance(child, nn.MaxPool2d):
                setattr(mod, child_name, nn.AvgPool2d(child.kernel_size))
    return twin


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def unit(v):
    return v / v.norm()


def central_difference(fn, x, v, h=1e-3):
    """Directional derivative of scalar ``fn`` at ``x`` along the unit vector ``v / |v|``.

    The caller must dot the analytic gradient with the same unit vector (see ``unit``).
    """
    v = unit(v)
    return (fn(x + h * v) - fn(x - h * v)) / (2 * h)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records one PASS/FAIL line and fails the test when ``ok`` is false."""

    def record(k, ok, detail):
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
