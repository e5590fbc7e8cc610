"""Adapter contracts between the sampling pipeline and concrete networks.

Classifier and embedder adapters consume pixel-range images; the diffusion
adapter consumes diffusion-range states.  All adapters accept ``[C, H, W]``
or ``[B, C, H, W]`` and follow the dtype of the input (the networks are cast
on the fly, which the finite-difference tests rely on to run in float64).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import CapabilityError, ParameterError

Label = Union[int, torch.Tensor]


def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ParameterError(f"expected [C,H,W] or [B,C,H,W], got shape {tuple(x.shape)}")
    return x, False


def _labels(c: Label, batch: int, device) -> torch.Tensor:
    c = torch.as_tensor(c, dtype=torch.long, device=device)
    return c.expand(batch) if c.dim() == 0 else c


def _net_for(net: nn.Module, x: torch.Tensor) -> nn.Module:
    p = next(net.parameters(), None)
    if p is not None and p.dtype != x.dtype:
        net.to(dtype=x.dtype)
    return net


@dataclass
class ActivationStack:
    """Channel activations ``[K, h, w]`` (or ``[B, K, h, w]``) from one layer."""

    maps: torch.Tensor
    layer_id: str
    source_shape: Tuple[int, int]

    def __post_init__(self):
        k, h, w = self.maps.shape[-3:]
        if k < 1 or h > self.source_shape[0] or w > self.source_shape[1]:
            raise ParameterError(f"bad activation stack {tuple(self.maps.shape)} for input {self.source_shape}")


class DiffusionAdapter:
    """Wraps a ``TinyUNet``; ``y=None`` routes to the null-label (unconditional) branch.

    ``prediction="v"`` means the network outputs ``v = sqrt(abar) eps - sqrt(1 - abar) x0``;
    the adapter converts it to a noise prediction with the training schedule's
    ``alpha_bar``, so callers always receive eps.
    """

    thread_safe = True

    def __init__(self, net: nn.Module, num_classes: int, supports_unconditional: bool = True,
                 sample_shape: Tuple[int, int, int] = (3, 32, 32), prediction: str = "eps", alpha_bar=None):
        if prediction not in ("eps", "v"):
            raise ParameterError(f"prediction must be 'eps' or 'v', got {prediction!r}")
        if prediction == "v" and alpha_bar is None:
            raise ParameterError("v-prediction needs the training schedule's alpha_bar")
        self.net = net.eval()
        self.num_classes = num_classes
        self.supports_unconditional = supports_unconditional
        self.sample_shape = tuple(sample_shape)
        self.prediction = prediction
        self.alpha_bar = None if alpha_bar is None else torch.as_tensor(alpha_bar, dtype=torch.float64)

    @torch.no_grad()
    def predict_noise(self, x_t: torch.Tensor, t, y: Optional[Label] = None) -> torch.Tensor:
        x, squeeze = _batched(x_t)
        b = x.shape[0]
        if y is None:
            if not self.supports_unconditional:
                raise CapabilityError("model was trained without class dropout; no unconditional branch")
            y = self.num_classes
        labels = _labels(y, b, x.device)
        tt = _labels(t, b, x.device)
        out = _net_for(self.net, x)(x, tt, labels)
        if self.prediction == "v":
            ab = self.alpha_bar[tt].to(x.dtype).view(-1, *([1] * (x.dim() - 1)))
            out = ab.sqrt() * out + (1.0 - ab).sqrt() * x
        return out[0] if squeeze else out


class ClassifierAdapter:
    """Target-model adapter around a ``CNNClassifier``-style module.

    ``layer_id`` names a submodule (e.g. ``"features.block3"``) whose output
    is exposed by :meth:`activations`.
    """

    has_gradients = True
    has_activations = True
    thread_safe = False

    def __init__(self, net: nn.Module, name: str = "classifier", default_layer: str = "features.block3"):
        self.net = net.eval()
        self.name = name
        self.default_layer = default_layer
        for p in self.net.parameters():
            p.requires_grad_(False)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        xb, squeeze = _batched(x)
        with torch.no_grad():
            out = _net_for(self.net, xb)(xb)
        return out[0] if squeeze else out

    def log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.logits(x), dim=-1)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits(x).argmax(dim=-1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        xb, _ = _batched(x)
        with torch.no_grad():
            return _net_for(self.net, xb).embed(xb)

    def grad_log_prob(self, x: torch.Tensor, c: Label) -> torch.Tensor:
        """Gradient of ``log softmax(f(x))[c]`` with respect to ``x`` (batched: per-row class)."""
        xb, squeeze = _batched(x)
        xb = xb.detach().requires_grad_(True)
        with torch.enable_grad():
            lp = F.log_softmax(_net_for(self.net, xb)(xb), dim=-1)
            sel = lp.gather(1, _labels(c, xb.shape[0], xb.device)[:, None]).sum()
            (g,) = torch.autograd.grad(sel, xb)
        return g[0] if squeeze else g

    def _module(self, layer_id: str) -> nn.Module:
        modules = dict(self.net.named_modules())
        if layer_id not in modules:
            raise ParameterError(f"layer {layer_id!r} not found; available: {sorted(k for k in modules if k)}")
        return modules[layer_id]

    def forward_with_activations(self, x: torch.Tensor, layer_id: Optional[str] = None, track_grad: bool = False):
        """Return ``(activations [B,K,h,w], logits [B,classes])``; with ``track_grad`` the
        activations stay in the autograd graph so logits can be differentiated with respect to them."""
        xb, _ = _batched(x)
        if track_grad:
            # parameters are frozen, so the graph must be rooted at the input
            xb = xb.detach().requires_grad_(True)
        store = {}

        def hook(_m, _inp, out):
            store["a"] = out

        handle = self._module(layer_id or self.default_layer).register_forward_hook(hook)
        try:
            with torch.set_grad_enabled(track_grad):
                logits = _net_for(self.net, xb)(xb)
        finally:
            handle.remove()
        return store["a"], logits

    def activations(self, x: torch.Tensor, layer_id: Optional[str] = None) -> ActivationStack:
        xb, squeeze = _batched(x)
        acts, _ = self.forward_with_activations(xb, layer_id)
        acts = acts.detach()
        return ActivationStack(acts[0] if squeeze else acts, layer_id or self.default_layer,
                               tuple(xb.shape[-2:]))


class ForwardOnlyAdapter:
    """Hides gradients of a wrapped classifier adapter (black-box style access)."""

    has_gradients = False
    has_activations = True
    thread_safe = False

    def __init__(self, inner: ClassifierAdapter):
        self.inner = inner
        self.name = inner.name
        self.default_layer = inner.default_layer

    def logits(self, x):
        return self.inner.logits(x)

    def log_probs(self, x):
        return self.inner.log_probs(x)

    def predict(self, x):
        return self.inner.predict(x)

    def activations(self, x, layer_id=None):
        return self.inner.activations(x, layer_id)

    def grad_log_prob(self, x, c):
        raise CapabilityError(f"{self.name} exposes forward evaluation only")


class EmbedderAdapter:
    """Similarity-model adapter: unit-norm embeddings compared by cosine similarity."""

    has_gradients = True
    thread_safe = False

    def __init__(self, net: nn.Module, name: str = "embedder", normalize: bool = True):
        self.net = net.eval()
        self.name = name
        self.normalize = normalize
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _embed(self, xb):
        e = _net_for(self.net, xb)(xb)
        return F.normalize(e, dim=-1) if self.normalize else e

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        xb, squeeze = _batched(x)
        with torch.no_grad():
            e = self._embed(xb)
        return e[0] if squeeze else e

    @staticmethod
    def similarity(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
        return (F.normalize(e1, dim=-1) * F.normalize(e2, dim=-1)).sum(-1)

    def score(self, x: torch.Tensor, x_tar: torch.Tensor) -> torch.Tensor:
        return self.similarity(self.embed(x), self.embed(x_tar))

    def grad_similarity_wrt_first(self, x: torch.Tensor, x_tar: torch.Tensor) -> torch.Tensor:
        return self.grad_surrogate(x, x_tar, "cosine", 1.0)

    def grad_surrogate(self, x: torch.Tensor, x_tar: torch.Tensor, surrogate: str = "cosine",
                       kappa: float = 1.0) -> torch.Tensor:
        """Gradient of ``kappa * cos(e(x), e(x_tar))`` or of ``-||e(x) - e(x_tar)||^2`` w.r.t. ``x``."""
        xb, squeeze = _batched(x)
        tb, _ = _batched(x_tar)
        with torch.no_grad():
            e_tar = self._embed(tb)
        xb = xb.detach().requires_grad_(True)
        with torch.enable_grad():
            e = self._embed(xb)
            if surrogate == "cosine":
                obj = kappa * self.similarity(e, e_tar).sum()
            elif surrogate == "neg_sqdist":
                obj = -((e - e_tar) ** 2).sum()
            else:
                raise ParameterError(f"unknown similarity surrogate {surrogate!r}")
            (g,) = torch.autograd.grad(obj, xb)
        return g[0] if squeeze else g
