"""Class-activation saliency maps: Score-CAM and the GradCAM / GradCAM++ baselines.

All three return a :class:`SaliencyMap` whose values lie in [0, 1], computed
for one image ``[C, H, W]`` or a batch ``[B, C, H, W]`` with per-row classes.
The map is single-channel; fusion broadcasts it across image channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import CapabilityError, ParameterError
from .models.adapters import ActivationStack, _batched, _labels

METHODS = ("scorecam", "gradcam", "gradcampp")
COMBINE_AT = ("feature", "image")


@dataclass
class SaliencyMap:
    m: torch.Tensor  # [H, W] or [B, H, W]
    class_id: Union[int, torch.Tensor]
    method: str = "scorecam"
    layer_id: str = ""
    weights: Optional[torch.Tensor] = None  # per-channel weights, [K] or [B, K]
    bounds: Optional[torch.Tensor] = None  # (min, max) of the map before final normalisation
    forward_calls: int = 0

    def sidecar(self, index: Optional[int] = None) -> dict:
        """JSON-ready metadata for one map (``index`` selects a batch row)."""
        pick = (lambda v: v) if index is None else (lambda v: v[index])
        cls = self.class_id if isinstance(self.class_id, int) else int(pick(self.class_id))
        lo, hi = pick(self.bounds).tolist() if self.bounds is not None else (None, None)
        return {"method": self.method, "layer_id": self.layer_id, "class": cls,
                "normalization_bounds": [lo, hi]}


def upsample_bilinear(a: torch.Tensor, target: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of the trailing two dims with corner-aligned sampling."""
    H, W = int(target[0]), int(target[1])
    if H < 1 or W < 1:
        raise ParameterError(f"target size must be positive, got {target}")
    if a.shape[-2] < 1 or a.shape[-1] < 1:
        raise ParameterError("input map is empty")
    lead = a.shape[:-2]
    x = a.reshape(-1, 1, *a.shape[-2:])
    out = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=True)
    return out.reshape(*lead, H, W)


def minmax_normalize(x: torch.Tensor, dims: Optional[Sequence[int]] = None) -> torch.Tensor:
    """``(x - min) / (max - min)``; a constant input maps to all zeros.

    ``dims`` restricts the reduction (e.g. ``(-2, -1)`` for per-map normalisation).
    """
    x = torch.as_tensor(x)
    if dims is None:
        lo, hi = x.min(), x.max()
    else:
        lo = x.amin(dim=tuple(dims), keepdim=True)
        hi = x.amax(dim=tuple(dims), keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (x - lo) / safe, torch.zeros_like(x))


def _mask_images(X: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """``X [C,H,W]`` times each normalised, upsampled channel of ``A [K,h,w]`` -> ``[K,C,H,W]``."""
    masks = minmax_normalize(upsample_bilinear(A, X.shape[-2:]), dims=(-2, -1))
    return X.unsqueeze(0) * masks.unsqueeze(1)


def channel_score(f, X: torch.Tensor, A_k: torch.Tensor, c: int) -> float:
    """Class-``c`` logit of ``X`` masked by the normalised upsampled activation ``A_k [h, w]``."""
    masked = _mask_images(X, A_k.unsqueeze(0))
    return float(f.logits(masked)[0, c])


def channel_scores(f, X: torch.Tensor, A: torch.Tensor, c: int, chunk: int = 256) -> torch.Tensor:
    """Class-``c`` logits for every channel of ``A [K, h, w]`` (K forward evaluations)."""
    out = []
    for i in range(0, A.shape[0], chunk):
        out.append(f.logits(_mask_images(X, A[i:i + chunk]))[:, c])
    return torch.cat(out)


def _finish(weights: torch.Tensor, acts: torch.Tensor, size, combine_at: str):
    """Weighted channel sum -> ReLU -> upsample -> per-map normalisation."""
    if combine_at == "feature":
        cam = F.relu(torch.einsum("bk,bkhw->bhw", weights, acts))
        cam = upsample_bilinear(cam, size)
    elif combine_at == "image":
        cam = F.relu(torch.einsum("bk,bkhw->bhw", weights, upsample_bilinear(acts, size)))
    else:
        raise ParameterError(f"combine_at must be one of {COMBINE_AT}")
    bounds = torch.stack([cam.amin(dim=(-2, -1)), cam.amax(dim=(-2, -1))], dim=-1)
    return minmax_normalize(cam, dims=(-2, -1)), bounds


def score_cam(f, x_ref: torch.Tensor, y, layer_id: Optional[str] = None, combine_at: str = "feature",
              chunk: int = 256) -> SaliencyMap:
    """Gradient-free Score-CAM: channel weights are the softmax of masked-input logits for class ``y``."""
    xb, squeeze = _batched(x_ref)
    labels = _labels(y, xb.shape[0], xb.device)
    stack: ActivationStack = f.activations(xb, layer_id)
    acts = stack.maps
    weights = []
    for i in range(xb.shape[0]):
        s = channel_scores(f, xb[i], acts[i], int(labels[i]), chunk)
        weights.append(torch.softmax(s, dim=0))
    weights = torch.stack(weights)
    m, bounds = _finish(weights, acts, xb.shape[-2:], combine_at)
    calls = 1 + acts.shape[1]
    if squeeze:
        return SaliencyMap(m[0], int(labels[0]), "scorecam", stack.layer_id, weights[0], bounds[0], calls)
    return SaliencyMap(m, labels, "scorecam", stack.layer_id, weights, bounds, calls)


def _acts_and_grads(f, xb, labels, layer_id):
    if not getattr(f, "has_gradients", False):
        raise CapabilityError(f"{getattr(f, 'name', 'model')} does not expose gradients")
    inner = getattr(f, "inner", f)
    acts, logits = inner.forward_with_activations(xb.detach(), layer_id, track_grad=True)
    score = logits.gather(1, labels[:, None]).sum()
    (grads,) = torch.autograd.grad(score, acts)
    return acts.detach(), grads.detach(), layer_id or inner.default_layer


def grad_cam_weights(f, x: torch.Tensor, y, layer_id: Optional[str] = None) -> torch.Tensor:
    """Spatial mean of d logit_y / d A^k, shape ``[B, K]``."""
    xb, _ = _batched(x)
    _, grads, _ = _acts_and_grads(f, xb, _labels(y, xb.shape[0], xb.device), layer_id)
    return grads.mean(dim=(2, 3))


def grad_cam(f, x_ref: torch.Tensor, y, layer_id: Optional[str] = None, combine_at: str = "feature") -> SaliencyMap:
    xb, squeeze = _batched(x_ref)
    labels = _labels(y, xb.shape[0], xb.device)
    acts, grads, lid = _acts_and_grads(f, xb, labels, layer_id)
    weights = grads.mean(dim=(2, 3))
    m, bounds = _finish(weights, acts, xb.shape[-2:], combine_at)
    if squeeze:
        return SaliencyMap(m[0], int(labels[0]), "gradcam", lid, weights[0], bounds[0], 1)
    return SaliencyMap(m, labels, "gradcam", lid, weights, bounds, 1)


def grad_cam_pp(f, x_ref: torch.Tensor, y, layer_id: Optional[str] = None, combine_at: str = "feature") -> SaliencyMap:
    """GradCAM++ with the usual closed-form alpha built from 2nd/3rd powers of the gradient."""
    xb, squeeze = _batched(x_ref)
    labels = _labels(y, xb.shape[0], xb.device)
    acts, grads, lid = _acts_and_grads(f, xb, labels, layer_id)
    g2, g3 = grads ** 2, grads ** 3
    denom = 2.0 * g2 + acts.sum(dim=(2, 3), keepdim=True) * g3
    denom = torch.where(denom != 0, denom, torch.ones_like(denom))
    alpha = torch.where(grads != 0, g2 / denom, torch.zeros_like(grads))
    weights = (alpha * F.relu(grads)).sum(dim=(2, 3))
    m, bounds = _finish(weights, acts, xb.shape[-2:], combine_at)
    if squeeze:
        return SaliencyMap(m[0], int(labels[0]), "gradcampp", lid, weights[0], bounds[0], 1)
    return SaliencyMap(m, labels, "gradcampp", lid, weights, bounds, 1)


def saliency(method: str, f, x_ref, y, layer_id=None, combine_at="feature") -> SaliencyMap:
    if method == "scorecam":
        return score_cam(f, x_ref, y, layer_id, combine_at)
    if method == "gradcam":
        return grad_cam(f, x_ref, y, layer_id, combine_at)
    if method == "gradcampp":
        return grad_cam_pp(f, x_ref, y, layer_id, combine_at)
    raise ParameterError(f"unknown saliency method {method!r}; choose from {METHODS}")
