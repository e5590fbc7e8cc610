"""Attack-success rate, transferability matrix and image-quality metrics.

Quality metrics work on pixel-range images (``MAX = 1``).  ``desk_fid`` is a
Fréchet distance in the feature space of a locally trained network, so its
values are only comparable within one evaluation setup.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .errors import ParameterError

PSNR_IDENTICAL = math.inf
FID_EPS = 1e-6
FID_MIN_IMAGES = 50


def attack_success_rate(results: Sequence) -> float:
    """Fraction of attacks with at least one successful cycle.

    Items may be ``AttackResult`` objects, record dicts or plain booleans.
    """
    if len(results) == 0:
        raise ParameterError("attack_success_rate needs at least one result")
    hits = 0
    for r in results:
        if isinstance(r, (bool, np.bool_)):
            hits += bool(r)
        elif isinstance(r, Mapping):
            hits += any(r["success_per_cycle"])
        else:
            hits += any(r.success_per_cycle)
    return hits / len(results)


def binomial_ci_halfwidth(p: float, n: int, z: float = 1.959963984540054) -> float:
    """Half-width of the normal-approximation binomial confidence interval."""
    if n <= 0:
        raise ParameterError("n must be positive")
    return z * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def transfer_matrix(surrogates: Sequence[str], targets: Sequence[str], adversarial_sets: Mapping,
                    judge: Callable) -> np.ndarray:
    """ASR of images crafted on each surrogate (rows) when judged by each target (columns).

    ``adversarial_sets[surrogate]`` holds whatever ``judge(target, items)`` needs;
    the judge returns one success flag per attack.
    """
    out = np.zeros((len(surrogates), len(targets)))
    for i, s in enumerate(surrogates):
        if s not in adversarial_sets:
            raise ParameterError(f"no adversarial set for surrogate {s!r}")
        for j, t in enumerate(targets):
            out[i, j] = attack_success_rate([bool(v) for v in judge(t, adversarial_sets[s])])
    return out


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """``10 log10(1 / MSE)``; identical inputs give ``math.inf``."""
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords ** 2 / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over all valid window positions (and channels/batch).

    Accepts ``[H, W]``, ``[C, H, W]`` or ``[B, C, H, W]``.
    """
    a, b = _check_pair(a, b)
    if a.dim() < 2:
        raise ParameterError("ssim needs at least 2-D images")
    H, W = a.shape[-2:]
    if H < window or W < window:
        raise ParameterError(f"image {H}x{W} smaller than the {window}x{window} window")
    x = a.reshape(-1, 1, H, W)
    y = b.reshape(-1, 1, H, W)
    w = gaussian_window(window, sigma)[None, None]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x ** 2
    syy = F.conv2d(y * y, w) - mu_y ** 2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = FID_EPS) -> float:
    """``|mu1-mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2})`` with ``eps I`` added to both covariances."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    eye = np.eye(cov1.shape[0]) * eps
    c1, c2 = cov1 + eye, cov2 + eye
    covmean = scipy.linalg.sqrtm(c1 @ c2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(covmean))
    return max(d, 0.0)


def feature_statistics(features: np.ndarray):
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    return feats.mean(axis=0), np.cov(feats, rowvar=False, bias=False).reshape(feats.shape[1], feats.shape[1])


def extract_features(images, feature_extractor: Callable, batch: int = 250) -> np.ndarray:
    images = torch.as_tensor(images)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            chunks.append(torch.as_tensor(feature_extractor(images[i:i + batch])).double().cpu().numpy())
    return np.concatenate(chunks)


def desk_fid(set_a, set_b, feature_extractor: Optional[Callable] = None, min_images: int = FID_MIN_IMAGES) -> float:
    """Fréchet distance between Gaussian fits of two image sets in a fixed feature space.

    With ``feature_extractor=None`` the inputs are taken to be feature arrays
    ``[n, d]`` already.
    """
    if len(set_a) < min_images or len(set_b) < min_images:
        raise ParameterError(f"desk_fid needs at least {min_images} images per set "
                             f"(got {len(set_a)} and {len(set_b)})")
    if feature_extractor is None:
        fa, fb = np.asarray(set_a, dtype=np.float64), np.asarray(set_b, dtype=np.float64)
    else:
        fa, fb = extract_features(set_a, feature_extractor), extract_features(set_b, feature_extractor)
    return frechet_distance(*feature_statistics(fa), *feature_statistics(fb))
