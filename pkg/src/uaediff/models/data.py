"""Procedural 10-class 32x32 RGB dataset ("toyshapes").

Nothing is downloaded: the images are rendered from a seed, written to an
``.npz`` file and described by a JSON manifest carrying the SHA-256 of the
raw array bytes.  Loading verifies the checksum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import IngestionError

CLASS_NAMES = (
    "disk", "square", "triangle", "plus", "ring",
    "hstripes", "vstripes", "checker", "xcross", "diamond",
)
NUM_CLASSES = len(CLASS_NAMES)


def _smoothstep(d, width=0.8):
    # signed distance (negative inside) -> soft coverage in [0, 1]
    return 1.0 / (1.0 + np.exp(d / (width * 0.5)))


def _render(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2.0
    cx, cy = c + rng.uniform(-4, 4), c + rng.uniform(-4, 4)
    dx, dy = xx - cx, yy - cy
    r = rng.uniform(6.0, 10.0) * size / 32.0
    name = CLASS_NAMES[cls]
    if name == "disk":
        d = np.hypot(dx, dy) - r
    elif name == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - r * 0.85
    elif name == "triangle":
        # upward equilateral-ish triangle via three half-planes
        s = r * 1.1
        d1 = dy - s * 0.6
        d2 = (-dy * 0.5 + dx * 0.866) - s * 0.6
        d3 = (-dy * 0.5 - dx * 0.866) - s * 0.6
        d = np.maximum(np.maximum(d1, d2), d3)
    elif name == "plus":
        w = rng.uniform(1.5, 2.5)
        arm = np.minimum(np.maximum(np.abs(dx) - w, np.abs(dy) - r),
                         np.maximum(np.abs(dy) - w, np.abs(dx) - r))
        d = arm
    elif name == "ring":
        w = rng.uniform(1.2, 2.0)
        d = np.abs(np.hypot(dx, dy) - r) - w
    elif name in ("hstripes", "vstripes"):
        period = rng.uniform(5.0, 8.0)
        coord = yy if name == "hstripes" else xx
        phase = rng.uniform(0, period)
        d = (np.abs(((coord + phase) % period) - period / 2) - period / 4) * 1.5
    elif name == "checker":
        cell = rng.uniform(5.0, 8.0)
        ox, oy = rng.uniform(0, cell, size=2)
        s = np.sin(np.pi * (xx + ox) / cell) * np.sin(np.pi * (yy + oy) / cell)
        d = -s * cell * 0.5
    elif name == "xcross":
        w = rng.uniform(1.3, 2.2)
        u, v = (dx + dy) / np.sqrt(2), (dx - dy) / np.sqrt(2)
        d = np.minimum(np.maximum(np.abs(u) - w, np.abs(v) - r * 1.1),
                       np.maximum(np.abs(v) - w, np.abs(u) - r * 1.1))
    elif name == "diamond":
        d = (np.abs(dx) + np.abs(dy)) - r * 1.15
    else:  # pragma: no cover
        raise AssertionError(name)
    cover = _smoothstep(d)[None]
    bg = rng.uniform(0.0, 0.35, size=3)
    fg = rng.uniform(0.55, 1.0, size=3)
    if rng.random() < 0.5:
        bg, fg = 1.0 - bg * 0.6, fg * 0.45
    img = bg[:, None, None] * (1 - cover) + fg[:, None, None] * cover
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(n_per_class: int, seed: int, size: int = 32):
    """Return ``(images uint8 [N, 3, size, size], labels int64 [N])`` with classes interleaved."""
    rng = np.random.default_rng(seed)
    n = n_per_class * NUM_CLASSES
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % NUM_CLASSES
        images[i] = np.floor(_render(cls, rng, size) * 255.0 + 0.5).astype(np.uint8)
        labels[i] = cls
    return images, labels


def _checksum(arrays: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Dataset:
    x_train: np.ndarray  # float32 pixel range [N, 3, H, W]
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    checksum: str
    num_classes: int = NUM_CLASSES

    @property
    def resolution(self) -> int:
        return int(self.x_train.shape[-1])


def write_dataset(out_dir, n_train_per_class: int = 500, n_test_per_class: int = 100,
                  seed: int = 0, size: int = 32) -> Path:
    """Render the train/test splits and write ``toyshapes.npz`` plus ``manifest.json``.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x_tr, y_tr = generate(n_train_per_class, seed, size)
    x_te, y_te = generate(n_test_per_class, seed + 1, size)
    arrays = {"x_train": x_tr, "y_train": y_tr, "x_test": x_te, "y_test": y_te}
    np.savez_compressed(out_dir / "toyshapes.npz", **arrays)
    manifest = {
        "name": "toyshapes",
        "path": "toyshapes.npz",
        "splits": {"train": int(len(y_tr)), "test": int(len(y_te))},
        "classes": list(CLASS_NAMES),
        "resolution": size,
        "seed": seed,
        "sha256": _checksum(arrays),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"dataset manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        data_path = manifest_path.parent / manifest["path"]
        with np.load(data_path) as z:
            arrays = {k: z[k] for k in ("x_train", "y_train", "x_test", "y_test")}
    except (OSError, KeyError, ValueError) as exc:
        raise IngestionError(f"cannot read dataset described by {manifest_path}: {exc}") from exc
    digest = _checksum(arrays)
    if digest != manifest["sha256"]:
        raise IngestionError(f"checksum mismatch for {data_path}: {digest} != {manifest['sha256']}")
    to_f = lambda a: a.astype(np.float32) / 255.0  # noqa: E731
    return Dataset(to_f(arrays["x_train"]), arrays["y_train"], to_f(arrays["x_test"]), arrays["y_test"],
                   digest, len(manifest["classes"]))
