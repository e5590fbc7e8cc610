"""Trainers for the desk-scale models and checkpoint persistence.

Every trainer runs inside ``torch.random.fork_rng`` with an explicit seed, so
results are reproducible in single-threaded mode and the caller's global RNG
state is untouched.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..diffusion import NoiseSchedule
from ..errors import GateError, IngestionError, ParameterError
from .adapters import ClassifierAdapter, DiffusionAdapter, EmbedderAdapter
from .data import Dataset
from .networks import Embedder, TinyUNet, build_classifier

log = logging.getLogger(__name__)


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train_toy_diffusion(dataset: Dataset, schedule: NoiseSchedule, epochs: int = 80, seed: int = 0,
                        class_dropout_rate: float = 0.1, base_channels: int = 16, batch_size: int = 64,
                        lr: float = 2e-3, ema_decay: float = 0.999, max_steps=None,
                        prediction: str = "v") -> DiffusionAdapter:
    """Train a denoising U-Net with class dropout (the null label stands in for "no class").

    The default ``v`` target keeps the implied noise prediction accurate near
    pure noise, where an eps-trained small net's error is amplified by
    ``sqrt((1 - abar) / abar)`` at every sampling step.

    Returns a :class:`DiffusionAdapter` around the EMA weights, with
    ``history`` (per-epoch mean loss) and ``descriptor`` attributes attached.
    """
    if not 0.0 <= class_dropout_rate < 1.0:
        raise ParameterError("class_dropout_rate must be in [0, 1)")
    if prediction not in ("eps", "v"):
        raise ParameterError(f"prediction must be 'eps' or 'v', got {prediction!r}")
    x = torch.from_numpy(dataset.x_train) * 2.0 - 1.0
    y = torch.from_numpy(dataset.y_train)
    k = dataset.num_classes
    history = []
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        net = TinyUNet(x.shape[1], base_channels, k)
        ema = copy.deepcopy(net)
        opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
        total = epochs * ((len(x) + batch_size - 1) // batch_size)
        if max_steps is not None:
            total = min(total, max_steps)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=total, pct_start=0.05)
        ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)
        step = 0
        for epoch in range(epochs):
            losses = []
            for idx in _batches(len(x), batch_size, gen):
                if step >= total:
                    break
                xb, yb = x[idx], y[idx].clone()
                drop = torch.rand(len(idx), generator=gen) < class_dropout_rate
                yb[drop] = k
                t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
                noise = torch.randn(xb.shape, generator=gen)
                a = ab[t][:, None, None, None]
                xt = a.sqrt() * xb + (1 - a).sqrt() * noise
                target = noise if prediction == "eps" else a.sqrt() * noise - (1 - a).sqrt() * xb
                loss = F.mse_loss(net(xt, t, yb), target)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                with torch.no_grad():
                    d = min(ema_decay, (1 + step) / (10 + step))
                    for pe, p in zip(ema.parameters(), net.parameters()):
                        pe.mul_(d).add_(p, alpha=1 - d)
                losses.append(loss.item())
                step += 1
            if losses:
                history.append(float(np.mean(losses)))
                log.info("diffusion epoch %d loss %.5f", epoch, history[-1])
    adapter = DiffusionAdapter(ema, k, supports_unconditional=class_dropout_rate > 0,
                               sample_shape=(int(x.shape[1]), dataset.resolution, dataset.resolution),
                               prediction=prediction, alpha_bar=schedule.alpha_bar)
    adapter.history = history
    adapter.descriptor = {
        "kind": "diffusion",
        "architecture": "tiny_unet",
        "base_channels": base_channels,
        "resolution": dataset.resolution,
        "channels": int(x.shape[1]),
        "class_count": k,
        "class_dropout_rate": class_dropout_rate,
        "prediction": prediction,
        "training_seed": seed,
        "schedule": schedule.to_dict(),
        "final_loss": history[-1] if history else None,
    }
    return adapter


def accuracy(adapter: ClassifierAdapter, x: np.ndarray, y: np.ndarray, batch: int = 500) -> float:
    hits = 0
    for i in range(0, len(x), batch):
        pred = adapter.predict(torch.from_numpy(x[i:i + batch]))
        hits += int((pred.numpy() == y[i:i + batch]).sum())
    return hits / len(x)


def train_toy_classifier(dataset: Dataset, architecture_id: str = "cnn_a", epochs: int = 6, seed: int = 0,
                         batch_size: int = 64, lr: float = 1e-3, min_accuracy: float = 0.85) -> ClassifierAdapter:
    """Supervised training; raises :class:`GateError` when held-out accuracy is below ``min_accuracy``."""
    x = torch.from_numpy(dataset.x_train)
    y = torch.from_numpy(dataset.y_train)
    history = []
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        net = build_classifier(architecture_id, dataset.num_classes)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        for epoch in range(epochs):
            net.train()
            losses = []
            for idx in _batches(len(x), batch_size, gen):
                loss = F.cross_entropy(net(x[idx]), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            log.info("%s epoch %d loss %.4f", architecture_id, epoch, history[-1])
    adapter = ClassifierAdapter(net, name=architecture_id)
    acc = accuracy(adapter, dataset.x_test, dataset.y_test)
    adapter.history = history
    adapter.descriptor = {
        "kind": "classifier",
        "architecture": architecture_id,
        "resolution": dataset.resolution,
        "class_count": dataset.num_classes,
        "training_seed": seed,
        "test_accuracy": acc,
        "final_loss": history[-1] if history else None,
    }
    if acc < min_accuracy:
        raise GateError(f"{architecture_id} held-out accuracy {acc:.3f} < {min_accuracy}",
                        {"model": architecture_id, "test_accuracy": acc, "required": min_accuracy})
    return adapter


def verification_accuracy(adapter: EmbedderAdapter, x: np.ndarray, y: np.ndarray, tau: float,
                          n_pairs: int = 1000, seed: int = 0):
    """Accuracy of ``cos >= tau`` as a same-class decision on random held-out pairs.

    Returns ``(accuracy, mean same-class similarity, mean different-class similarity)``.
    """
    rng = np.random.default_rng(seed)
    emb = torch.cat([adapter.embed(torch.from_numpy(x[i:i + 500])) for i in range(0, len(x), 500)])
    by_class = [np.flatnonzero(y == c) for c in np.unique(y)]
    same, diff = [], []
    for _ in range(n_pairs):
        members = by_class[rng.integers(len(by_class))]
        i, j = rng.choice(members, 2, replace=False)
        same.append(float(emb[i] @ emb[j]))
        i, j = rng.integers(len(y), size=2)
        while y[i] == y[j]:
            j = rng.integers(len(y))
        diff.append(float(emb[i] @ emb[j]))
    same, diff = np.array(same), np.array(diff)
    acc = (np.sum(same >= tau) + np.sum(diff < tau)) / (2 * n_pairs)
    return float(acc), float(same.mean()), float(diff.mean())


def train_toy_embedder(dataset: Dataset, epochs: int = 6, seed: int = 0, dim: int = 32, scale: float = 16.0,
                       batch_size: int = 64, lr: float = 1e-3, tau: float = 0.7,
                       min_verification: float = 0.90) -> EmbedderAdapter:
    """Cosine-softmax (normalised prototypes) training; gated on pair verification accuracy at ``tau``."""
    x = torch.from_numpy(dataset.x_train)
    y = torch.from_numpy(dataset.y_train)
    history = []
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        net = Embedder(dim, dataset.num_classes)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        for epoch in range(epochs):
            net.train()
            losses = []
            for idx in _batches(len(x), batch_size, gen):
                e = F.normalize(net(x[idx]), dim=-1)
                logits = scale * e @ F.normalize(net.prototypes, dim=-1).T
                loss = F.cross_entropy(logits, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
    adapter = EmbedderAdapter(net)
    acc, same, diff = verification_accuracy(adapter, dataset.x_test, dataset.y_test, tau, seed=seed)
    adapter.history = history
    adapter.descriptor = {
        "kind": "embedder",
        "architecture": "embedder",
        "embedding_dim": dim,
        "resolution": dataset.resolution,
        "training_seed": seed,
        "tau": tau,
        "verification_accuracy": acc,
        "mean_same_similarity": same,
        "mean_different_similarity": diff,
        "final_loss": history[-1] if history else None,
    }
    if acc < min_verification:
        raise GateError(f"embedder verification accuracy {acc:.3f} < {min_verification}",
                        {"model": "embedder", "verification_accuracy": acc, "required": min_verification})
    return adapter


# -- checkpoints ---------------------------------------------------------------

def _state_bytes(net) -> bytes:
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu().contiguous() for k, v in net.state_dict().items()}, buf)
    return buf.getvalue()


def save_model(adapter, directory, name: str) -> dict:
    """Write ``<name>.pt`` and ``<name>.json``; returns the descriptor (with the checkpoint hash)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = _state_bytes(adapter.net)
    (directory / f"{name}.pt").write_bytes(blob)
    desc = dict(adapter.descriptor)
    desc["checkpoint"] = f"{name}.pt"
    desc["sha256"] = hashlib.sha256(blob).hexdigest()
    desc["history"] = list(getattr(adapter, "history", []))
    (directory / f"{name}.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    return desc


def load_model(directory, name: str):
    directory = Path(directory)
    desc_path = directory / f"{name}.json"
    if not desc_path.is_file():
        raise IngestionError(f"model descriptor not found: {desc_path}")
    desc = json.loads(desc_path.read_text())
    ckpt = directory / desc["checkpoint"]
    if not ckpt.is_file():
        raise IngestionError(f"checkpoint not found: {ckpt}")
    blob = ckpt.read_bytes()
    if "sha256" in desc and hashlib.sha256(blob).hexdigest() != desc["sha256"]:
        raise IngestionError(f"checkpoint hash mismatch for {ckpt}")
    state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    kind = desc["kind"]
    if kind == "diffusion":
        net = TinyUNet(desc["channels"], desc["base_channels"], desc["class_count"])
        net.load_state_dict(state)
        prediction = desc.get("prediction", "eps")
        alpha_bar = NoiseSchedule.from_dict(desc["schedule"]).alpha_bar if prediction == "v" else None
        adapter = DiffusionAdapter(net, desc["class_count"], desc["class_dropout_rate"] > 0,
                                   (desc["channels"], desc["resolution"], desc["resolution"]), prediction, alpha_bar)
    elif kind == "classifier":
        net = build_classifier(desc["architecture"], desc["class_count"])
        net.load_state_dict(state)
        adapter = ClassifierAdapter(net, name=desc["architecture"])
    elif kind == "embedder":
        net = Embedder(desc["embedding_dim"])
        net.load_state_dict(state)
        adapter = EmbedderAdapter(net)
    else:
        raise IngestionError(f"unknown model kind {kind!r} in {desc_path}")
    adapter.descriptor = desc
    adapter.history = desc.get("history", [])
    return adapter
