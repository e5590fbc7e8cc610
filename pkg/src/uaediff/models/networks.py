"""Desk-scale networks: a small time/class-conditioned U-Net and two CNN classifiers plus an embedder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Three-resolution U-Net (32 -> 16 -> 8).

    Label index ``num_classes`` is the null token used by the unconditional branch.
    """

    def __init__(self, in_channels=3, base_channels=16, num_classes=10):
        super().__init__()
        ch = base_channels
        emb_dim = ch * 4
        self.base_channels = ch
        self.num_classes = num_classes
        self.time_mlp = nn.Sequential(nn.Linear(ch, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.label_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.inp = nn.Conv2d(in_channels, ch, 3, padding=1)
        self.down1 = ResBlock(ch, ch, emb_dim)
        self.down2 = ResBlock(ch, 2 * ch, emb_dim)
        self.down3 = ResBlock(2 * ch, 2 * ch, emb_dim)
        self.mid = ResBlock(2 * ch, 2 * ch, emb_dim)
        self.up3 = ResBlock(4 * ch, 2 * ch, emb_dim)
        self.up2 = ResBlock(4 * ch, ch, emb_dim)
        self.up1 = ResBlock(2 * ch, ch, emb_dim)
        self.out = nn.Sequential(nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, in_channels, 3, padding=1))
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def forward(self, x, t, y):
        emb = self.time_mlp(timestep_embedding(t, self.base_channels)) + self.label_emb(y)
        h1 = self.down1(self.inp(x), emb)
        h2 = self.down2(F.avg_pool2d(h1, 2), emb)
        h3 = self.down3(F.avg_pool2d(h2, 2), emb)
        u = self.mid(h3, emb)
        u = self.up3(torch.cat([u, h3], 1), emb)
        u = self.up2(torch.cat([F.interpolate(u, scale_factor=2.0, mode="nearest"), h2], 1), emb)
        u = self.up1(torch.cat([F.interpolate(u, scale_factor=2.0, mode="nearest"), h1], 1), emb)
        return self.out(u)


def _conv_relu(cin, cout, k):
    return [nn.Conv2d(cin, cout, k, padding=k // 2), nn.ReLU()]


class CNNClassifier(nn.Module):
    """Convolutional trunk (``features``), pooled to a coarse grid, then a two-layer head.

    ``embed`` returns the penultimate activations, used as the desk-FID feature space.
    """

    def __init__(self, features: nn.Sequential, feat_channels: int, hidden: int, num_classes: int, pooled: int = 4):
        super().__init__()
        self.features = features
        self.pooled = pooled
        self.fc1 = nn.Linear(feat_channels * pooled * pooled, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        self.act = nn.ReLU()

    def embed(self, x):
        h = F.adaptive_avg_pool2d(self.features(x), self.pooled).flatten(1)
        return self.act(self.fc1(h))

    def forward(self, x):
        return self.fc2(self.embed(x))


ARCHITECTURES = ("cnn_a", "cnn_b")


def build_classifier(architecture_id: str, num_classes: int = 10) -> CNNClassifier:
    if architecture_id == "cnn_a":
        features = nn.Sequential()
        features.add_module("block1", nn.Sequential(*_conv_relu(3, 32, 3), *_conv_relu(32, 32, 3), nn.MaxPool2d(2)))
        features.add_module("block2", nn.Sequential(*_conv_relu(32, 64, 3), *_conv_relu(64, 64, 3), nn.MaxPool2d(2)))
        features.add_module("block3", nn.Sequential(*_conv_relu(64, 64, 3)))
        return CNNClassifier(features, 64, 128, num_classes)
    if architecture_id == "cnn_b":
        features = nn.Sequential()
        features.add_module("block1", nn.Sequential(*_conv_relu(3, 24, 5), nn.AvgPool2d(2)))
        features.add_module("block2", nn.Sequential(*_conv_relu(24, 48, 5), nn.AvgPool2d(2)))
        features.add_module("block3", nn.Sequential(*_conv_relu(48, 96, 3)))
        return CNNClassifier(features, 96, 64, num_classes)
    raise ValueError(f"unknown architecture {architecture_id!r}; choose from {ARCHITECTURES}")


class Embedder(nn.Module):
    """CNN trunk -> linear projection; normalisation happens in the adapter."""

    def __init__(self, dim=32, num_classes=10):
        super().__init__()
        self.features = nn.Sequential(
            *_conv_relu(3, 32, 3), nn.MaxPool2d(2),
            *_conv_relu(32, 64, 3), nn.MaxPool2d(2),
            *_conv_relu(64, 64, 3),
        )
        self.proj = nn.Linear(64 * 16, dim)
        # class prototypes for the cosine-softmax training objective
        self.prototypes = nn.Parameter(torch.randn(num_classes, dim) * 0.1)

    def forward(self, x):
        return self.proj(F.adaptive_avg_pool2d(self.features(x), 4).flatten(1))
