"""Entropy-map and bottleneck discriminators. Both emit raw logits."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int
    widths: tuple[int, ...] = (16, 32, 64, 128)
    spatial_rank: int = 2
    zero_init_head: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("a discriminator needs at least 2 layers")
        if any(w <= 0 for w in self.widths) or self.in_channels <= 0:
            raise ValueError("widths and in_channels must be positive")
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")


def _conv(rank: int):
    return nn.Conv2d if rank == 2 else nn.Conv3d


def _check_channels(x: torch.Tensor, cfg: DiscriminatorConfig, name: str) -> None:
    if x.dim() != cfg.spatial_rank + 2 or x.shape[1] != cfg.in_channels:
        raise ValueError(
            f"{name} expects (B, {cfg.in_channels}, rank-{cfg.spatial_rank} grid), got {tuple(x.shape)}"
        )


class EntropyDiscriminator(nn.Module):
    """Fully convolutional per-position classifier over self-information maps.

    Every stride-2 layer halves the grid, so a 64x64 map with four layers
    yields a 4x4 logit grid.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        conv = _conv(cfg.spatial_rank)
        layers: list[nn.Module] = []
        cin = cfg.in_channels
        for w in cfg.widths:
            layers += [conv(cin, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.classifier = conv(cin, 1, 3, stride=1, padding=1)
        if cfg.zero_init_head:
            nn.init.zeros_(self.classifier.weight)
            nn.init.zeros_(self.classifier.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.cfg, "D_en")
        return self.classifier(self.features(x))


class KnowledgeDiscriminator(nn.Module):
    """Two convolutions, global average pooling and an affine map to one logit."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        conv = _conv(cfg.spatial_rank)
        w1, w2 = cfg.widths[0], cfg.widths[1]
        self.features = nn.Sequential(
            conv(cfg.in_channels, w1, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            conv(w1, w2, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc = nn.Linear(w2, 1)
        if cfg.zero_init_head:
            nn.init.zeros_(self.fc.weight)
            nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.cfg, "D_kn")
        h = self.features(x)
        return self.fc(h.flatten(2).mean(-1)).squeeze(-1)


def build_entropy_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> EntropyDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EntropyDiscriminator(cfg)


def build_knowledge_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> KnowledgeDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return KnowledgeDiscriminator(cfg)


def d_en_forward(net: EntropyDiscriminator, info_map) -> torch.Tensor:
    """Accepts a :class:`SelfInformationMap` or its channel tensor."""
    x = getattr(info_map, "channels", info_map)
    return net(x)


def d_kn_forward(net: KnowledgeDiscriminator, bottleneck: torch.Tensor) -> torch.Tensor:
    return net(bottleneck)
