"""U-Net style encoder-decoder shared by the multimodal and unimodal paths."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 4
    num_classes: int = 4
    levels: int = 4
    base_width: int = 8
    spatial_rank: int = 2
    zero_init_head: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**k for k in range(self.levels)]

    @property
    def size_factor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class BackboneOutput:
    logits: torch.Tensor
    encoder_features: list[torch.Tensor]

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.encoder_features[-1]


def _ops(rank: int):
    if rank == 2:
        return nn.Conv2d, nn.InstanceNorm2d, nn.ConvTranspose2d, F.max_pool2d
    return nn.Conv3d, nn.InstanceNorm3d, nn.ConvTranspose3d, F.max_pool3d


class ConvBlock(nn.Sequential):
    """(conv -> instance norm -> leaky ReLU) x 2"""

    def __init__(self, rank: int, cin: int, cout: int):
        conv, norm, _, _ = _ops(rank)
        super().__init__(
            conv(cin, cout, 3, padding=1),
            norm(cout, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            conv(cout, cout, 3, padding=1),
            norm(cout, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )


class UNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        conv, _, up, pool = _ops(cfg.spatial_rank)
        self._pool = pool
        widths = cfg.widths
        self.encoder = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.encoder.append(ConvBlock(cfg.spatial_rank, cin, w))
            cin = w
        self.upsamplers = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w_hi, w_lo in zip(widths[::-1], widths[-2::-1]):
            self.upsamplers.append(up(w_hi, w_lo, 2, stride=2))
            self.decoder.append(ConvBlock(cfg.spatial_rank, 2 * w_lo, w_lo))
        self.head = conv(widths[0], cfg.num_classes, 1)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.dim() != cfg.spatial_rank + 2:
            raise ValueError(f"expected a batch of rank-{cfg.spatial_rank} grids, got shape {tuple(x.shape)}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        bad = [s for s in x.shape[2:] if s % cfg.size_factor]
        if bad:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {cfg.size_factor} "
                f"(2^(levels-1) for {cfg.levels} levels)"
            )

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        self.check_input(x)
        feats = []
        h = x
        for k, block in enumerate(self.encoder):
            if k:
                h = self._pool(h, 2)
            h = block(h)
            feats.append(h)
        for up, block, skip in zip(self.upsamplers, self.decoder, feats[-2::-1]):
            h = block(torch.cat([up(h), skip], dim=1))
        return BackboneOutput(self.head(h), feats)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> UNet:
    """Construct a U-Net whose initial parameters depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


def forward(net: UNet, x: torch.Tensor) -> BackboneOutput:
    return net(x)


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
