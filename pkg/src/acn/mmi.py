"""Variational mutual-information transfer between encoder levels.

A Gaussian q(m | u) with a learned mean network and per-channel variance
lower-bounds the mutual information between paired multimodal (m) and
unimodal (u) encoder features; minimizing -log q tightens the bound.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

_SIGMA_FLOOR = 1e-6


def level_weights(levels: int) -> torch.Tensor:
    """Normalized linearly increasing weights k / sum(1..K)."""
    if levels < 1:
        raise ValueError("need at least one level")
    k = torch.arange(1, levels + 1, dtype=torch.float64)
    return k / k.sum()


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class VariationalHead(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, spatial_rank: int = 2, zero_init: bool = False):
        super().__init__()
        conv = nn.Conv2d if spatial_rank == 2 else nn.Conv3d
        self.in_channels, self.out_channels, self.spatial_rank = in_channels, out_channels, spatial_rank
        self.mean = nn.Sequential(
            conv(in_channels, out_channels, 1),
            nn.ReLU(),
            conv(out_channels, out_channels, 1),
            nn.ReLU(),
            conv(out_channels, out_channels, 1),
        )
        if zero_init:
            nn.init.zeros_(self.mean[-1].weight)
            nn.init.zeros_(self.mean[-1].bias)
        # sigma = softplus(raw) + floor, starting at 1
        self.raw_sigma = nn.Parameter(torch.full((out_channels,), _inverse_softplus(1.0 - _SIGMA_FLOOR)))

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.raw_sigma) + _SIGMA_FLOOR

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.dim() != self.spatial_rank + 2 or u.shape[1] != self.in_channels:
            raise ValueError(f"head expects {self.in_channels} channels, got shape {tuple(u.shape)}")
        return self.mean(u)


def variational_mean(head: VariationalHead, u: torch.Tensor) -> torch.Tensor:
    return head(u)


def neg_log_q(m: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """sum_{c,space} [log sigma_c + (m - mu)^2 / (2 sigma_c^2)], averaged over batch.

    The normalizing constant is omitted.
    """
    if m.shape != mu.shape:
        raise ValueError(f"shape mismatch: {tuple(m.shape)} vs {tuple(mu.shape)}")
    if sigma.shape != (m.shape[1],):
        raise ValueError(f"sigma must have one entry per channel ({m.shape[1]}), got {tuple(sigma.shape)}")
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be strictly positive")
    s = sigma.view((1, -1) + (1,) * (m.dim() - 2))
    per_elem = torch.log(s) + (m - mu) ** 2 / (2 * s**2)
    return per_elem.sum() / m.shape[0]


def build_heads(channels: Sequence[int], spatial_rank: int = 2, seed: int = 0, zero_init: bool = False) -> nn.ModuleList:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.ModuleList(VariationalHead(c, c, spatial_rank, zero_init) for c in channels)


def mi_loss(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor]],
    heads: Sequence[VariationalHead],
    gammas: torch.Tensor | Sequence[float] | None = None,
    detach_target: bool = True,
) -> torch.Tensor:
    """Weighted sum over levels of -log q(m_k | u_k).

    With ``detach_target`` the multimodal features are fixed targets and no
    gradient reaches the multimodal path.
    """
    if len(pairs) != len(heads):
        raise ValueError(f"{len(pairs)} feature pairs but {len(heads)} heads")
    if gammas is None:
        gammas = level_weights(len(pairs))
    if len(gammas) != len(pairs):
        raise ValueError(f"{len(gammas)} level weights for {len(pairs)} levels")
    total = 0.0
    for (m, u), head, g in zip(pairs, heads, gammas):
        target = m.detach() if detach_target else m
        total = total + float(g) * neg_log_q(target, head(u), head.sigma)
    return total
