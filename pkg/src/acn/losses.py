"""Differentiable objectives for adversarial co-training.

All tensors are laid out ``(batch, channel, *spatial)``. Logs are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-8
# |logit| beyond which sigmoid probabilities would leave [floor, 1 - floor]
LOGIT_CLAMP = math.log((1 - PROB_FLOOR) / PROB_FLOOR)

TERMS = ("dice_multi", "dice_uni", "con", "en_adv", "kn_adv", "mi")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, breakdown: dict | None = None):
        self.term = term
        self.breakdown = breakdown or {}
        super().__init__(f"non-finite value in loss term '{term}'" + (f": {self.breakdown}" if breakdown else ""))


@dataclass(frozen=True)
class LossWeights:
    multi: float = 0.2
    uni: float = 0.8
    entropy_adv: float = 0.001
    knowledge_adv: float = 0.0002
    mutual_info: float = 0.5
    ramp_amplitude: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")

    def coefficient(self, term: str) -> float:
        return {
            "dice_multi": self.multi,
            "dice_uni": self.uni,
            "en_adv": self.entropy_adv,
            "kn_adv": self.knowledge_adv,
            "mi": self.mutual_info,
        }[term]


@dataclass
class SelfInformationMap:
    channels: torch.Tensor  # (B, C, *spatial), -p log p
    scalar_map: torch.Tensor  # (B, *spatial), Shannon entropy


def soften_logits(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return torch.softmax(logits / temperature, dim=1)


def _xlogy(p: torch.Tensor) -> torch.Tensor:
    # 0 log 0 := 0 without NaN gradients
    return p * torch.log(p.clamp_min(PROB_FLOOR))


def consistency_loss(s_m: torch.Tensor, s_u: torch.Tensor) -> torch.Tensor:
    """Symmetric KL between two soft segmentations, averaged over classes and voxels."""
    if s_m.shape != s_u.shape:
        raise ValueError(f"shape mismatch: {tuple(s_m.shape)} vs {tuple(s_u.shape)}")
    log_m = torch.log(s_m.clamp_min(PROB_FLOOR))
    log_u = torch.log(s_u.clamp_min(PROB_FLOOR))
    kl = _xlogy(s_m) - s_m * log_u + _xlogy(s_u) - s_u * log_m
    n_classes = s_m.shape[1]
    n_voxels = kl.numel() // n_classes
    return kl.sum() / (n_classes * n_voxels)


def self_information(probs: torch.Tensor) -> SelfInformationMap:
    channels = -_xlogy(probs)
    return SelfInformationMap(channels, channels.sum(dim=1))


def _clamped(logits: torch.Tensor) -> torch.Tensor:
    return logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def adversarial_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator side: -mean[log D(real)] - mean[log(1 - D(fake))], from logits."""
    # -log sigmoid(x) = softplus(-x);  -log(1 - sigmoid(x)) = softplus(x)
    return F.softplus(-_clamped(real_logits)).mean() + F.softplus(_clamped(fake_logits)).mean()


def adversarial_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator side: -mean[log D(fake)]."""
    return F.softplus(-_clamped(fake_logits)).mean()


def dice_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    eps: float = 1e-5,
    include_background: bool = False,
) -> torch.Tensor:
    """1 - mean soft Dice over classes; sums run over batch and space."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    dims = [0] + list(range(2, probs.dim()))
    inter = (probs * target).sum(dims)
    denom = probs.sum(dims) + target.sum(dims)
    per_class = (2 * inter + eps) / (denom + eps)
    if not include_background and probs.shape[1] > 1:
        per_class = per_class[1:]
    return 1.0 - per_class.mean()


def one_hot(classes: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, *spatial) integer classes -> (B, C, *spatial) float one-hot."""
    oh = F.one_hot(classes.long(), num_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def ramp_up(step: float, length: float, amplitude: float = 0.1) -> float:
    """Gaussian warm-up weight amplitude * exp(-5 (1 - S/L)^2), S clamped to L."""
    if length <= 0:
        raise ValueError(f"ramp length must be > 0, got {length}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    phase = min(step, length) / length
    return amplitude * math.exp(-5.0 * (1.0 - phase) ** 2)


def total_loss(
    parts: dict[str, torch.Tensor | float],
    weights: LossWeights,
    step: float,
    ramp_length: float,
) -> tuple[torch.Tensor | float, dict[str, float]]:
    """Weighted sum of the available terms.

    ``parts`` maps term names in :data:`TERMS` to unweighted values; terms
    absent from ``parts`` are switched off. Returns the total and the
    weighted value of every present term.
    """
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    raw = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
    for term in TERMS:
        if term in raw and not math.isfinite(raw[term]):
            raise NonFiniteLossError(term, raw)
    omega = ramp_up(step, ramp_length, weights.ramp_amplitude)
    total = 0.0
    breakdown = {}
    for term in TERMS:
        if term not in parts:
            continue
        coef = omega if term == "con" else weights.coefficient(term)
        weighted = coef * parts[term]
        breakdown[term] = coef * raw[term]
        total = total + weighted
    return total, breakdown
