"""Module ablation on synthetic data: consistency-only co-training versus
variants with the entropy/knowledge adversaries and MI transfer switched on."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Case, SynthConfig, split_cases, synth_generate, zscore_normalize
from .trainer import TrainConfig, evaluate, fit, mean_entropy

log = logging.getLogger(__name__)

VARIANTS = {
    "con": dict(use_ena=False, use_kna=False, use_mmi=False),
    "con+ena": dict(use_ena=True, use_kna=False, use_mmi=False),
    "con+ena+kna": dict(use_ena=True, use_kna=True, use_mmi=False),
    "con+ena+mmi": dict(use_ena=True, use_kna=False, use_mmi=True),
    "acn": dict(use_ena=True, use_kna=True, use_mmi=True),
}


def synthetic_cases(n_cases: int, shape=(64, 64), seed: int = 0, **synth_kwargs) -> list[Case]:
    seeds = np.random.SeedSequence(seed).generate_state(n_cases)
    cases = []
    for i, s in enumerate(seeds):
        vol, labels = synth_generate(SynthConfig(spatial_shape=shape, seed=int(s), **synth_kwargs))
        cases.append(Case(f"case_{i:04d}", zscore_normalize(vol), labels))
    return cases


@dataclass
class AblationResult:
    variant: str
    seed: int
    mean_dsc: float
    mean_entropy: float
    means: dict = field(default_factory=dict)


def run_variant(base: TrainConfig, variant: str, seed: int, train: Sequence[Case], val: Sequence[Case]) -> AblationResult:
    cfg = dataclasses.replace(base, seed=seed, **VARIANTS[variant])
    trainer = fit(cfg, train, val).trainer
    report = evaluate(trainer, val)
    ent = mean_entropy(trainer, val)
    log.info("%s seed %d: DSC %.4f entropy %.4f", variant, seed, report.mean_dsc, ent)
    return AblationResult(variant, seed, report.mean_dsc, ent, report.means)


def run_ablation(base: TrainConfig, variants: Sequence[str] = ("con", "acn"), seeds: Sequence[int] = (0, 1, 2),
                 n_train: int = 40, n_val: int = 20, data_seed: int = 0,
                 synth: dict | None = None) -> list[AblationResult]:
    cases = synthetic_cases(n_train + n_val, base.patch_size, seed=data_seed, **(synth or {}))
    train, val = split_cases(cases, val_fraction=n_val / (n_train + n_val), seed=data_seed)
    return [run_variant(base, v, s, train, val) for v in variants for s in seeds]


def summarize(results: Sequence[AblationResult]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for variant in dict.fromkeys(r.variant for r in results):
        rows = [r for r in results if r.variant == variant]
        out[variant] = {
            "mean_dsc": float(np.mean([r.mean_dsc for r in rows])),
            "mean_entropy": float(np.mean([r.mean_entropy for r in rows])),
            "runs": len(rows),
        }
    return out
