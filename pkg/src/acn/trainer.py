"""Co-training loop: segmenter step against the combined objective, then
discriminator steps; poly schedule, sliding-window evaluation, checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import losses
from .backbone import BackboneConfig, UNet, build_backbone, param_checksum
from .data import (
    SUBREGIONS,
    Case,
    ModalityMask,
    apply_modality_mask,
    classes_to_labels,
    extract_patch,
    labels_to_classes,
    map_nested_subregions,
    sliding_window_origins,
)
from .discriminators import (
    DiscriminatorConfig,
    build_entropy_discriminator,
    build_knowledge_discriminator,
)
from .losses import LossWeights, NonFiniteLossError
from .metrics import dsc, hd95_flagged
from .mmi import build_heads, level_weights, mi_loss

log = logging.getLogger(__name__)

COMPONENTS = ("multimodal", "unimodal", "d_en", "d_kn", "mmi_heads")
COMPONENT_LABELS = {"multimodal": "multimodal path", "unimodal": "unimodal path", "d_en": "D_en", "d_kn": "D_kn", "mmi_heads": "MMI heads"}


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mask: str = "t1c"
    weights: LossWeights = field(default_factory=LossWeights)
    base_lr: float = 1e-4
    d_lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    epoch_max: int = 300
    poly_power: float = 0.9
    batch_size: int = 1
    steps_per_epoch: int = 1
    ramp_length: float | None = None
    use_ena: bool = True
    use_kna: bool = True
    use_mmi: bool = True
    seed: int = 0
    eval_interval: int = 1
    patch_size: tuple[int, ...] = (64, 64)
    levels: int = 4
    base_width: int = 8
    num_classes: int = 4
    temperature: float = 1.0
    mmi_detach_target: bool = True
    d_widths: tuple[int, ...] = (16, 32, 64, 128)
    eval_overlap: float = 0.5
    zero_init_head: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.patch_size = tuple(int(s) for s in self.patch_size)
        self.betas = tuple(float(b) for b in self.betas)
        self.d_widths = tuple(int(w) for w in self.d_widths)
        ModalityMask.parse(self.mask)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.epoch_max < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epoch_max, steps_per_epoch and batch_size must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if len(self.patch_size) not in (2, 3):
            raise ValueError("patch_size must be 2D or 3D")
        factor = 2 ** (self.levels - 1)
        if any(s % factor for s in self.patch_size):
            raise ValueError(f"patch size {self.patch_size} not divisible by {factor} for {self.levels} levels")

    @property
    def modality_mask(self) -> ModalityMask:
        return ModalityMask.parse(self.mask)

    @property
    def spatial_rank(self) -> int:
        return len(self.patch_size)

    @property
    def total_steps(self) -> int:
        return self.epoch_max * self.steps_per_epoch

    @property
    def resolved_ramp_length(self) -> float:
        return self.ramp_length if self.ramp_length else max(1.0, 0.4 * self.total_steps)

    def backbone_config(self, in_channels: int) -> BackboneConfig:
        return BackboneConfig(in_channels, self.num_classes, self.levels, self.base_width, self.spatial_rank,
                              self.zero_init_head)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def poly_lr(epoch: float, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epoch_max:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epoch_max}]")
    return cfg.base_lr * (1.0 - epoch / cfg.epoch_max) ** cfg.poly_power


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def _as_tensor(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def make_batch(cases: Sequence[Case], mask: ModalityMask, patch_size: Sequence[int],
               rng: np.random.Generator, batch_size: int, levels: int | None = None) -> dict:
    """Sample ``batch_size`` cases with random patch origins."""
    xs, ys = [], []
    for _ in range(batch_size):
        case = cases[int(rng.integers(len(cases)))]
        shape = case.volume.spatial_shape
        origin = [int(rng.integers(n - s + 1)) for n, s in zip(shape, patch_size)]
        patch, lab = extract_patch(case.volume, case.labels, origin, patch_size, levels)
        xs.append(patch)
        ys.append(labels_to_classes(lab))
    x_multi = np.stack(xs)
    return {
        "x_multi": _as_tensor(x_multi),
        "x_uni": _as_tensor(x_multi[:, mask.indices]),
        "target": torch.from_numpy(np.stack(ys)),
    }


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class CoTrainer:
    """Both segmentation paths, both discriminators, MMI heads and their optimizers."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        mask = cfg.modality_mask
        rank = cfg.spatial_rank
        self.multimodal: UNet = build_backbone(cfg.backbone_config(4), seed=cfg.seed * 7 + 1)
        self.unimodal: UNet = build_backbone(cfg.backbone_config(mask.count), seed=cfg.seed * 7 + 2)
        widths = cfg.backbone_config(4).widths
        self.d_en = build_entropy_discriminator(
            DiscriminatorConfig(cfg.num_classes, cfg.d_widths, rank), seed=cfg.seed * 7 + 3)
        self.d_kn = build_knowledge_discriminator(
            DiscriminatorConfig(widths[-1], cfg.d_widths[:2], rank), seed=cfg.seed * 7 + 4)
        self.mmi_heads = build_heads(widths, rank, seed=cfg.seed * 7 + 5)
        self.gammas = level_weights(cfg.levels)

        d_lr = cfg.d_lr or cfg.base_lr
        adam = lambda params, lr: torch.optim.Adam(params, lr=lr, betas=cfg.betas)  # noqa: E731
        self.optimizers = {
            "multimodal": adam(self.multimodal.parameters(), cfg.base_lr),
            "unimodal": adam(self.unimodal.parameters(), cfg.base_lr),
            "mmi_heads": adam(self.mmi_heads.parameters(), cfg.base_lr),
            "d_en": adam(self.d_en.parameters(), d_lr),
            "d_kn": adam(self.d_kn.parameters(), d_lr),
        }
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.best_score = -math.inf
        self.rng = np.random.default_rng(cfg.seed)

    # -- bookkeeping --------------------------------------------------------
    @property
    def modules(self) -> dict[str, torch.nn.Module]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def checksums(self) -> dict[str, str]:
        return {name: param_checksum(m) for name, m in self.modules.items()}

    def set_lr(self, epoch: float) -> float:
        lr = poly_lr(epoch, self.cfg)
        d_scale = (self.cfg.d_lr or self.cfg.base_lr) / self.cfg.base_lr
        for name, opt in self.optimizers.items():
            for group in opt.param_groups:
                group["lr"] = lr * d_scale if name.startswith("d_") else lr
        return lr

    # -- one optimization step ---------------------------------------------
    def train_step(self, batch: dict) -> dict[str, float]:
        result, cache = self.generator_step(batch)
        result.update(self.discriminator_step(cache))
        self.step += 1
        return result

    def generator_step(self, batch: dict) -> tuple[dict[str, float], dict]:
        """Phase A. Returns the itemized losses and the detached inputs for phase B."""
        cfg, w = self.cfg, self.cfg.weights
        x_m, x_u, target = batch["x_multi"], batch["x_uni"], batch["target"]
        onehot = losses.one_hot(target, cfg.num_classes).to(x_m.dtype)
        for m in (self.multimodal, self.unimodal, self.d_en, self.d_kn, self.mmi_heads):
            m.train()

        # Phase A: segmenters + MMI heads, discriminators frozen
        _set_requires_grad(self.d_en, False)
        _set_requires_grad(self.d_kn, False)
        for name in ("multimodal", "unimodal", "mmi_heads"):
            self.optimizers[name].zero_grad(set_to_none=True)

        out_m = self.multimodal(x_m)
        out_u = self.unimodal(x_u)
        p_m = torch.softmax(out_m.logits, dim=1)
        p_u = torch.softmax(out_u.logits, dim=1)
        parts = {
            "dice_multi": losses.dice_loss(p_m, onehot),
            "dice_uni": losses.dice_loss(p_u, onehot),
            "con": losses.consistency_loss(
                losses.soften_logits(out_m.logits, cfg.temperature),
                losses.soften_logits(out_u.logits, cfg.temperature)),
        }
        info_u = losses.self_information(p_u).channels
        if cfg.use_ena:
            parts["en_adv"] = losses.adversarial_g_loss(self.d_en(info_u))
        if cfg.use_kna:
            parts["kn_adv"] = losses.adversarial_g_loss(self.d_kn(out_u.bottleneck))
        if cfg.use_mmi:
            pairs = list(zip(out_m.encoder_features, out_u.encoder_features))
            parts["mi"] = mi_loss(pairs, self.mmi_heads, self.gammas, cfg.mmi_detach_target)

        try:
            total, breakdown = losses.total_loss(parts, w, self.step, cfg.resolved_ramp_length)
        except NonFiniteLossError as err:
            raise NonFiniteLossError(err.term, {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}) from None
        total.backward()
        for name in ("multimodal", "unimodal", "mmi_heads"):
            self.optimizers[name].step()
        _set_requires_grad(self.d_en, True)
        _set_requires_grad(self.d_kn, True)

        result = {f"raw_{k}": float(v.detach()) for k, v in parts.items()}
        result.update({f"w_{k}": v for k, v in breakdown.items()})
        result["total"] = float(total.detach())
        result["omega"] = losses.ramp_up(self.step, cfg.resolved_ramp_length, w.ramp_amplitude)

        cache = {
            "info_m": losses.self_information(p_m.detach()).channels,
            "info_u": info_u.detach(),
            "r_m": out_m.bottleneck.detach(),
            "r_u": out_u.bottleneck.detach(),
        }
        return result, cache

    def discriminator_step(self, cache: dict) -> dict[str, float]:
        """Phase B: discriminators on detached generator outputs."""
        cfg, result = self.cfg, {}
        if cfg.use_ena:
            opt = self.optimizers["d_en"]
            opt.zero_grad(set_to_none=True)
            d_loss = losses.adversarial_d_loss(self.d_en(cache["info_m"]), self.d_en(cache["info_u"]))
            d_loss.backward()
            opt.step()
            result["d_en"] = float(d_loss.detach())
        if cfg.use_kna:
            opt = self.optimizers["d_kn"]
            opt.zero_grad(set_to_none=True)
            d_loss = losses.adversarial_d_loss(self.d_kn(cache["r_m"]), self.d_kn(cache["r_u"]))
            d_loss.backward()
            opt.step()
            result["d_kn"] = float(d_loss.detach())
        for key in ("d_en", "d_kn"):
            if key in result and not math.isfinite(result[key]):
                raise NonFiniteLossError(key, result)
        return result

    # -- inference ------------------------------------------------------------
    @torch.no_grad()
    def predict_probs(self, net: UNet, x: np.ndarray) -> np.ndarray:
        """Sliding-window softmax over a (channels, *spatial) array, overlap-averaged."""
        net.eval()
        size = tuple(min(p, n) for p, n in zip(self.cfg.patch_size, x.shape[1:]))
        acc = np.zeros((self.cfg.num_classes,) + x.shape[1:])
        hits = np.zeros(x.shape[1:])
        for origin in sliding_window_origins(x.shape[1:], size, self.cfg.eval_overlap):
            patch, _ = extract_patch(x, None, origin, size)
            probs = torch.softmax(net(_as_tensor(patch[None])).logits, dim=1)[0].double().numpy()
            sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
            acc[(slice(None),) + sl] += probs
            hits[sl] += 1
        return acc / hits

    def predict_case(self, case: Case, path: str = "unimodal") -> np.ndarray:
        if path == "unimodal":
            x = apply_modality_mask(case.volume, self.cfg.modality_mask)
            return self.predict_probs(self.unimodal, x)
        return self.predict_probs(self.multimodal, case.volume.channels)

    def save(self, path: str | Path) -> Path:
        return checkpoint_save(self, path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def score_labels(pred_labels: np.ndarray, true_labels: np.ndarray, spacing=None) -> dict[str, float]:
    """DSC / HD95 for ET, TC, WT; ``<region>_hd95_sentinel`` flags empty-mask cases."""
    pred, true = map_nested_subregions(pred_labels), map_nested_subregions(true_labels)
    row = {}
    for (name, p), (_, t) in zip(pred.items(), true.items()):
        row[f"{name}_dsc"] = dsc(p, t)
        row[f"{name}_hd95"], row[f"{name}_hd95_sentinel"] = hd95_flagged(p, t, spacing)
    return row


@dataclass
class EvalReport:
    mask: str
    per_case: list[dict]

    @property
    def means(self) -> dict[str, float]:
        out = {}
        for region in SUBREGIONS:
            for metric in ("dsc", "hd95"):
                key = f"{region}_{metric}"
                out[key] = float(np.mean([r[key] for r in self.per_case])) if self.per_case else float("nan")
        return out

    @property
    def mean_dsc(self) -> float:
        m = self.means
        return float(np.mean([m[f"{r}_dsc"] for r in SUBREGIONS]))


def evaluate(trainer: "CoTrainer | str | Path", cases: Sequence[Case], mask: ModalityMask | str | None = None,
             path: str = "unimodal") -> EvalReport:
    if not isinstance(trainer, CoTrainer):
        trainer = checkpoint_load(trainer)
    own = trainer.cfg.modality_mask
    if mask is not None:
        mask = mask if isinstance(mask, ModalityMask) else ModalityMask.parse(mask)
        if mask != own:
            raise ValueError(
                f"checkpoint was trained for modalities '{own}' ({own.count} channels), not '{mask}' ({mask.count})")
    rows = []
    for case in cases:
        probs = trainer.predict_case(case, path)
        pred = classes_to_labels(probs.argmax(0))
        rows.append({"case_id": case.case_id, **score_labels(pred, case.labels, case.volume.spacing)})
    return EvalReport(str(own), rows)


def mean_entropy(trainer: CoTrainer, cases: Sequence[Case], path: str = "unimodal") -> float:
    vals = []
    for case in cases:
        probs = torch.from_numpy(trainer.predict_case(case, path))[None]
        vals.append(float(losses.self_information(probs).scalar_map.mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    trainer: CoTrainer
    history: list[dict]
    best_dir: Path | None = None
    last_dir: Path | None = None
    losses: list[dict] = field(default_factory=list)


def history_rows(history: Sequence[dict]) -> list[dict]:
    rows = []
    for event in history:
        for region in SUBREGIONS:
            rows.append({"epoch": event["epoch"], "subregion": region,
                         "dsc": event[f"{region}_dsc"], "hd95": event[f"{region}_hd95"]})
    return rows


def write_history_csv(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "subregion", "dsc", "hd95"])
        writer.writeheader()
        writer.writerows(history_rows(history))
    return path


def fit(cfg: TrainConfig, train_cases: Sequence[Case], val_cases: Sequence[Case] = (),
        out_dir: str | Path | None = None, trainer: CoTrainer | None = None) -> FitResult:
    """Train for ``cfg.epoch_max`` epochs (resuming ``trainer`` if given)."""
    if not train_cases:
        raise ValueError("training set is empty")
    trainer = trainer or CoTrainer(cfg)
    eval_cases = val_cases or train_cases
    out_dir = Path(out_dir) if out_dir is not None else None
    result = FitResult(trainer, trainer.history)
    mask = cfg.modality_mask
    while trainer.epoch < cfg.epoch_max:
        trainer.set_lr(trainer.epoch)
        for _ in range(cfg.steps_per_epoch):
            batch = make_batch(train_cases, mask, cfg.patch_size, trainer.rng, cfg.batch_size, cfg.levels)
            result.losses.append(trainer.train_step(batch))
        trainer.epoch += 1
        if trainer.epoch % cfg.eval_interval == 0 or trainer.epoch == cfg.epoch_max:
            report = evaluate(trainer, eval_cases)
            event = {"epoch": trainer.epoch, "step": trainer.step, **report.means, "mean_dsc": report.mean_dsc}
            trainer.history.append(event)
            log.info("epoch %d: mean DSC %.4f", trainer.epoch, report.mean_dsc)
            if report.mean_dsc > trainer.best_score:
                trainer.best_score = report.mean_dsc
                if out_dir is not None:
                    result.best_dir = checkpoint_save(trainer, out_dir / "best")
    if out_dir is not None:
        result.last_dir = checkpoint_save(trainer, out_dir / "last")
        if result.best_dir is None and (out_dir / "best").exists():
            result.best_dir = out_dir / "best"
        write_history_csv(trainer.history, out_dir / "metrics.csv")
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def checkpoint_save(trainer: CoTrainer, path: str | Path) -> Path:
    """Write parameter blobs, optimizer states and a YAML manifest to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, module in trainer.modules.items():
        torch.save(module.state_dict(), path / f"{name}.pt")
        blobs[name] = f"{name}.pt"
    for name, opt in trainer.optimizers.items():
        torch.save(opt.state_dict(), path / f"opt_{name}.pt")
        blobs[f"opt_{name}"] = f"opt_{name}.pt"
    torch.save({"numpy": trainer.rng.bit_generator.state}, path / "rng.pt")
    blobs["rng"] = "rng.pt"
    manifest = {
        "format": "acn-checkpoint/1",
        "config": trainer.cfg.to_dict(),
        "config_hash": trainer.cfg.config_hash(),
        "step": trainer.step,
        "epoch": trainer.epoch,
        "best_score": None if math.isinf(trainer.best_score) else float(trainer.best_score),
        "history": copy.deepcopy(trainer.history),
        "blobs": {k: {"file": v, "sha256": _sha256(path / v)} for k, v in blobs.items()},
    }
    with (path / "manifest.yaml").open("w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return path


def _blob_label(key: str) -> str:
    if key.startswith("opt_"):
        return f"optimizer state of {COMPONENT_LABELS.get(key[4:], key[4:])}"
    return COMPONENT_LABELS.get(key, key)


def checkpoint_load(path: str | Path, cfg: TrainConfig | None = None) -> CoTrainer:
    """Rebuild a :class:`CoTrainer` from ``path``.

    If ``cfg`` is given its hash must equal the one recorded at save time.
    """
    path = Path(path)
    manifest_path = path / "manifest.yaml"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = yaml.safe_load(manifest_path.read_text())
    stored_cfg = TrainConfig.from_dict(manifest["config"])
    recorded = manifest["config_hash"]
    if stored_cfg.config_hash() != recorded:
        raise CheckpointError(
            f"config hash mismatch: manifest records {recorded}, stored config hashes to {stored_cfg.config_hash()}")
    if cfg is not None and cfg.config_hash() != recorded:
        raise CheckpointError(f"config hash mismatch: checkpoint {recorded}, requested {cfg.config_hash()}")

    trainer = CoTrainer(stored_cfg)
    blobs = manifest.get("blobs", {})
    expected = list(COMPONENTS) + [f"opt_{n}" for n in trainer.optimizers] + ["rng"]
    states = {}
    for key in expected:
        entry = blobs.get(key)
        blob = path / entry["file"] if entry else path / f"{key}.pt"
        if entry is None or not blob.is_file():
            raise CheckpointError(f"checkpoint is missing the {_blob_label(key)} blob ({blob.name})")
        if _sha256(blob) != entry["sha256"]:
            raise CheckpointError(f"corrupt {_blob_label(key)} blob ({blob.name}): checksum mismatch")
        try:
            states[key] = torch.load(blob, map_location="cpu", weights_only=False)
        except Exception as exc:  # noqa: BLE001
            raise CheckpointError(f"corrupt {_blob_label(key)} blob ({blob.name}): {exc}") from exc
    for name, module in trainer.modules.items():
        try:
            module.load_state_dict(states[name])
        except RuntimeError as exc:
            raise CheckpointError(f"corrupt {_blob_label(name)} blob: {exc}") from exc
    for name, opt in trainer.optimizers.items():
        opt.load_state_dict(states[f"opt_{name}"])
    trainer.rng.bit_generator.state = states["rng"]["numpy"]
    trainer.step = int(manifest["step"])
    trainer.epoch = int(manifest["epoch"])
    trainer.history = list(manifest.get("history") or [])
    best = manifest.get("best_score")
    trainer.best_score = -math.inf if best is None else float(best)
    return trainer
