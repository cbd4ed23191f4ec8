"""Multimodal MRI volumes: synthesis, BraTS ingestion, normalization, patching
and modality subsets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MODALITIES: tuple[str, ...] = ("flair", "t1", "t1ce", "t2")
MODALITY_TOKENS: tuple[str, ...] = ("fl", "t1", "t1c", "t2")
DISPLAY_NAMES: tuple[str, ...] = ("Flair", "T1", "T1ce", "T2")

BACKGROUND, NCR_NET, EDEMA, ENHANCING = 0, 1, 2, 4
VALID_LABELS: tuple[int, ...] = (BACKGROUND, NCR_NET, EDEMA, ENHANCING)
# class index <-> BraTS label value
CLASS_TO_LABEL = np.array([BACKGROUND, NCR_NET, EDEMA, ENHANCING], dtype=np.int64)

NIFTI_SUFFIXES = (".nii.gz", ".nii")


class DataError(ValueError):
    """Raised for malformed volumes, labels, masks or case directories."""


@dataclass(frozen=True)
class ModalityMask:
    present: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.present) != len(MODALITIES):
            raise DataError(f"modality mask needs {len(MODALITIES)} entries, got {len(self.present)}")
        object.__setattr__(self, "present", tuple(bool(p) for p in self.present))
        if not any(self.present):
            raise DataError("modality mask must keep at least one modality")

    @property
    def count(self) -> int:
        return sum(self.present)

    @property
    def indices(self) -> list[int]:
        return [i for i, p in enumerate(self.present) if p]

    @property
    def tokens(self) -> str:
        return ",".join(MODALITY_TOKENS[i] for i in self.indices)

    @property
    def subset_id(self) -> int:
        return enumerate_modality_subsets().index(self) + 1

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls((True, True, True, True))

    @classmethod
    def parse(cls, text: str) -> "ModalityMask":
        """Parse ``"fl,t2"``-style token lists or a subset id ``1``..``15``."""
        text = str(text).strip().lower()
        if text.isdigit():
            idx = int(text)
            subsets = enumerate_modality_subsets()
            if not 1 <= idx <= len(subsets):
                raise DataError(f"subset id must be in 1..{len(subsets)}, got {idx}")
            return subsets[idx - 1]
        tokens = [t.strip() for t in text.replace("+", ",").split(",") if t.strip()]
        bad = [t for t in tokens if t not in MODALITY_TOKENS]
        if bad or not tokens:
            raise DataError(
                f"invalid modality token(s) {bad or [text]}; valid tokens are {{{','.join(MODALITY_TOKENS)}}}"
            )
        return cls(tuple(tok in tokens for tok in MODALITY_TOKENS))

    def __str__(self) -> str:
        return self.tokens


# Row order of the published comparison table: singles, pairs, triples, full.
_TABLE_ROWS = (
    (0, 0, 0, 1), (0, 0, 1, 0), (0, 1, 0, 0), (1, 0, 0, 0),
    (0, 0, 1, 1), (0, 1, 1, 0), (1, 1, 0, 0), (0, 1, 0, 1), (1, 0, 0, 1), (1, 0, 1, 0),
    (1, 1, 1, 0), (1, 1, 0, 1), (1, 0, 1, 1), (0, 1, 1, 1),
    (1, 1, 1, 1),
)


def enumerate_modality_subsets() -> list[ModalityMask]:
    """All 15 non-empty modality subsets in reporting order (ids are 1-based)."""
    return [ModalityMask(tuple(bool(v) for v in row)) for row in _TABLE_ROWS]


@dataclass
class MultimodalVolume:
    channels: np.ndarray  # (4, *spatial)
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim < 3 or self.channels.shape[0] != len(MODALITIES):
            raise DataError(
                f"expected {len(MODALITIES)} channels over a 2D/3D grid, got shape {self.channels.shape}"
            )
        spacing = tuple(float(s) for s in self.voxel_spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DataError(f"voxel spacing must be 3 positive values, got {self.voxel_spacing}")
        self.voxel_spacing = spacing

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return tuple(self.channels.shape[1:])

    @property
    def spacing(self) -> tuple[float, ...]:
        """Spacing for the spatial axes actually present."""
        return self.voxel_spacing[: len(self.spatial_shape)]


@dataclass
class SubregionMasks:
    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def items(self):
        return (("ET", self.et), ("TC", self.tc), ("WT", self.wt))


SUBREGIONS = ("ET", "TC", "WT")


def validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind == "f":
        if not np.all(labels == np.round(labels)):
            raise DataError("label map contains non-integer values")
        labels = labels.astype(np.int64)
    bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
    if bad.size:
        raise DataError(f"unexpected label value {int(bad[0])} (allowed {list(VALID_LABELS)})")
    return labels.astype(np.int64, copy=False)


def apply_modality_mask(vol: MultimodalVolume | np.ndarray, mask: ModalityMask) -> np.ndarray:
    """Stack only the present channels, keeping the fixed modality order."""
    channels = vol.channels if isinstance(vol, MultimodalVolume) else np.asarray(vol)
    if not isinstance(mask, ModalityMask):
        mask = ModalityMask(tuple(mask))
    return channels[mask.indices]


def map_nested_subregions(labels: np.ndarray) -> SubregionMasks:
    labels = validate_labels(labels)
    et = labels == ENHANCING
    tc = et | (labels == NCR_NET)
    wt = tc | (labels == EDEMA)
    return SubregionMasks(et=et, tc=tc, wt=wt)


def labels_to_classes(labels: np.ndarray) -> np.ndarray:
    labels = validate_labels(labels)
    out = np.zeros(labels.shape, dtype=np.int64)
    for cls, value in enumerate(CLASS_TO_LABEL):
        out[labels == value] = cls
    return out


def classes_to_labels(classes: np.ndarray) -> np.ndarray:
    return CLASS_TO_LABEL[np.asarray(classes, dtype=np.int64)]


def zscore_normalize(vol: MultimodalVolume, eps: float = 1e-8) -> MultimodalVolume:
    """Per-channel z-score; statistics over nonzero (brain) voxels when any exist."""
    out = np.empty(vol.channels.shape, dtype=np.float64)
    for i, ch in enumerate(vol.channels.astype(np.float64)):
        inside = ch != 0
        ref = ch[inside] if inside.any() else ch.ravel()
        mean, std = ref.mean(), ref.std()
        out[i] = (ch - mean) / max(std, eps)
    return MultimodalVolume(out, vol.voxel_spacing)


def extract_patch(
    vol: MultimodalVolume | np.ndarray,
    labels: np.ndarray | None,
    origin: Sequence[int],
    size: Sequence[int],
    levels: int | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Crop ``size`` voxels starting at ``origin`` from the volume and labels.

    With ``levels`` given, each size component must be divisible by
    ``2**(levels-1)`` so the crop fits the encoder's downsampling.
    """
    channels = vol.channels if isinstance(vol, MultimodalVolume) else np.asarray(vol)
    spatial = channels.shape[1:]
    origin, size = tuple(int(o) for o in origin), tuple(int(s) for s in size)
    if len(origin) != len(spatial) or len(size) != len(spatial):
        raise DataError(f"origin/size rank must match spatial rank {len(spatial)}")
    if levels is not None:
        factor = 2 ** (levels - 1)
        bad = [s for s in size if s % factor]
        if bad:
            raise DataError(f"patch size {size} not divisible by {factor} (required by a {levels}-level backbone)")
    for o, s, n in zip(origin, size, spatial):
        if s <= 0 or o < 0 or o + s > n:
            raise DataError(f"patch origin {origin} + size {size} out of bounds for shape {spatial}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    patch = channels[(slice(None),) + sl]
    label_patch = None if labels is None else np.asarray(labels)[sl]
    return patch, label_patch


def sliding_window_origins(shape: Sequence[int], size: Sequence[int], overlap: float = 0.5) -> list[tuple[int, ...]]:
    """Window origins covering ``shape`` with the given fractional overlap."""
    axes = []
    for n, s in zip(shape, size):
        if s > n:
            raise DataError(f"window {tuple(size)} larger than volume {tuple(shape)}")
        step = max(1, int(round(s * (1.0 - overlap))))
        starts = list(range(0, n - s + 1, step))
        if starts[-1] != n - s:
            starts.append(n - s)
        axes.append(starts)
    return [tuple(o) for o in np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))]


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

# tissue rows: outside-brain, brain, edema, necrosis/non-enhancing, enhancing
TISSUES = ("background", "brain", "edema", "ncr_net", "enhancing")


def _default_contrast() -> dict[str, tuple[float, ...]]:
    return {
        "flair": (0.0, 1.0, 2.0, 1.6, 1.8),
        "t1": (0.0, 1.0, 0.8, 0.6, 1.0),
        "t1ce": (0.0, 1.0, 0.9, 0.6, 2.2),
        "t2": (0.0, 1.0, 1.9, 2.1, 1.7),
    }


@dataclass
class SynthConfig:
    spatial_shape: tuple[int, ...] = (64, 64)
    tumor_count: tuple[int, int] = (1, 1)
    wt_radius: tuple[float, float] = (11.0, 16.0)
    tc_radius: tuple[float, float] = (7.0, 10.0)
    et_radius: tuple[float, float] = (4.0, 6.5)
    contrast: dict[str, tuple[float, ...]] = field(default_factory=_default_contrast)
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.spatial_shape = tuple(int(s) for s in self.spatial_shape)
        if len(self.spatial_shape) not in (2, 3) or min(self.spatial_shape) < 8:
            raise DataError(f"spatial_shape must be 2D/3D with sides >= 8, got {self.spatial_shape}")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        lo, hi = self.tumor_count
        if not 1 <= lo <= hi:
            raise DataError(f"invalid tumor_count range {self.tumor_count}")
        radii = (self.et_radius, self.tc_radius, self.wt_radius)
        for (a_lo, a_hi), (b_lo, b_hi) in zip(radii, radii[1:]):
            if not (0 < a_lo <= a_hi and a_hi <= b_lo <= b_hi):
                raise DataError("subregion radius ranges must be ordered et <= tc <= wt")
        missing = set(MODALITIES) - set(self.contrast)
        if missing:
            raise DataError(f"contrast table missing modalities {sorted(missing)}")
        for name, row in self.contrast.items():
            if len(row) != len(TISSUES):
                raise DataError(f"contrast row for {name} needs {len(TISSUES)} entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial_shape"] = list(self.spatial_shape)
        d["contrast"] = {k: list(map(float, v)) for k, v in self.contrast.items()}
        for key in ("tumor_count", "wt_radius", "tc_radius", "et_radius"):
            d[key] = list(d[key])
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _ellipsoid(grid: list[np.ndarray], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def synth_generate(cfg: SynthConfig) -> tuple[MultimodalVolume, np.ndarray]:
    """Render one phantom: nested ellipsoidal tumours inside an elliptic brain."""
    rng = np.random.default_rng(cfg.seed)
    shape = np.array(cfg.spatial_shape, dtype=float)
    grid = np.meshgrid(*[np.arange(n, dtype=float) for n in cfg.spatial_shape], indexing="ij")
    brain_center = (shape - 1) / 2
    brain = _ellipsoid(grid, brain_center, shape * 0.44)

    tissue = np.where(brain, 1, 0)
    labels = np.zeros(cfg.spatial_shape, dtype=np.int64)
    n_tumors = int(rng.integers(cfg.tumor_count[0], cfg.tumor_count[1] + 1))
    for _ in range(n_tumors):
        wt_r = rng.uniform(*cfg.wt_radius, size=shape.size)
        tc_r = rng.uniform(*cfg.tc_radius, size=shape.size)
        et_r = rng.uniform(*cfg.et_radius, size=shape.size)
        # keep the tumour centre well inside the brain ellipse
        span = np.maximum(shape * 0.44 - wt_r.max() - 2, 1.0)
        wt_c = brain_center + rng.uniform(-1, 1, size=shape.size) * span * 0.6
        tc_c = wt_c + rng.uniform(-1, 1, size=shape.size) * np.maximum(wt_r - tc_r, 0) * 0.4
        et_c = tc_c + rng.uniform(-1, 1, size=shape.size) * np.maximum(tc_r - et_r, 0) * 0.4
        # intersections guarantee et <= tc <= wt regardless of sampled geometry
        wt = _ellipsoid(grid, wt_c, wt_r) & brain
        tc = _ellipsoid(grid, tc_c, tc_r) & wt
        et = _ellipsoid(grid, et_c, et_r) & tc
        labels[wt & (labels == BACKGROUND)] = EDEMA
        labels[tc & (labels != ENHANCING)] = NCR_NET
        labels[et] = ENHANCING

    tissue = np.where(labels == EDEMA, 2, tissue)
    tissue = np.where(labels == NCR_NET, 3, tissue)
    tissue = np.where(labels == ENHANCING, 4, tissue)

    channels = np.empty((len(MODALITIES),) + cfg.spatial_shape, dtype=np.float64)
    for i, name in enumerate(MODALITIES):
        table = np.asarray(cfg.contrast[name], dtype=np.float64)
        img = table[tissue]
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape) * brain
        channels[i] = img
    return MultimodalVolume(channels), labels


# ---------------------------------------------------------------------------
# NIfTI case directories
# ---------------------------------------------------------------------------

def _find_volume(case_dir: Path, suffix: str) -> Path | None:
    for ext in NIFTI_SUFFIXES:
        hits = sorted(case_dir.glob(f"*_{suffix}{ext}"))
        if hits:
            return hits[0]
    return None


def load_brats_case(dir_path: str | Path) -> tuple[MultimodalVolume, np.ndarray]:
    """Read ``*_flair``, ``*_t1``, ``*_t1ce``, ``*_t2`` and ``*_seg`` NIfTI files."""
    import nibabel as nib

    case_dir = Path(dir_path)
    if not case_dir.is_dir():
        raise DataError(f"case directory not found: {case_dir}")
    arrays, spacing = [], None
    for name, display in zip(MODALITIES, DISPLAY_NAMES):
        path = _find_volume(case_dir, name)
        if path is None:
            raise DataError(f"missing {display} volume (*_{name}.nii[.gz]) in {case_dir}")
        img = nib.load(str(path))
        arrays.append(np.asarray(img.dataobj, dtype=np.float64))
        if spacing is None:
            zooms = tuple(float(z) for z in img.header.get_zooms())
            spacing = (zooms + (1.0, 1.0, 1.0))[:3]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"modality shape mismatch in {case_dir}: {sorted(shapes)}")
    seg_path = _find_volume(case_dir, "seg")
    if seg_path is None:
        raise DataError(f"missing label volume (*_seg.nii[.gz]) in {case_dir}")
    labels = np.asarray(nib.load(str(seg_path)).dataobj)
    if labels.shape != arrays[0].shape:
        raise DataError(f"label shape {labels.shape} does not match image shape {arrays[0].shape}")
    return MultimodalVolume(np.stack(arrays), spacing), validate_labels(labels)


def save_brats_case(dir_path: str | Path, case_id: str, vol: MultimodalVolume, labels: np.ndarray) -> Path:
    import nibabel as nib

    case_dir = Path(dir_path)
    case_dir.mkdir(parents=True, exist_ok=True)
    affine = np.diag(list(vol.voxel_spacing) + [1.0])
    for name, ch in zip(MODALITIES, vol.channels):
        nib.save(nib.Nifti1Image(ch.astype(np.float32), affine), str(case_dir / f"{case_id}_{name}.nii"))
    nib.save(nib.Nifti1Image(validate_labels(labels).astype(np.uint8), affine), str(case_dir / f"{case_id}_seg.nii"))
    return case_dir


@dataclass
class Case:
    case_id: str
    volume: MultimodalVolume
    labels: np.ndarray


def write_synthetic_dataset(out_dir: str | Path, cfg: SynthConfig, n_cases: int) -> list[dict]:
    """Write ``n_cases`` phantoms as BraTS-style case directories; returns manifest rows."""
    out_dir = Path(out_dir)
    rows = []
    seeds = np.random.SeedSequence(cfg.seed).generate_state(n_cases)
    for i, seed in enumerate(seeds):
        case_cfg = SynthConfig(**{**cfg.__dict__, "seed": int(seed)})
        vol, labels = synth_generate(case_cfg)
        case_id = f"case_{i:04d}"
        save_brats_case(out_dir / case_id, case_id, vol, labels)
        rows.append({"case_id": case_id, "seed": int(seed), "config_hash": case_cfg.config_hash()})
    return rows


def dataset_hash(root: str | Path) -> str:
    """Content hash over every case file (manifests excluded)."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in (".nii", ".gz")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def iter_case_dirs(root: str | Path) -> Iterator[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    for p in sorted(root.iterdir()):
        if p.is_dir() and _find_volume(p, "seg") is not None:
            yield p


def load_dataset(root: str | Path, normalize: bool = True) -> list[Case]:
    cases = []
    for case_dir in iter_case_dirs(root):
        vol, labels = load_brats_case(case_dir)
        cases.append(Case(case_dir.name, zscore_normalize(vol) if normalize else vol, labels))
    if not cases:
        raise DataError(f"no cases found under {root}")
    return cases


def split_cases(cases: Sequence[Case], val_fraction: float = 1 / 3, seed: int = 0) -> tuple[list[Case], list[Case]]:
    """Seeded random train/validation split (default 2:1)."""
    order = np.random.default_rng(seed).permutation(len(cases))
    n_val = int(round(len(cases) * val_fraction))
    if len(cases) > 1:
        n_val = min(max(n_val, 1), len(cases) - 1)
    else:
        n_val = 0
    val = [cases[i] for i in sorted(order[:n_val])]
    train = [cases[i] for i in sorted(order[n_val:])]
    return train, val
