"""Command line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 partial report (some subset checkpoints absent).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (
    DISPLAY_NAMES,
    MODALITY_TOKENS,
    SUBREGIONS,
    DataError,
    ModalityMask,
    SynthConfig,
    dataset_hash,
    enumerate_modality_subsets,
    load_brats_case,
    load_dataset,
    split_cases,
    write_synthetic_dataset,
    zscore_normalize,
    Case,
)
from .losses import NonFiniteLossError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "ACN_OUTPUT_ROOT"
MANIFEST = "manifest.yaml"

log = logging.getLogger("acn")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "acn_runs"))


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def artifact_hash(root: Path, exclude: tuple[str, ...] = (MANIFEST,)) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name not in exclude):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, started: str, outputs: list[str],
                   extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "host": platform.node(),
        "outputs": sorted(outputs),
        "artifact_hash": artifact_hash(out_dir),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST
    with path.open("w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False, allow_unicode=True)
    return path


def parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(s) for s in text.lower().replace("x", ",").split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"invalid shape '{text}'") from None
    if len(shape) not in (2, 3):
        raise ConfigError(f"shape must have 2 or 3 components, got '{text}'")
    return shape


def parse_mask(text: str) -> ModalityMask:
    try:
        return ModalityMask.parse(text)
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def parse_ablate(text: str | None) -> dict[str, bool]:
    flags = {"use_ena": True, "use_kna": True, "use_mmi": True}
    if not text:
        return flags
    for tok in (t.strip().lower() for t in text.split(",") if t.strip()):
        if f"use_{tok}" not in flags:
            raise ConfigError(f"invalid --ablate token '{tok}'; valid tokens are {{ena,kna,mmi}}")
        flags[f"use_{tok}"] = False
    return flags


CONFIG_SECTIONS = ("model", "loss", "optim", "schedule", "run", "ablation")


def load_config_file(path: str | Path | None) -> dict:
    """Flatten a sectioned YAML config into :class:`TrainConfig` keyword arguments.

    Sections (``model``, ``loss``, ``optim``, ``schedule``, ``run``,
    ``ablation``) only group keys; top-level keys are accepted as well.
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    flat: dict = {}
    for key, value in raw.items():
        if key in CONFIG_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be a mapping")
            flat.update(value)
        else:
            flat[key] = value
    return flat


def _resolve_out(arg: str | None, default_name: str) -> Path:
    return Path(arg) if arg else output_root() / default_name


def _load_cases(data_dir: str, split: str, split_seed: int) -> tuple[list[Case], list[Case]]:
    cases = load_dataset(data_dir)
    if split == "all":
        return cases, cases
    train, val = split_cases(cases, seed=split_seed)
    return train, val


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = _now()
    shape = parse_shape(args.shape)
    factor = 2 ** (args.levels - 1)
    if any(s % factor for s in shape):
        msg = (f"shape {shape} is not divisible by {factor} = 2^(levels-1) for a {args.levels}-level backbone; "
               "training will need patches smaller than the volume")
        warnings.warn(msg, stacklevel=1)
        print(f"warning: {msg}", file=sys.stderr)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    if args.cases < 1:
        raise ConfigError("--cases must be >= 1")
    cfg = SynthConfig(spatial_shape=shape, noise_std=args.noise, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    rows = write_synthetic_dataset(out, cfg, args.cases)
    digest = dataset_hash(out)
    write_manifest(out, "synth", cfg.to_dict(), args.seed, started, [r["case_id"] for r in rows],
                   {"cases": rows, "config_hash": cfg.config_hash(), "dataset_hash": digest})
    print(f"wrote {len(rows)} cases to {out} (dataset hash {digest[:16]})")
    return EXIT_OK


def build_train_config(args):
    from .trainer import TrainConfig

    values = load_config_file(args.config)
    mask = parse_mask(args.mask)
    values["mask"] = mask.tokens
    values.update(parse_ablate(args.ablate) if args.ablate is not None else {})
    overrides = {
        "epoch_max": args.epochs, "steps_per_epoch": args.steps_per_epoch, "base_lr": args.lr,
        "batch_size": args.batch_size, "seed": args.seed, "eval_interval": args.eval_interval,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.patch:
        values["patch_size"] = parse_shape(args.patch)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from None


def cmd_train(args) -> int:
    from .plotting import plot_metric_history
    from .trainer import fit, write_history_csv

    started = _now()
    cfg = build_train_config(args)
    train, val = _load_cases(args.data, args.split, args.split_seed)
    spatial = train[0].volume.spatial_shape
    if len(spatial) != len(cfg.patch_size) or any(p > s for p, s in zip(cfg.patch_size, spatial)):
        if len(spatial) == len(cfg.patch_size):
            raise ConfigError(f"patch size {cfg.patch_size} exceeds volume shape {spatial}")
        raise ConfigError(f"patch size {cfg.patch_size} does not match the {len(spatial)}D volumes")
    out = _resolve_out(args.out, f"train_{cfg.modality_mask.tokens.replace(',', '-')}")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    result = fit(cfg, train, val if args.split != "all" else train, out_dir=out)
    write_history_csv(result.history, out / "metrics.csv")
    outputs = ["best", "last", "metrics.csv"]
    if result.history:
        plot_metric_history(result.history, out / "metrics.png")
        outputs.append("metrics.png")
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, started, outputs,
                   {"data": str(args.data), "config_hash": cfg.config_hash(), "steps": result.trainer.step})
    best = result.history and max(e["mean_dsc"] for e in result.history)
    print(f"trained mask '{cfg.modality_mask}' for {result.trainer.step} steps; best mean DSC {best:.4f}; "
          f"checkpoint at {out}")
    return EXIT_OK


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint directory or a training output holding ``best``/``last``."""
    path = Path(path)
    if (path / "manifest.yaml").is_file() and (path / "unimodal.pt").exists():
        return path
    for sub in ("best", "last"):
        if (path / sub / "manifest.yaml").is_file():
            return path / sub
    raise DataError(f"no checkpoint found at {path}")


def checkpoint_mask(ckpt: Path) -> ModalityMask:
    manifest = yaml.safe_load((ckpt / "manifest.yaml").read_text())
    return ModalityMask.parse(manifest["config"]["mask"])


def discover_subset_checkpoints(root: Path) -> dict[ModalityMask, Path]:
    found: dict[ModalityMask, Path] = {}
    candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    for cand in candidates:
        try:
            ckpt = resolve_checkpoint(cand)
            mask = checkpoint_mask(ckpt)
        except (DataError, OSError, KeyError, TypeError, yaml.YAMLError):
            continue
        found.setdefault(mask, ckpt)
    return found


def _fmt(v: float, status: str) -> str:
    return f"{v:7.2f}" if status == "ok" else "     --"


def format_report_table(rows: list[dict]) -> str:
    head = " ".join(f"{n:>5}" for n in DISPLAY_NAMES)
    cols = " ".join(f"{r + ' DSC':>7} {r + ' HD95':>8}" for r in SUBREGIONS)
    lines = [f"{'id':>3} {head} | {cols} | status", "-" * (len(head) + len(cols) + 16)]
    for row in rows:
        marks = " ".join(f"{('●' if p else '○'):>5}" for p in row["present"])
        vals = " ".join(
            f"{_fmt(100 * row.get(f'{r}_dsc', 0.0), row['status'])} {_fmt(row.get(f'{r}_hd95', 0.0), row['status']):>8}"
            for r in SUBREGIONS
        )
        lines.append(f"{row['id']:>3} {marks} | {vals} | {row['status']}")
    ok = [r for r in rows if r["status"] == "ok"]
    if len(ok) > 1:
        avg = " ".join(
            f"{100 * np.mean([r[f'{s}_dsc'] for r in ok]):7.2f} {np.mean([r[f'{s}_hd95'] for r in ok]):8.2f}"
            for s in SUBREGIONS
        )
        lines.append(f"{'avg':>3} {' ' * len(head)} | {avg} |")
    return "\n".join(lines)


REPORT_FIELDS = ["id", "modalities", "status", "cases"] + [f"{r}_{m}" for r in SUBREGIONS for m in ("dsc", "hd95")]


def cmd_eval(args) -> int:
    from .plotting import plot_subset_report
    from .trainer import checkpoint_load, evaluate

    started = _now()
    _, cases = _load_cases(args.data, args.split, args.split_seed)
    ckpt_root = Path(args.ckpt)
    if args.all_subsets:
        found = discover_subset_checkpoints(ckpt_root)
        targets = [(m, found.get(m)) for m in enumerate_modality_subsets()]
    else:
        ckpt = resolve_checkpoint(ckpt_root)
        targets = [(checkpoint_mask(ckpt), ckpt)]
    if args.mask:
        requested = parse_mask(args.mask)
        if not args.all_subsets and requested != targets[0][0]:
            raise ConfigError(
                f"checkpoint was trained for '{targets[0][0]}' ({targets[0][0].count} channels), "
                f"not '{requested}' ({requested.count})")

    rows = []
    for mask, ckpt in targets:
        row = {"id": mask.subset_id, "modalities": mask.tokens, "present": mask.present, "status": "absent", "cases": 0}
        if ckpt is not None:
            report = evaluate(checkpoint_load(ckpt), cases, mask)
            row.update(report.means, status="ok", cases=len(report.per_case))
        rows.append(row)

    out = _resolve_out(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    table = format_report_table(rows)
    (out / "report.txt").write_text(table + "\n")
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    plot_subset_report(rows, out / "report_dsc.png")
    absent = [r for r in rows if r["status"] != "ok"]
    write_manifest(out, "eval", {"ckpt": str(ckpt_root), "data": str(args.data), "all_subsets": args.all_subsets,
                                 "split": args.split, "split_seed": args.split_seed},
                   None, started, ["report.txt", "report.csv", "report_dsc.png"],
                   {"rows": len(rows), "absent": [r["modalities"] for r in absent]})
    print(table)
    if absent:
        print(f"{len(absent)} of {len(rows)} subsets have no checkpoint", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_entropy_export(args) -> int:
    import torch

    from .data import classes_to_labels
    from .losses import self_information
    from .trainer import checkpoint_load

    started = _now()
    trainer = checkpoint_load(resolve_checkpoint(args.ckpt))
    vol, labels = load_brats_case(args.case)
    case = Case(Path(args.case).name, zscore_normalize(vol), labels)
    out = _resolve_out(args.out, "entropy")
    out.mkdir(parents=True, exist_ok=True)
    ln_c = float(np.log(trainer.cfg.num_classes))
    outputs = []
    for path_name in ("multimodal", "unimodal"):
        probs = trainer.predict_case(case, path_name)
        entropy = self_information(torch.from_numpy(probs)[None]).scalar_map[0].numpy()
        seg = classes_to_labels(probs.argmax(0))
        outputs += write_entropy_images(out, path_name, entropy, seg, ln_c, vol.voxel_spacing)
    write_manifest(out, "entropy-export", {"ckpt": str(args.ckpt), "case": str(args.case),
                                           "mask": trainer.cfg.mask}, trainer.cfg.seed, started, outputs,
                   {"entropy_scale": f"uint16 value / 65535 * ln({trainer.cfg.num_classes})",
                    "segmentation_scale": "uint8 value / 63 = BraTS label"})
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


def write_entropy_images(out: Path, name: str, entropy: np.ndarray, seg: np.ndarray, ln_c: float,
                         spacing=(1.0, 1.0, 1.0)) -> list[str]:
    """2D: 16-bit entropy PNG scaled by ln C and 8-bit label PNG (label * 63); 3D: NIfTI."""
    if entropy.ndim == 2:
        from PIL import Image

        ent16 = np.round(np.clip(entropy / ln_c, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(ent16).save(out / f"entropy_{name}.png")
        Image.fromarray((seg * 63).astype(np.uint8)).save(out / f"seg_{name}.png")
        return [f"entropy_{name}.png", f"seg_{name}.png"]
    import nibabel as nib

    affine = np.diag(list(spacing) + [1.0])
    nib.save(nib.Nifti1Image(entropy.astype(np.float32), affine), str(out / f"entropy_{name}.nii"))
    nib.save(nib.Nifti1Image(seg.astype(np.uint8), affine), str(out / f"seg_{name}.nii"))
    return [f"entropy_{name}.nii", f"seg_{name}.nii"]


def cmd_list_subsets(args) -> int:
    started = _now()
    rows = []
    print(f"{'id':>3}  {'tokens':<14} " + " ".join(f"{n:>5}" for n in DISPLAY_NAMES))
    for mask in enumerate_modality_subsets():
        marks = " ".join(f"{('●' if p else '○'):>5}" for p in mask.present)
        print(f"{mask.subset_id:>3}  {mask.tokens:<14} {marks}")
        rows.append({"id": mask.subset_id, "tokens": mask.tokens, "present": list(mask.present)})
    out = _resolve_out(args.out, "list-subsets")
    write_manifest(out, "list-subsets", {}, None, started, [], {"subsets": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acn", description="Adversarial co-training for missing-modality segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic BraTS-style dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=10)
    s.add_argument("--shape", default="64,64")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--levels", type=int, default=4, help="backbone levels used for the divisibility check")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one dedicated model for a modality subset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--mask", required=True, help=f"subset id 1-15 or tokens from {{{','.join(MODALITY_TOKENS)}}}")
    t.add_argument("--ablate", help="comma list of modules to switch off: ena,kna,mmi")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--patch")
    t.add_argument("--seed", type=int)
    t.add_argument("--split", choices=("val", "all"), default="val")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="DSC/HD95 report for one or all subset checkpoints")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--all-subsets", action="store_true")
    e.add_argument("--mask")
    e.add_argument("--out")
    e.add_argument("--split", choices=("val", "all"), default="val")
    e.add_argument("--split-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("entropy-export", help="write entropy maps and segmentations of both paths")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--case", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_entropy_export)

    ls = sub.add_parser("list-subsets", help="print the 15 modality subsets with their ids")
    ls.add_argument("--out")
    ls.set_defaults(func=cmd_list_subsets)
    return p


def main(argv: list[str] | None = None) -> int:
    from .trainer import CheckpointError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
