"""Dice similarity and 95th-percentile Hausdorff distance on binary masks."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _spacing(spacing, ndim: int) -> np.ndarray:
    if spacing is None:
        return np.ones(ndim)
    sp = np.asarray(spacing, dtype=float)
    if sp.shape == ():
        sp = np.full(ndim, float(sp))
    if sp.size < ndim:
        raise ValueError(f"spacing {tuple(sp)} has fewer entries than mask rank {ndim}")
    sp = sp[:ndim]
    if np.any(sp <= 0):
        raise ValueError(f"spacing must be positive, got {tuple(sp)}")
    return sp


def dsc(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks score 1."""
    a, b = _pair(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels with at least one face-adjacent background neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def directed_surface_distances(a, b, spacing=None) -> np.ndarray:
    """Distance from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    a, b = _pair(a, b)
    sp = _spacing(spacing, a.ndim)
    sa, sb = surface(a), surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=sp)
    return dist_to_b[sa]


def sentinel_distance(shape: Sequence[int], spacing=None) -> float:
    """Grid diagonal length in physical units."""
    sp = _spacing(spacing, len(shape))
    return float(np.sqrt(np.sum((np.asarray(shape) * sp) ** 2)))


def hd95_flagged(a, b, spacing=None) -> tuple[float, bool]:
    """HD95 plus a flag telling whether the empty-mask sentinel was used."""
    a, b = _pair(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0, False
    if ea or eb:
        return sentinel_distance(a.shape, spacing), True
    d_ab = directed_surface_distances(a, b, spacing)
    d_ba = directed_surface_distances(b, a, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))), False


def hd95(a, b, spacing=None) -> float:
    return hd95_flagged(a, b, spacing)[0]
