"""Evaluation: Dice coefficient, normalized surface distance, and
patient-level tumor-detection sensitivity/specificity with their harmonic
mean."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InsufficientCases, ShapeMismatch
from .volume import Volume


def _as_bool(v) -> np.ndarray:
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    return data > 0


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks count as a perfect 1.0."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one of their six face neighbors outside
    the mask; the volume border counts as outside."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask, dtype=bool)
    for axis in range(3):
        lo = tuple(slice(1, -1) if a != axis else slice(0, -2) for a in range(3))
        hi = tuple(slice(1, -1) if a != axis else slice(2, None) for a in range(3))
        interior &= padded[lo] & padded[hi]
    return mask & ~interior


def nsd(pred, gt, tolerance: float = 1.0,
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric fraction of boundary voxels lying within ``tolerance``
    millimetres (spacing-aware Euclidean) of the other mask's boundary.
    Both masks empty -> 1.0; exactly one empty -> 0.0."""
    if tolerance <= 0:
        raise ValueError(f"tolerance must be > 0, got {tolerance}")
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    bp, bg = boundary_voxels(p), boundary_voxels(g)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    dist_to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
    close_p = int((dist_to_g[bp] <= tolerance).sum())
    close_g = int((dist_to_p[bg] <= tolerance).sum())
    return (close_p + close_g) / (int(bp.sum()) + int(bg.sum()))


@dataclass(frozen=True)
class DetectionRule:
    """A case is called tumor-positive when the predicted tumor mask has at
    least ``min_voxels`` voxels."""

    min_voxels: int = 10

    def __post_init__(self):
        if self.min_voxels < 1:
            raise ValueError(f"min_voxels must be >= 1, got {self.min_voxels}")

    def positive(self, pred_mask) -> bool:
        return int(_as_bool(pred_mask).sum()) >= self.min_voxels


def harmonic_mean(sensitivity: float, specificity: float) -> float:
    """2ss'/(s+s'), 0 when either rate is 0 (the balanced detection score)."""
    if sensitivity == 0.0 or specificity == 0.0:
        return 0.0
    return 2.0 * sensitivity * specificity / (sensitivity + specificity)


def detection_stats(cases, rule: DetectionRule = DetectionRule()):
    """Patient-level rates over (predicted tumor mask, has_tumor) cases.

    Returns (sensitivity, specificity, harmonic mean). Needs at least one
    positive and one negative case, otherwise a rate is undefined.
    """
    tp = fn = tn = fp = 0
    for pred_mask, has_tumor in cases:
        called = rule.positive(pred_mask)
        if has_tumor:
            tp += called
            fn += not called
        else:
            tn += not called
            fp += called
    if tp + fn == 0 or tn + fp == 0:
        raise InsufficientCases(
            f"need >=1 positive and >=1 negative case, got {tp + fn} / {tn + fp}")
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    return sens, spec, harmonic_mean(sens, spec)
