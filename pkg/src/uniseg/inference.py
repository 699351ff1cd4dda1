"""Full-volume prediction: sliding-window evaluation with Gaussian-weighted
blending, post-processing (laterality remap, largest-component suppression,
region restriction) and confidence-ordered merging into one label map."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch, WindowTooLarge
from .taxonomy import SagittalPlane, Taxonomy, apply_inclusion, split_laterality
from .volume import Volume, save_volume


@dataclass(frozen=True)
class WindowSpec:
    window: tuple[int, int, int] = (96, 96, 96)
    overlap: float = 0.5
    sigma_frac: float = 0.125

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0,1), got {self.overlap}")

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(max(1, int(w * (1.0 - self.overlap))) for w in self.window)


def gaussian_weights(window, sigma_frac: float) -> np.ndarray:
    """Separable Gaussian centered in the window, sigma = sigma_frac * edge."""
    axes = []
    for n in window:
        i = np.arange(n, dtype=np.float64)
        axes.append(np.exp(-0.5 * ((i - (n - 1) / 2.0) / (sigma_frac * n)) ** 2))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def _window_starts(dim: int, win: int, stride: int) -> list[int]:
    starts = list(range(0, dim - win + 1, stride))
    if starts[-1] != dim - win:
        starts.append(dim - win)
    return starts


def sliding_window(x: Volume, predict, spec: WindowSpec,
                   threads: int = 1) -> dict[int, Volume]:
    """Aggregate per-class probabilities over overlapping windows.

    ``predict`` maps a patch array (D,H,W) to {class: prob array}. The
    volume is reflect-padded at the high end when smaller than the window;
    per voxel the output is sum_w G_w p_w / sum_w G_w. Window outputs are
    accumulated in a fixed lexicographic order, so results are identical
    for any thread count.
    """
    win = spec.window
    pad = [max(0, w - n) for w, n in zip(win, x.dims)]
    for p, n in zip(pad, x.dims):
        if p > n - 1:
            raise WindowTooLarge(
                f"window {win} too large to reflect-pad volume {x.dims}")
    data = np.pad(x.data.astype(np.float64), [(0, p) for p in pad], mode="reflect") \
        if any(pad) else x.data.astype(np.float64)
    dims = data.shape

    starts = [_window_starts(n, w, s) for n, w, s in zip(dims, win, spec.stride)]
    positions = [(z, y, xs) for z in starts[0] for y in starts[1] for xs in starts[2]]

    def run(pos):
        z, y, xs = pos
        patch = data[z:z + win[0], y:y + win[1], xs:xs + win[2]]
        return predict(np.ascontiguousarray(patch))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run, positions))
    else:
        outputs = [run(pos) for pos in positions]

    crop = tuple(slice(0, n) for n in x.dims)
    if len(positions) == 1:
        # exactly one window: blending is the identity, skip the weight
        # round trip so the output matches the direct model output bit-wise
        return {cls: Volume(p[crop].copy(), x.spacing, kind="image")
                for cls, p in outputs[0].items()}

    weights = gaussian_weights(win, spec.sigma_frac)
    classes = sorted(outputs[0])
    num = {cls: np.zeros(dims) for cls in classes}
    den = np.zeros(dims)
    for pos, out in zip(positions, outputs):
        z, y, xs = pos
        sl = (slice(z, z + win[0]), slice(y, y + win[1]), slice(xs, xs + win[2]))
        den[sl] += weights
        for cls in classes:
            if out[cls].shape != win:
                raise ShapeMismatch(f"model emitted {out[cls].shape}, window is {win}")
            num[cls][sl] += weights * out[cls]
    return {cls: Volume((num[cls] / den)[crop], x.spacing, kind="image")
            for cls in classes}


# ---------------------------------------------------------------------------
# post-processing

_CONN26 = np.ones((3, 3, 3), dtype=np.uint8)


def largest_component(mask: Volume) -> Volume:
    """Keep only the largest 26-connected component; ties go to the
    component containing the lexicographically smallest voxel."""
    m = mask.data > 0
    if not m.any():
        return Volume(np.zeros(mask.dims, dtype=np.uint8), mask.spacing, kind="mask")
    labeled, n = ndimage.label(m, structure=_CONN26)
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best)
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        flat = labeled.ravel()
        keep = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    return Volume((labeled == keep).astype(np.uint8), mask.spacing, kind="mask")


def restrict_region(mask: Volume, region: Volume) -> Volume:
    """Voxel-wise AND with an allowed-region mask."""
    if mask.dims != region.dims:
        raise ShapeMismatch(f"mask {mask.dims} vs region {region.dims}")
    return Volume(((mask.data > 0) & (region.data > 0)).astype(np.uint8),
                  mask.spacing, kind="mask")


def box_region(dims, box) -> Volume:
    """Region mask from a half-open bounding box (z0,z1,y0,y1,x0,x1)."""
    r = np.zeros(dims, dtype=np.uint8)
    z0, z1, y0, y1, x0, x1 = box
    r[z0:z1, y0:y1, x0:x1] = 1
    return Volume(r, kind="mask")


def merge(masks: dict[int, Volume], probs: dict[int, Volume] | None,
          taxonomy: Taxonomy) -> Volume:
    """Flatten per-class binary masks into one integer map.

    Classes are written in ascending merge tier (organ, vessel, tumor), so
    later tiers overwrite earlier ones; inside a tier a voxel claimed by
    several classes goes to the highest probability, ties to the lower
    index. The input masks are never modified.
    """
    if not masks:
        raise ValueError("merge needs at least one mask")
    dims = next(iter(masks.values())).dims
    spacing = next(iter(masks.values())).spacing
    out = np.zeros(dims, dtype=np.int64)
    tiers = sorted({taxonomy[cls].merge_tier for cls in masks})
    for tier in tiers:
        members = sorted(cls for cls in masks if taxonomy[cls].merge_tier == tier)
        best_p = np.full(dims, -np.inf)
        best_c = np.zeros(dims, dtype=np.int64)
        for cls in members:
            if masks[cls].dims != dims:
                raise ShapeMismatch(f"class {cls}: mask dims {masks[cls].dims} != {dims}")
            claimed = masks[cls].data > 0
            p = probs[cls].data if probs is not None and cls in probs \
                else claimed.astype(np.float64)
            take = claimed & (p > best_p)
            best_p = np.where(take, p, best_p)
            best_c = np.where(take, cls, best_c)
        out = np.where(best_c > 0, best_c, out)
    return Volume(out, spacing, kind="mask")


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class PostprocConfig:
    threshold: float = 0.5
    split_lateral: bool = False
    plane: SagittalPlane | None = None            # default: mid-sagittal
    keep_largest: frozenset[int] = frozenset()    # classes to suppress
    regions: dict[int, tuple[int, ...]] = field(default_factory=dict)
    apply_inclusion: bool = True


@dataclass
class PredictionSet:
    probabilities: dict[int, Volume]
    masks: dict[int, Volume]
    merged: Volume


def predict_volume(x: Volume, predict, spec: WindowSpec, taxonomy: Taxonomy,
                   post: PostprocConfig | None = None,
                   threads: int = 1) -> PredictionSet:
    """sliding window -> threshold -> inclusion -> laterality remap ->
    largest-component -> region restriction -> merge."""
    post = post or PostprocConfig()
    probs = sliding_window(x, predict, spec, threads=threads)
    masks = {cls: Volume((p.data >= post.threshold).astype(np.uint8),
                         p.spacing, kind="mask")
             for cls, p in probs.items()}
    if post.apply_inclusion:
        masks = {cls: m for cls, m in
                 apply_inclusion(masks, taxonomy).items() if cls in masks}
    if post.split_lateral:
        plane = post.plane or SagittalPlane.mid_sagittal(x.dims)
        for left_cls, right_cls in taxonomy.lateral_pairs():
            if left_cls in masks and right_cls in masks:
                union = Volume(((masks[left_cls].data > 0)
                                | (masks[right_cls].data > 0)).astype(np.uint8),
                               x.spacing, kind="mask")
                masks[left_cls], masks[right_cls] = split_laterality(union, plane)
    for cls in sorted(post.keep_largest):
        if cls in masks:
            masks[cls] = largest_component(masks[cls])
    for cls, box in sorted(post.regions.items()):
        if cls in masks:
            masks[cls] = restrict_region(masks[cls], box_region(x.dims, box))
    merged = merge(masks, probs, taxonomy)
    return PredictionSet(probs, masks, merged)


def write_prediction_set(outdir, ps: PredictionSet, spec: WindowSpec,
                         post: PostprocConfig, checkpoint_path=None,
                         save_probabilities: bool = False) -> None:
    """One mask volume per class plus merged.uvol and a JSON sidecar with
    the run parameters and the checkpoint hash."""
    os.makedirs(outdir, exist_ok=True)
    for cls, m in sorted(ps.masks.items()):
        save_volume(os.path.join(outdir, f"class{cls:03d}_mask.uvol"), m)
        if save_probabilities:
            save_volume(os.path.join(outdir, f"class{cls:03d}_prob.uvol"),
                        ps.probabilities[cls])
    save_volume(os.path.join(outdir, "merged.uvol"), ps.merged)
    ckpt_hash = None
    if checkpoint_path is not None:
        with open(checkpoint_path, "rb") as fh:
            ckpt_hash = hashlib.sha256(fh.read()).hexdigest()
    sidecar = {
        "window": list(spec.window),
        "overlap": spec.overlap,
        "sigma_frac": spec.sigma_frac,
        "threshold": post.threshold,
        "split_lateral": post.split_lateral,
        "keep_largest": sorted(post.keep_largest),
        "regions": {str(k): list(v) for k, v in sorted(post.regions.items())},
        "apply_inclusion": post.apply_inclusion,
        "checkpoint_sha256": ckpt_hash,
        "classes": sorted(ps.masks),
    }
    with open(os.path.join(outdir, "prediction.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
