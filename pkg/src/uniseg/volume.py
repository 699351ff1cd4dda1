"""Volume container, native file format, resampling, normalization,
patch sampling and augmentation.

Axis convention used everywhere in this package: arrays are indexed
(z, y, x) = (D, H, W), row-major, with W the sagittal (left-right) axis.
Spacing is given in millimetres as (sz, sy, sx).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonCubicPatch, ShapeMismatch

# Intensity window applied before linear normalization (Hounsfield units).
CLIP_LO = -175.0
CLIP_HI = 250.0

_UVOL_MAGIC = b"UVOL1"
_DTYPE_IMAGE = 0  # f32 voxels
_DTYPE_LABEL = 1  # u16 voxels

# The three unordered axis pairs of a 3D array, used for 90-degree rotations.
ROT_AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass
class Volume:
    """Dense 3D scalar grid with voxel spacing metadata.

    ``data`` has dims (D, H, W). ``kind`` is "image" for real-valued
    intensities or "mask" for binary/integer grids. ``normalized`` records
    that :func:`normalize_intensity` has already been applied.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"volume must be 3D, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ShapeMismatch(f"degenerate dims {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume":
        return replace(self, data=self.data.copy())

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0, 1)).all())


@dataclass
class Patch:
    """Fixed-size crop of a source volume; ``origin`` is the voxel offset
    of the patch's (0,0,0) corner in the source grid (may be negative when
    the patch was padded)."""

    data: Volume
    origin: tuple[int, int, int]


@dataclass
class AugmentConfig:
    rot_prob: float = 0.1
    shift_prob: float = 0.2
    shift: float = 0.1


# ---------------------------------------------------------------------------
# file I/O


def save_volume(path, v: Volume) -> None:
    """Write the native UVOL1 container (little-endian)."""
    if v.kind == "image":
        tag, voxels = _DTYPE_IMAGE, np.ascontiguousarray(v.data, dtype="<f4")
    else:
        tag, voxels = _DTYPE_LABEL, np.ascontiguousarray(v.data, dtype="<u2")
    with open(path, "wb") as fh:
        fh.write(_UVOL_MAGIC)
        fh.write(struct.pack("<3I", *v.dims))
        fh.write(struct.pack("<3f", *v.spacing))
        fh.write(struct.pack("<B", tag))
        fh.write(voxels.tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _UVOL_MAGIC:
            raise ValueError(f"{path}: not a UVOL1 file (magic {magic!r})")
        dims = struct.unpack("<3I", fh.read(12))
        spacing = struct.unpack("<3f", fh.read(12))
        (tag,) = struct.unpack("<B", fh.read(1))
        n = dims[0] * dims[1] * dims[2]
        if tag == _DTYPE_IMAGE:
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            kind = "image"
        elif tag == _DTYPE_LABEL:
            data = np.frombuffer(fh.read(2 * n), dtype="<u2").astype(np.int64)
            kind = "mask"
        else:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
    return Volume(data.reshape(dims), tuple(float(s) for s in spacing), kind=kind)


def load_volume_text(path, kind: str = "image",
                     spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Volume:
    """Read the tiny-fixture text format: one ``z y x value`` line per voxel.

    Grid dims are inferred from the largest coordinates; unlisted voxels
    are zero.
    """
    coords, values = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'z y x value'")
            coords.append(tuple(int(p) for p in parts[:3]))
            values.append(float(parts[3]))
    if not coords:
        raise ValueError(f"{path}: empty volume fixture")
    dims = tuple(max(c[i] for c in coords) + 1 for i in range(3))
    dtype = np.float64 if kind == "image" else np.int64
    data = np.zeros(dims, dtype=dtype)
    for (z, y, x), val in zip(coords, values):
        data[z, y, x] = dtype(val) if kind == "image" else int(val)
    return Volume(data, spacing, kind=kind)


# ---------------------------------------------------------------------------
# resampling and normalization


def _trilinear_gather(data: np.ndarray, zc, yc, xc) -> np.ndarray:
    """Sample ``data`` at fractional coordinates with edge clamping.

    Uses the incremental lerp form a + t*(b-a), which is exact for
    constant inputs.
    """
    nz, ny, nx = data.shape
    z0 = np.clip(np.floor(zc).astype(np.int64), 0, nz - 1)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, ny - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, nx - 1)
    z1, y1, x1 = (np.minimum(z0 + 1, nz - 1), np.minimum(y0 + 1, ny - 1),
                  np.minimum(x0 + 1, nx - 1))
    fz = np.clip(zc, 0, nz - 1) - z0
    fy = np.clip(yc, 0, ny - 1) - y0
    fx = np.clip(xc, 0, nx - 1) - x0

    def lerp(a, b, t):
        return a + t * (b - a)

    c00 = lerp(data[z0, y0, x0], data[z0, y0, x1], fx)
    c01 = lerp(data[z0, y1, x0], data[z0, y1, x1], fx)
    c10 = lerp(data[z1, y0, x0], data[z1, y0, x1], fx)
    c11 = lerp(data[z1, y1, x0], data[z1, y1, x1], fx)
    c0 = lerp(c00, c01, fy)
    c1 = lerp(c10, c11, fy)
    return lerp(c0, c1, fz)


def resample(v: Volume, target_spacing: tuple[float, float, float],
             mode: str | None = None) -> Volume:
    """Reslice to ``target_spacing``. Images interpolate trilinearly,
    masks take the nearest voxel; output dims are
    round(dims * spacing / target), at least 1 per axis.

    Voxel centers sit at (i + 0.5) * spacing, so output center i maps to
    input coordinate (i + 0.5) * target / spacing - 0.5.
    """
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if mode is None:
        mode = "trilinear" if v.kind == "image" else "nearest"
    out_dims = tuple(
        max(1, int(round(n * s / t)))
        for n, s, t in zip(v.dims, v.spacing, target_spacing))
    if out_dims == v.dims and tuple(target_spacing) == tuple(v.spacing):
        return replace(v, data=v.data.copy(), spacing=tuple(target_spacing))
    scale = [t / s for s, t in zip(v.spacing, target_spacing)]
    axes = [
        (np.arange(n, dtype=np.float64) + 0.5) * sc - 0.5
        for n, sc in zip(out_dims, scale)
    ]
    zc, yc, xc = np.meshgrid(*axes, indexing="ij")
    if mode == "trilinear":
        out = _trilinear_gather(v.data.astype(np.float64), zc, yc, xc)
    elif mode == "nearest":
        idx = [
            np.clip(np.round(c).astype(np.int64), 0, n - 1)
            for c, n in zip((zc, yc, xc), v.dims)
        ]
        out = v.data[tuple(idx)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Volume(out, tuple(float(t) for t in target_spacing), kind=v.kind,
                  normalized=v.normalized)


def reorient(v: Volume, flip: tuple[bool, bool, bool] = (False, False, False),
             permute: tuple[int, int, int] = (0, 1, 2)) -> Volume:
    """Axis fixer for inputs that are not yet in canonical (D, H, W) order:
    permute axes, then flip. Spacing follows the permutation."""
    if sorted(permute) != [0, 1, 2]:
        raise ValueError(f"permute must be a permutation of (0,1,2), got {permute}")
    data = np.transpose(v.data, permute)
    spacing = tuple(v.spacing[p] for p in permute)
    for axis, do_flip in enumerate(flip):
        if do_flip:
            data = np.flip(data, axis=axis)
    return Volume(np.ascontiguousarray(data), spacing, kind=v.kind,
                  normalized=v.normalized)


def normalize_intensity(v: Volume) -> Volume:
    """Clamp to [-175, 250] HU and map linearly onto [0, 1].

    A volume that is already marked normalized is returned unchanged
    (the affine map itself is not idempotent, so the flag carries that
    guarantee).
    """
    if v.kind != "image":
        raise ValueError("normalize_intensity expects an image volume")
    if v.normalized:
        return v
    out = np.clip(v.data.astype(np.float64), CLIP_LO, CLIP_HI)
    out = (out - CLIP_LO) / (CLIP_HI - CLIP_LO)
    return Volume(out, v.spacing, kind="image", normalized=True)


# ---------------------------------------------------------------------------
# patch sampling


def _extract_centered(data: np.ndarray, center, size, pad_value) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Crop a size^3 block centered at ``center``; out-of-bounds regions
    are filled with ``pad_value``."""
    size = tuple(size)
    origin = tuple(int(c) - s // 2 for c, s in zip(center, size))
    out = np.full(size, pad_value, dtype=data.dtype)
    src = []
    dst = []
    for o, s, n in zip(origin, size, data.shape):
        lo, hi = max(o, 0), min(o + s, n)
        if lo >= hi:
            return out, origin
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = data[tuple(src)]
    return out, origin


def sample_patch(image: Volume, label, size, fg_ratio: float,
                 rng: np.random.Generator,
                 class_balanced: bool = False) -> tuple[Patch, Patch]:
    """Draw one training patch pair.

    With probability ``fg_ratio`` the patch center is a uniformly drawn
    foreground voxel of ``label`` (falling back to a uniform grid draw if
    the label is empty); otherwise the center is uniform over the grid.
    ``class_balanced`` changes the foreground draw to pick a present class
    uniformly first, then one of its voxels, so small structures get
    centered as often as large ones. Out-of-bounds image voxels pad with 0,
    labels with background.
    """
    if not 0.0 <= fg_ratio <= 1.0:
        raise ValueError(f"fg_ratio must be in [0,1], got {fg_ratio}")
    label_vol = label.grid if hasattr(label, "grid") else label
    if image.dims != label_vol.dims:
        raise ShapeMismatch(f"image {image.dims} vs label {label_vol.dims}")
    size = tuple(int(s) for s in (size if np.iterable(size) else (size,) * 3))

    take_fg = rng.random() < fg_ratio
    center = None
    if take_fg:
        if class_balanced:
            present = np.unique(label_vol.data)
            present = present[present > 0]
            if len(present):
                cls = present[rng.integers(len(present))]
                fg = np.argwhere(label_vol.data == cls)
                center = tuple(int(c) for c in fg[rng.integers(len(fg))])
        else:
            fg = np.argwhere(label_vol.data > 0)
            if len(fg):
                center = tuple(int(c) for c in fg[rng.integers(len(fg))])
    if center is None:
        center = tuple(int(rng.integers(n)) for n in image.dims)

    img_block, origin = _extract_centered(image.data, center, size, 0)
    lab_block, _ = _extract_centered(label_vol.data, center, size, 0)
    img = Volume(img_block, image.spacing, kind="image", normalized=image.normalized)
    lab = Volume(lab_block, label_vol.spacing, kind="mask")
    return Patch(img, origin), Patch(lab, origin)


# ---------------------------------------------------------------------------
# augmentation


def rotate90_pair(image: Patch, label: Patch, axes: tuple[int, int]) -> tuple[Patch, Patch]:
    """Rotate image and label together by 90 degrees about an axis pair."""
    d = image.data.dims
    if not (d[0] == d[1] == d[2]):
        raise NonCubicPatch(f"rotation needs a cubic patch, got {d}")
    img = replace(image.data, data=np.rot90(image.data.data, k=1, axes=axes).copy())
    lab = replace(label.data, data=np.rot90(label.data.data, k=1, axes=axes).copy())
    return Patch(img, image.origin), Patch(lab, label.origin)


def shift_intensity(image: Patch, delta: float) -> Patch:
    """Add a constant intensity offset to the image only."""
    return Patch(replace(image.data, data=image.data.data + delta), image.origin)


def augment(image: Patch, label: Patch, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[Patch, Patch]:
    """Training-time augmentation: an optional 90-degree rotation applied
    to image and label identically, and an optional intensity shift on the
    image alone. Mirroring is deliberately never applied (it would swap
    left/right anatomy)."""
    if rng.random() < cfg.rot_prob:
        axes = ROT_AXIS_PAIRS[rng.integers(len(ROT_AXIS_PAIRS))]
        image, label = rotate90_pair(image, label, axes)
    if rng.random() < cfg.shift_prob:
        delta = rng.uniform(-cfg.shift, cfg.shift)
        image = shift_intensity(image, delta)
    return image, label
