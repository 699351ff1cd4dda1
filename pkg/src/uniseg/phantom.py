"""Synthetic "CT" volumes with geometric organs, vessels and tumors whose
ground truth is exact by construction, plus partial-label views and the
dataset manifest format consumed by the training and extension stages."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SpecOverlap, TemplateParseError
from .taxonomy import ClassDef, LabelSpace, LabelVolume, Taxonomy
from .volume import CLIP_HI, CLIP_LO, Volume, load_volume, save_volume


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid organ; center/radii are grid fractions."""
    cls: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float


@dataclass(frozen=True)
class Sphere:
    """Tumor: a sphere inside a parent organ, offset from the parent center
    in fractions of the parent radii; contrast is added to the parent value."""
    cls: int
    parent_cls: int
    offset: tuple[float, float, float]
    radius: float  # fraction of the smallest parent radius
    delta: float


@dataclass(frozen=True)
class Tube:
    """Vessel: a straight tube along one axis; center/radius are grid
    fractions of the two cross axes."""
    cls: int
    axis: int
    center: tuple[float, float]
    radius: float
    intensity: float


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    background: float = -120.0
    noise_sigma: float = 8.0
    organs: list[Ellipsoid] = field(default_factory=list)
    tumors: list[Sphere] = field(default_factory=list)
    vessels: list[Tube] = field(default_factory=list)
    datasets: list[tuple[str, frozenset[int]]] = field(default_factory=list)
    center_jitter: float = 0.03   # grid-fraction jitter per volume
    radius_jitter: float = 0.08   # relative radius jitter per volume
    overlap_tolerance: int = 0    # allowed same-tier overlap voxels

    def __post_init__(self):
        values = [self.background] + [o.intensity for o in self.organs] \
            + [v.intensity for v in self.vessels]
        for t in self.tumors:
            parent = {o.cls: o for o in self.organs}.get(t.parent_cls)
            if parent is not None:
                values.append(parent.intensity + t.delta)
        for v in values:
            if not CLIP_LO <= v <= CLIP_HI:
                raise ValueError(
                    f"intensity {v} outside the CT window [{CLIP_LO}, {CLIP_HI}]")


@dataclass
class PhantomSample:
    image: Volume
    full: LabelVolume
    partials: dict[str, LabelVolume]


def _coords(grid):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in grid), indexing="ij")


def _ellipsoid_mask(grid, center_vox, radii_vox) -> np.ndarray:
    zz, yy, xx = _coords(grid)
    q = sum(((g - c) / r) ** 2 for g, c, r in zip((zz, yy, xx), center_vox, radii_vox))
    return q <= 1.0


def _tube_mask(grid, axis, center_vox, radius_vox) -> np.ndarray:
    zz, yy, xx = _coords(grid)
    cross = [g for i, g in enumerate((zz, yy, xx)) if i != axis]
    q = sum((g - c) ** 2 for g, c in zip(cross, center_vox))
    return q <= radius_vox ** 2


def generate(spec: PhantomSpec, taxonomy: Taxonomy,
             rng: np.random.Generator) -> PhantomSample:
    """One phantom volume: image with noise, the exact full label map, and
    one partial LabelVolume per dataset (classes outside a dataset's label
    space are hidden, never relabeled)."""
    grid = tuple(spec.grid)
    jith = lambda: rng.uniform(-spec.center_jitter, spec.center_jitter)
    jitr = lambda: 1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter)

    organ_geom = {}
    masks: dict[int, np.ndarray] = {}
    for o in spec.organs:
        center = tuple((c + jith()) * (n - 1) for c, n in zip(o.center, grid))
        radii = tuple(max(1.0, r * jitr() * n) for r, n in zip(o.radii, grid))
        organ_geom[o.cls] = (center, radii)
        masks[o.cls] = _ellipsoid_mask(grid, center, radii)
    for v in spec.vessels:
        center = tuple((c + jith()) * (n - 1)
                       for c, n in zip(v.center, [g for i, g in enumerate(grid)
                                                  if i != v.axis]))
        masks[v.cls] = _tube_mask(grid, v.axis, center, v.radius * min(grid))
    tumor_parent = {}
    for t in spec.tumors:
        pc, pr = organ_geom[t.parent_cls]
        center = tuple(c + off * r for c, off, r in zip(pc, t.offset, pr))
        radius = t.radius * min(pr)
        masks[t.cls] = _ellipsoid_mask(grid, center, (radius,) * 3)
        tumor_parent[t.cls] = t.parent_cls
        if (masks[t.cls] & ~masks[t.parent_cls]).any():
            raise SpecOverlap(
                f"tumor {t.cls} sticks out of parent organ {t.parent_cls}; "
                "shrink radius or offset")

    # same-tier overlap guard (tumor-in-organ is the modeled inclusion case)
    by_tier: dict[int, list[int]] = {}
    for cls in masks:
        by_tier.setdefault(taxonomy[cls].merge_tier, []).append(cls)
    for tier, members in by_tier.items():
        for i, a in enumerate(sorted(members)):
            for b in sorted(members)[i + 1:]:
                n = int((masks[a] & masks[b]).sum())
                if n > spec.overlap_tolerance:
                    raise SpecOverlap(
                        f"classes {a} and {b} (tier {tier}) overlap on {n} voxels")

    image = np.full(grid, spec.background, dtype=np.float64)
    labels = np.zeros(grid, dtype=np.int64)
    paint_order = sorted(masks, key=lambda c: (taxonomy[c].merge_tier, c))
    organ_value = {o.cls: o.intensity for o in spec.organs}
    vessel_value = {v.cls: v.intensity for v in spec.vessels}
    tumor_delta = {t.cls: t.delta for t in spec.tumors}
    for cls in paint_order:
        if cls in organ_value:
            image[masks[cls]] = organ_value[cls]
        elif cls in vessel_value:
            image[masks[cls]] = vessel_value[cls]
        else:
            image[masks[cls]] = organ_value[tumor_parent[cls]] + tumor_delta[cls]
        labels[masks[cls]] = cls
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, grid)

    all_space = LabelSpace("full", frozenset(masks))
    full = LabelVolume(Volume(labels, spec.spacing, kind="mask"), all_space)

    partials = {}
    for ds_id, classes in spec.datasets:
        space = LabelSpace(ds_id, frozenset(classes))
        space.validate_against(taxonomy)
        part = np.zeros(grid, dtype=np.int64)
        for cls in paint_order:
            if cls in space.classes:
                part[masks[cls]] = cls
        partials[ds_id] = LabelVolume(Volume(part, spec.spacing, kind="mask"), space)
    img = Volume(image, spec.spacing, kind="image")
    return PhantomSample(img, full, partials)


# ---------------------------------------------------------------------------
# canned desk-scale suites


def toy_taxonomy(n_organs: int = 3, tumor_parents: tuple[int, ...] = (1,)) -> Taxonomy:
    """Tiny taxonomy: ``n_organs`` organs then one tumor per listed parent."""
    classes = {}
    for i in range(1, n_organs + 1):
        classes[i] = ClassDef(i, f"organ {chr(96 + i)}", "organ", None, "none", 1)
    nxt = n_organs + 1
    for parent in tumor_parents:
        classes[nxt] = ClassDef(nxt, f"tumor of organ {chr(96 + parent)}",
                                "tumor", parent, "none", 3)
        nxt += 1
    return Taxonomy(classes)


def two_dataset_spec(grid: int = 32) -> tuple[Taxonomy, PhantomSpec]:
    """The partial-label workhorse: dataset A annotates three organs,
    dataset B annotates only the tumor inside organ a.

    Intensities are spaced so that every pairwise contrast stays above the
    augmentation shift amplitude after normalization (min gap 0.15 in
    normalized units)."""
    taxonomy = toy_taxonomy(3, (1,))
    spec = PhantomSpec(
        grid=(grid,) * 3,
        background=-154.0,
        organs=[
            Ellipsoid(1, (0.32, 0.34, 0.30), (0.21, 0.23, 0.19), 220.0),
            Ellipsoid(2, (0.68, 0.40, 0.68), (0.17, 0.17, 0.17), -60.0),
            Ellipsoid(3, (0.45, 0.72, 0.55), (0.14, 0.16, 0.20), 127.0),
        ],
        tumors=[Sphere(4, 1, (0.15, -0.15, 0.2), 0.5, -187.0)],
        datasets=[("A", frozenset({1, 2, 3})), ("B", frozenset({4}))],
        noise_sigma=5.0,
    )
    return taxonomy, spec


def organs_only_spec(grid: int = 32) -> tuple[Taxonomy, PhantomSpec]:
    """Step-1 source for the extension benchmark: the same anatomy, but
    only the organ annotations exist yet."""
    taxonomy, spec = two_dataset_spec(grid)
    return taxonomy, replace(spec, datasets=[("A", frozenset({1, 2, 3}))])


def tumor_only_spec(grid: int = 32) -> tuple[Taxonomy, PhantomSpec]:
    """Step-2 source: a new cohort annotating only the tumor class."""
    taxonomy, spec = two_dataset_spec(grid)
    return taxonomy, replace(spec, datasets=[("B", frozenset({4}))])


def six_class_spec(grid: int = 32) -> tuple[Taxonomy, PhantomSpec]:
    """Six classes (four organs, two tumors) for the embedding ablation.

    One fully labeled dataset: this suite probes encoding choices and
    per-class head conditioning, not partial labels (the two-dataset suite
    owns those)."""
    taxonomy = Taxonomy({
        1: ClassDef(1, "organ a", "organ", None, "none", 1),
        2: ClassDef(2, "organ b", "organ", None, "none", 1),
        3: ClassDef(3, "organ c", "organ", None, "none", 1),
        4: ClassDef(4, "organ d", "organ", None, "none", 1),
        5: ClassDef(5, "tumor of organ a", "tumor", 1, "none", 3),
        6: ClassDef(6, "tumor of organ c", "tumor", 3, "none", 3),
    })
    # intensities sit on an even ladder (0.15 normalized gaps) and the
    # tumors contrast strongly against their host organs
    spec = PhantomSpec(
        grid=(grid,) * 3,
        background=-154.0,
        organs=[
            Ellipsoid(1, (0.30, 0.32, 0.30), (0.21, 0.23, 0.20), 229.0),
            Ellipsoid(2, (0.70, 0.34, 0.68), (0.18, 0.19, 0.19), -90.0),
            Ellipsoid(3, (0.32, 0.70, 0.64), (0.19, 0.20, 0.20), 165.0),
            Ellipsoid(4, (0.68, 0.68, 0.32), (0.17, 0.18, 0.17), -26.0),
        ],
        tumors=[Sphere(5, 1, (0.2, -0.1, 0.15), 0.55, -128.0),
                Sphere(6, 3, (-0.15, 0.2, -0.1), 0.55, -127.0)],
        datasets=[("all", frozenset({1, 2, 3, 4, 5, 6}))],
        noise_sigma=5.0,
    )
    return taxonomy, spec


# ---------------------------------------------------------------------------
# manifest I/O


def write_dataset(outdir, ds_id: str, samples: list[PhantomSample],
                  which: str = "partial") -> list[tuple[str, str]]:
    """Write image/label volume pairs for one dataset; returns relative
    (image, label) paths."""
    os.makedirs(os.path.join(outdir, ds_id), exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        lab = s.partials[ds_id] if which == "partial" else s.full
        ipath = os.path.join(ds_id, f"vol{i:03d}_img.uvol")
        lpath = os.path.join(ds_id, f"vol{i:03d}_lab.uvol")
        save_volume(os.path.join(outdir, ipath), s.image)
        save_volume(os.path.join(outdir, lpath), lab.grid)
        entries.append((ipath, lpath))
    return entries


def write_manifest(path, datasets: list[tuple[str, frozenset[int], list[tuple[str, str]]]]) -> None:
    """Manifest: ``dataset <id>`` / ``labels <c...>`` / ``volume <img> <lab>``
    lines; volume paths are relative to the manifest file."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# uniseg dataset manifest\n")
        for ds_id, classes, entries in datasets:
            fh.write(f"dataset {ds_id}\n")
            fh.write("labels " + " ".join(str(c) for c in sorted(classes)) + "\n")
            for ipath, lpath in entries:
                fh.write(f"volume {ipath} {lpath}\n")


def read_manifest(path) -> list[tuple[str, frozenset[int], list[tuple[str, str]]]]:
    base = os.path.dirname(os.path.abspath(path))
    datasets = []
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            if head == "dataset":
                current = (rest[0], None, [])
                datasets.append(current)
            elif head == "labels":
                if current is None:
                    raise TemplateParseError(f"{path}:{lineno}: labels before dataset")
                datasets[-1] = current = (current[0],
                                          frozenset(int(c) for c in rest), current[2])
            elif head == "volume":
                if current is None or current[1] is None:
                    raise TemplateParseError(f"{path}:{lineno}: volume before labels")
                current[2].append((os.path.join(base, rest[0]),
                                   os.path.join(base, rest[1])))
            else:
                raise TemplateParseError(f"{path}:{lineno}: unknown directive {head!r}")
    return datasets


def load_manifest_datasets(path, taxonomy: Taxonomy, normalize=None):
    """Build training datasets from a manifest; ``normalize`` optionally
    maps each image Volume (e.g. volume.normalize_intensity)."""
    from .training import TrainingDataset
    out = []
    for ds_id, classes, entries in read_manifest(path):
        space = LabelSpace(ds_id, classes)
        space.validate_against(taxonomy)
        volumes = []
        for ipath, lpath in entries:
            img = load_volume(ipath)
            if normalize is not None:
                img = normalize(img)
            lab = LabelVolume(load_volume(lpath), space)
            volumes.append((img, lab))
        out.append(TrainingDataset(space, volumes))
    return out
