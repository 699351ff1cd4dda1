"""Global class template, per-dataset partial label spaces, inclusion and
laterality relations, and decomposition of integer label maps into
per-class binary masks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (ClassNotAnnotated, DanglingParent, DegeneratePlane,
                     DuplicateIndex, ShapeMismatch, TemplateParseError)
from .volume import Volume

KINDS = ("organ", "vessel", "tumor")
LATERALITIES = ("none", "left", "right")


@dataclass(frozen=True)
class ClassDef:
    index: int
    name: str
    kind: str
    parent: int | None = None
    laterality: str = "none"
    merge_tier: int = 1

    def __post_init__(self):
        if self.index < 1:
            raise TemplateParseError(f"class index must be >= 1, got {self.index}")
        if self.kind not in KINDS:
            raise TemplateParseError(f"unknown kind {self.kind!r}")
        if self.laterality not in LATERALITIES:
            raise TemplateParseError(f"unknown laterality {self.laterality!r}")
        if self.merge_tier < 1:
            raise TemplateParseError(f"merge_tier must be >= 1, got {self.merge_tier}")


def _base_name(name: str) -> str:
    """Name with a leading left/right marker removed, for pair matching."""
    low = name.lower()
    for prefix in ("l ", "r ", "left ", "right "):
        if low.startswith(prefix):
            return name[len(prefix):].strip().lower()
    return low


@dataclass(frozen=True)
class Taxonomy:
    """Immutable class template. Safe to share across threads."""

    classes: dict[int, ClassDef]
    version: int = 1

    def __post_init__(self):
        self._validate()

    def _validate(self):
        for idx, cd in self.classes.items():
            if idx != cd.index:
                raise TemplateParseError(f"key {idx} != ClassDef.index {cd.index}")
            if cd.parent is not None:
                parent = self.classes.get(cd.parent)
                if parent is None:
                    raise DanglingParent(
                        f"class {idx} ({cd.name}): parent {cd.parent} not in template")
                if parent.merge_tier >= cd.merge_tier:
                    raise TemplateParseError(
                        f"class {idx} ({cd.name}): parent tier {parent.merge_tier} "
                        f"must be strictly lower than {cd.merge_tier}")
        by_side = {"left": {}, "right": {}}
        for cd in self.classes.values():
            if cd.laterality in by_side:
                by_side[cd.laterality][_base_name(cd.name)] = cd
        if set(by_side["left"]) != set(by_side["right"]):
            odd = set(by_side["left"]) ^ set(by_side["right"])
            raise TemplateParseError(f"unpaired lateral classes: {sorted(odd)}")

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, idx: int) -> bool:
        return idx in self.classes

    def __getitem__(self, idx: int) -> ClassDef:
        return self.classes[idx]

    def indices(self) -> list[int]:
        return sorted(self.classes)

    def children_of(self, idx: int) -> list[int]:
        return sorted(c.index for c in self.classes.values() if c.parent == idx)

    def lateral_pairs(self) -> list[tuple[int, int]]:
        """(left_index, right_index) pairs, matched on the base name."""
        left = {_base_name(c.name): c.index for c in self.classes.values()
                if c.laterality == "left"}
        right = {_base_name(c.name): c.index for c in self.classes.values()
                 if c.laterality == "right"}
        return sorted((left[b], right[b]) for b in left)

    def to_text(self) -> str:
        """Canonical template serialization (parse round-trips)."""
        lines = ["# index\tname\tkind\tparent\tlaterality\tmerge_tier"]
        for idx in self.indices():
            cd = self.classes[idx]
            parent = "-" if cd.parent is None else str(cd.parent)
            lines.append(f"{cd.index}\t{cd.name}\t{cd.kind}\t{parent}\t"
                         f"{cd.laterality}\t{cd.merge_tier}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        payload = f"v{self.version}\n{self.to_text()}".encode()
        return hashlib.sha256(payload).hexdigest()

    def extend(self, new_classes: list[ClassDef]) -> "Taxonomy":
        """New taxonomy with extra classes appended and the version bumped.

        Extended indices need only be unique (the contiguity invariant
        applies to template files, not to grown taxonomies).
        """
        merged = dict(self.classes)
        for cd in new_classes:
            if cd.index in merged:
                raise DuplicateIndex(f"class index {cd.index} already present")
            merged[cd.index] = cd
        return Taxonomy(merged, version=self.version + 1)


@dataclass(frozen=True)
class LabelSpace:
    """The set of classes a dataset actually annotates."""

    dataset_id: str
    classes: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "classes", frozenset(int(c) for c in self.classes))
        if not self.classes:
            raise ValueError(f"dataset {self.dataset_id!r}: empty label space")

    def validate_against(self, taxonomy: Taxonomy) -> None:
        missing = sorted(c for c in self.classes if c not in taxonomy)
        if missing:
            raise TemplateParseError(
                f"dataset {self.dataset_id!r}: classes {missing} not in template")


@dataclass
class LabelVolume:
    """Integer label grid where each voxel holds one class index or 0."""

    grid: Volume
    label_space: LabelSpace

    def __post_init__(self):
        present = set(np.unique(self.grid.data)) - {0}
        stray = sorted(int(c) for c in present if int(c) not in self.label_space.classes)
        if stray:
            raise ClassNotAnnotated(
                f"grid voxels carry classes {stray} outside the label space of "
                f"{self.label_space.dataset_id!r}")


def parse_template_rows(text: str, source: str = "<string>") -> list[ClassDef]:
    """Parse template-format rows into ClassDefs without cross-row checks
    (used by extension plans, whose parents live in the base taxonomy)."""
    rows: list[ClassDef] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise TemplateParseError(
                f"{source}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            parent = None if parts[3].strip() == "-" else int(parts[3])
            tier = int(parts[5])
        except ValueError as exc:
            raise TemplateParseError(f"{source}:{lineno}: {exc}") from None
        if idx in seen:
            raise DuplicateIndex(f"{source}:{lineno}: duplicate class index {idx}")
        seen.add(idx)
        try:
            rows.append(ClassDef(idx, parts[1].strip(), parts[2].strip(),
                                 parent, parts[4].strip(), tier))
        except TemplateParseError as exc:
            raise TemplateParseError(f"{source}:{lineno}: {exc}") from None
    return rows


def parse_template(text: str, source: str = "<string>",
                   require_contiguous: bool = True) -> Taxonomy:
    rows = parse_template_rows(text, source)
    if not rows:
        raise TemplateParseError(f"{source}: no classes defined")
    classes = {r.index: r for r in rows}
    want = list(range(1, len(classes) + 1))
    if require_contiguous and sorted(classes) != want:
        raise TemplateParseError(
            f"{source}: indices must be contiguous 1..{len(classes)}, "
            f"got {sorted(classes)}")
    for r in rows:
        if r.parent is not None and r.parent not in classes:
            raise DanglingParent(
                f"{source}: class {r.index} ({r.name}) references missing "
                f"parent {r.parent}")
    return Taxonomy(classes)


def load_template(path) -> Taxonomy:
    with open(path, encoding="utf-8") as fh:
        return parse_template(fh.read(), source=str(path))


# ---------------------------------------------------------------------------
# mask operations


def binarize(label: LabelVolume, cls: int) -> Volume:
    """Binary mask of one class: 1 exactly where the grid equals ``cls``."""
    if cls not in label.label_space.classes:
        raise ClassNotAnnotated(
            f"class {cls} not annotated by {label.label_space.dataset_id!r}")
    mask = (label.grid.data == cls).astype(np.uint8)
    return Volume(mask, label.grid.spacing, kind="mask")


def decompose(label: LabelVolume, taxonomy: Taxonomy,
              inclusion: bool = True) -> dict[int, Volume]:
    """Per-class binary masks for every annotated class, with parent masks
    optionally completed by their children (tumor voxels re-join the organ)."""
    masks = {cls: binarize(label, cls) for cls in sorted(label.label_space.classes)}
    return apply_inclusion(masks, taxonomy) if inclusion else masks


def apply_inclusion(masks: dict[int, Volume], taxonomy: Taxonomy) -> dict[int, Volume]:
    """OR every child mask into its parent, transitively (child tiers are
    strictly higher, so a single high-to-low pass closes chains). A parent
    that has no mask yet is created as the child's copy. Idempotent."""
    out = {cls: m.copy() for cls, m in masks.items()}
    if not out:
        return out
    # walk tiers top-down so parents created along the way (whose tier is
    # strictly lower) still get visited
    for tier in range(max(taxonomy[c].merge_tier for c in taxonomy.classes), 0, -1):
        for cls in sorted(c for c in out if taxonomy[c].merge_tier == tier):
            parent = taxonomy[cls].parent
            if parent is None:
                continue
            if parent in out:
                if out[parent].dims != out[cls].dims:
                    raise ShapeMismatch(
                        f"mask dims differ: {parent}:{out[parent].dims} "
                        f"vs {cls}:{out[cls].dims}")
                merged = ((out[parent].data > 0) | (out[cls].data > 0)).astype(np.uint8)
                out[parent] = Volume(merged, out[parent].spacing, kind="mask")
            else:
                out[parent] = out[cls].copy()
    return out


@dataclass(frozen=True)
class SagittalPlane:
    """Oriented plane ``normal . (p - point) = 0`` in voxel index coordinates
    (z, y, x). The positive side is "left"."""

    normal: tuple[float, float, float]
    point: tuple[float, float, float]

    @staticmethod
    def mid_sagittal(dims: tuple[int, int, int]) -> "SagittalPlane":
        """Plane through the grid center, orthogonal to the W (sagittal) axis."""
        center = tuple((n - 1) / 2.0 for n in dims)
        return SagittalPlane((0.0, 0.0, 1.0), center)

    def signed(self, dims: tuple[int, int, int]) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        if float(np.dot(n, n)) == 0.0:
            raise DegeneratePlane("plane normal is zero")
        grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                            indexing="ij")
        s = np.zeros(dims, dtype=np.float64)
        for g, ni, pi in zip(grids, n, self.point):
            s += ni * (g - pi)
        return s


def split_laterality(mask: Volume, plane: SagittalPlane) -> tuple[Volume, Volume]:
    """Partition a binary mask into (left, right) half-space masks.

    Voxels strictly on the positive side of the plane go left; the plane
    itself and the negative side go right, so the outputs are disjoint and
    union back to the input for every plane."""
    s = plane.signed(mask.dims)
    m = mask.data > 0
    left = Volume((m & (s > 0)).astype(np.uint8), mask.spacing, kind="mask")
    right = Volume((m & (s <= 0)).astype(np.uint8), mask.spacing, kind="mask")
    return left, right
