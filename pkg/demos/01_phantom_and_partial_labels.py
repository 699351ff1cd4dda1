"""Generate a two-dataset phantom suite and look at its partial-label
structure: dataset A annotates three organs, dataset B annotates only the
tumor, and the full (hidden) truth knows everything.

Run:  python demos/01_phantom_and_partial_labels.py
"""

import numpy as np

from uniseg.phantom import generate, two_dataset_spec
from uniseg.taxonomy import decompose
from uniseg.volume import normalize_intensity

taxonomy, spec = two_dataset_spec(grid=32)
rng = np.random.default_rng(7)
sample = generate(spec, taxonomy, rng)

print("taxonomy:")
for cls in taxonomy.indices():
    c = taxonomy[cls]
    parent = f" (inside {taxonomy[c.parent].name})" if c.parent else ""
    print(f"  {cls}: {c.name} [{c.kind}, tier {c.merge_tier}]{parent}")

img = normalize_intensity(sample.image)
print(f"\nimage: {img.dims} voxels, spacing {img.spacing} mm, "
      f"intensity range [{img.data.min():.3f}, {img.data.max():.3f}]")

print("\nvoxel counts per class in the full label map:")
for cls in taxonomy.indices():
    n = int((sample.full.grid.data == cls).sum())
    print(f"  class {cls}: {n}")

print("\npartial views (what each dataset's annotator sees):")
for ds_id, lab in sample.partials.items():
    present = sorted(int(c) for c in np.unique(lab.grid.data) if c)
    print(f"  dataset {ds_id}: annotates {sorted(lab.label_space.classes)}, "
          f"classes present {present}")

masks = decompose(sample.full, taxonomy)
inside = (masks[4].data <= masks[1].data).all()
print(f"\ninclusion: tumor mask is a subset of its organ mask: {inside}")

mid = sample.full.grid.data[:, :, sample.full.grid.dims[2] // 2]
print("\nmid-sagittal slice of the full label map (0 = background):")
for row in mid[::2, ::2]:
    print("  " + "".join(str(v) if v else "." for v in row))
