"""Tour of the evaluation metrics: Dice, spacing-aware normalized surface
distance, and patient-level tumor detection with the harmonic-mean score.

Run:  python demos/05_metrics_tour.py
"""

import numpy as np

from uniseg.metrics import DetectionRule, detection_stats, dice, harmonic_mean, nsd

rng = np.random.default_rng(0)

print("Dice:")
a = np.zeros((8, 8, 8), np.uint8)
b = np.zeros((8, 8, 8), np.uint8)
a[2:6, 2:6, 2:6] = 1
b[3:7, 2:6, 2:6] = 1
print(f"  two offset cubes: {dice(a, b):.4f}")
print(f"  identical masks:  {dice(a, a):.4f}")
print(f"  both empty:       {dice(np.zeros((2,2,2)), np.zeros((2,2,2))):.4f}")

print("\nNSD is tolerance- and spacing-aware:")
p = np.zeros((7, 6, 6), np.uint8)
g = np.zeros((7, 6, 6), np.uint8)
p[2] = 1
g[4] = 1  # plates two voxels apart
for tol in (1.0, 2.0, 3.0):
    print(f"  plates 2 voxels apart at 1 mm spacing, tol {tol:.0f} mm: "
          f"{nsd(p, g, tol):.1f}")
print(f"  same masks, 1.5 mm slices, tol 2 mm: "
      f"{nsd(p, g, 2.0, spacing=(1.5, 1.0, 1.0)):.1f}  (3 mm apart now)")

print("\ndetection: sensitivity/specificity over cases, harmonic mean:")
rule = DetectionRule(min_voxels=10)
cases = []
for has_tumor in (True,) * 9 + (False,) * 10:
    mask = np.zeros((8, 8, 8), np.uint8)
    if has_tumor and rng.random() < 0.9:       # one miss
        mask.ravel()[:rng.integers(10, 60)] = 1
    if not has_tumor and rng.random() < 0.1:   # one false call
        mask.ravel()[:12] = 1
    cases.append((mask, has_tumor))
sens, spec, harm = detection_stats(cases, rule)
print(f"  sensitivity {sens:.3f}, specificity {spec:.3f}, harmonic {harm:.3f}")
print(f"  a degenerate detector scores {harmonic_mean(1.0, 0.0):.1f} "
      "(call-everything gets no credit)")
