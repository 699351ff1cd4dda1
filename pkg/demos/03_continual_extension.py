"""Continual extension: start from an organs-only model, add a tumor class
from a cohort that annotates nothing else, supervise the old classes with
the frozen model's own predictions, and report forgetting.

Run:  python demos/03_continual_extension.py     (a few minutes on CPU)
"""

import numpy as np

from uniseg import clipdriver as cd
from uniseg import training as tr
from uniseg.backbone import BackboneConfig
from uniseg.continual import ExtensionPlan, extension_stage
from uniseg.inference import WindowSpec
from uniseg.model import init_model
from uniseg.phantom import generate, organs_only_spec, toy_taxonomy, tumor_only_spec
from uniseg.taxonomy import ClassDef
from uniseg.volume import normalize_intensity

STEP1_STEPS, STEP2_STEPS = 500, 300

# step 1: the world has three organ classes; tumors exist but are unlabeled
world_tax, spec_a = organs_only_spec(grid=32)
old_tax = toy_taxonomy(3, ())
rng = np.random.default_rng(5)
train_a = [generate(spec_a, world_tax, rng) for _ in range(6)]
eval_vols = [generate(spec_a, world_tax, rng) for _ in range(2)]

ds_a = tr.TrainingDataset(
    train_a[0].partials["A"].label_space,
    [(normalize_intensity(s.image), s.partials["A"]) for s in train_a])
eval_set = [(normalize_intensity(s.image), s.full) for s in eval_vols]

embeddings = cd.one_hot_store(old_tax, dim=8)  # leave room for new classes
model = init_model(old_tax, embeddings, BackboneConfig(), seed=2)
cfg = tr.TrainConfig(lr=2e-3, batch_size=2, patch_size=16,
                     epochs=STEP1_STEPS // 20, steps_per_epoch=20,
                     warmup_epochs=3)
print(f"step 1: training organs on dataset A for {cfg.total_steps} steps ...")
tr.train(model, [ds_a], cfg, np.random.default_rng(3), log_every=200)

# step 2: a new cohort annotates only the tumor
_, spec_b = tumor_only_spec(grid=32)
train_b = [generate(spec_b, world_tax, rng) for _ in range(6)]
ds_b = tr.TrainingDataset(
    train_b[0].partials["B"].label_space,
    [(normalize_intensity(s.image), s.partials["B"]) for s in train_b])
new_vec = np.zeros(8)
new_vec[3] = 1.0
plan = ExtensionPlan([ClassDef(4, "tumor of organ a", "tumor", 1, "none", 3)],
                     {4: new_vec}, [ds_b])

cfg2 = tr.TrainConfig(lr=3e-4, batch_size=2, patch_size=16,
                      epochs=STEP2_STEPS // 20, steps_per_epoch=20,
                      warmup_epochs=2)
print(f"step 2: extending with the tumor class for {cfg2.total_steps} steps, "
      "old classes supervised by soft pseudo labels ...")
extended, report, _ = extension_stage(
    model, plan, cfg2, eval_set, WindowSpec((16, 16, 16), 0.5),
    np.random.default_rng(4), pseudo="soft", log_every=100)

print("\nforgetting report (class, before, after, delta):")
for row in report:
    before = "  n/a" if np.isnan(row.dice_before) else f"{row.dice_before:.3f}"
    print(f"  {row.name:24s} {before} -> {row.dice_after:.3f} "
          f"({row.delta:+.3f})" if not np.isnan(row.dice_before)
          else f"  {row.name:24s} {before} -> {row.dice_after:.3f} (new)")
