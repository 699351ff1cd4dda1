"""Extension to novel classes: register new classes and parameter
generators without touching existing weights, supervise old classes with
the frozen model's own predictions (pseudo labels), and report forgetting.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import clipdriver as cd
from .errors import ClassIndexCollision, EmbeddingDimMismatch
from .inference import WindowSpec, sliding_window
from .metrics import dice
from .model import ModelState, make_window_predictor
from .taxonomy import ClassDef, LabelSpace, LabelVolume, Taxonomy
from .training import (MaskTarget, TrainConfig, TrainingDataset,
                       build_mask_target, train_step)
from .volume import Volume, sample_patch


@dataclass
class ExtensionPlan:
    """What a new partially labeled cohort brings: class definitions,
    their embeddings, and the data annotating only those classes."""

    new_classes: list[ClassDef]
    new_embeddings: dict[int, np.ndarray]
    datasets: list[TrainingDataset] = field(default_factory=list)

    def validate(self, model: ModelState) -> None:
        for cd_ in self.new_classes:
            if cd_.index in model.taxonomy:
                raise ClassIndexCollision(
                    f"class {cd_.index} ({cd_.name}) already exists")
            if cd_.index not in self.new_embeddings:
                raise EmbeddingDimMismatch(
                    f"class {cd_.index}: plan carries no embedding")
            v = np.asarray(self.new_embeddings[cd_.index])
            if v.shape != (model.embeddings.dim,):
                raise EmbeddingDimMismatch(
                    f"class {cd_.index}: embedding dim {v.shape} != "
                    f"store dim {model.embeddings.dim}")


def extend_model(model: ModelState, plan: ExtensionPlan,
                 rng: np.random.Generator) -> ModelState:
    """A new ModelState with one freshly initialized parameter generator
    per new class. Every pre-existing array (backbone, old maps, optimizer
    moments) is copied byte-identically; the taxonomy version is bumped."""
    plan.validate(model)
    taxonomy = model.taxonomy.extend(plan.new_classes)
    embeddings = cd.EmbeddingStore(
        {cls: v.copy() for cls, v in model.embeddings.vectors.items()},
        model.embeddings.dim, model.embeddings.source)
    lpg = {cls: cd.LpgMap(m.weight.copy(), m.bias.copy())
           for cls, m in model.lpg.items()}
    n_out = cd.head_param_count(model.backbone_cfg.decoder_channels)
    for cls_def in sorted(plan.new_classes, key=lambda c: c.index):
        embeddings.add(cls_def.index, np.asarray(plan.new_embeddings[cls_def.index],
                                                 dtype=np.float64))
        lpg[cls_def.index] = cd.init_lpg_map(rng, n_out, model.lpg_in_dim)
    return ModelState(
        taxonomy, embeddings, model.backbone_cfg,
        {k: v.copy() for k, v in model.backbone.items()}, lpg,
        step=model.step, adam=copy.deepcopy(model.adam),
        config_echo=model.config_echo)


def build_pseudo_targets(model: ModelState, x: Volume, y: LabelVolume,
                         taxonomy: Taxonomy, spec: WindowSpec,
                         mode: str = "hard", threshold: float = 0.5,
                         threads: int = 1) -> MaskTarget:
    """Supervision for one extension volume: ground truth for the new
    classes in ``y``'s label space, the (frozen) model's own prediction for
    every old class - thresholded in "hard" mode, raw probabilities in
    "soft" mode."""
    if mode not in ("hard", "soft"):
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")
    old_classes = [c for c in model.taxonomy.indices()
                   if c not in y.label_space.classes]
    masks: dict[int, np.ndarray] = {}
    if old_classes:
        probs = sliding_window(x, make_window_predictor(model, old_classes),
                               spec, threads=threads)
        for cls in old_classes:
            p = probs[cls].data
            masks[cls] = (p >= threshold).astype(np.float64) if mode == "hard" else p
    gt = build_mask_target(y.grid.data, y.label_space, taxonomy)
    masks.update(gt.masks)
    return MaskTarget(y.label_space.dataset_id, masks)


def evaluate_dice(model: ModelState, volumes, classes, spec: WindowSpec,
                  taxonomy: Taxonomy, threshold: float = 0.5,
                  threads: int = 1) -> dict[int, float]:
    """Mean Dice per class over (image, full LabelVolume) pairs, comparing
    thresholded sliding-window predictions with inclusion-completed truth."""
    from .taxonomy import decompose
    scores: dict[int, list[float]] = {cls: [] for cls in classes}
    for img, full in volumes:
        probs = sliding_window(img, make_window_predictor(model, classes),
                               spec, threads=threads)
        truth = decompose(full, taxonomy)
        for cls in classes:
            pred = probs[cls].data >= threshold
            gt = truth[cls].data if cls in truth else np.zeros(img.dims)
            scores[cls].append(dice(pred, gt))
    return {cls: float(np.mean(v)) for cls, v in scores.items()}


@dataclass
class ForgettingRow:
    cls: int
    name: str
    dice_before: float
    dice_after: float

    @property
    def delta(self) -> float:
        return self.dice_after - self.dice_before


def write_forgetting_report(path, rows: list[ForgettingRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,name,dice_before,dice_after,delta\n")
        for r in rows:
            fh.write(f"{r.cls},{r.name},{r.dice_before:.6f},"
                     f"{r.dice_after:.6f},{r.delta:+.6f}\n")


def extension_stage(model: ModelState, plan: ExtensionPlan, cfg: TrainConfig,
                    eval_set, spec: WindowSpec, rng: np.random.Generator,
                    pseudo: str = "hard", freeze_old_heads: bool = False,
                    refresh_pseudo_labels: bool = False, steps: int | None = None,
                    threads: int = 1, log_every: int = 0, log=print):
    """Run one continual-learning step.

    ``pseudo`` is "hard", "soft", or "none" (the no-pseudo-label ablation:
    old classes receive no supervision at all). ``eval_set`` holds held-out
    (image, full LabelVolume) pairs used for the before/after forgetting
    report. Returns (extended trained model, report rows, history).
    """
    old_classes = model.taxonomy.indices()
    extended = extend_model(model, plan, rng)
    extended.step = 0  # the extension stage runs its own warmup/cosine schedule
    frozen = model  # pseudo labels come from the pre-extension snapshot

    # truth decomposition must use the grown taxonomy on both sides of the
    # report (eval labels already carry the new classes)
    before = evaluate_dice(model, eval_set, old_classes, spec,
                           extended.taxonomy, threads=threads)

    def targets_for(ds: TrainingDataset, img: Volume, lab: LabelVolume):
        if pseudo == "none":
            return None
        src = extended if refresh_pseudo_labels else frozen
        return build_pseudo_targets(src, img, lab, extended.taxonomy, spec,
                                    mode=pseudo, threads=threads)

    # pseudo targets are per volume; cache them up front (frozen snapshot)
    cache: dict[int, MaskTarget] = {}
    if pseudo != "none" and not refresh_pseudo_labels:
        key = 0
        for ds in plan.datasets:
            for img, lab in ds.volumes:
                cache[key] = targets_for(ds, img, lab)
                key += 1

    total = cfg.total_steps - extended.step if steps is None else steps
    history = []
    for _ in range(max(0, total)):
        batch = []
        for _ in range(cfg.batch_size):
            flat = [(di, vi) for di, ds in enumerate(plan.datasets)
                    for vi in range(len(ds.volumes))]
            di, vi = flat[rng.integers(len(flat))]
            ds = plan.datasets[di]
            img, lab = ds.volumes[vi]
            pi, pl = sample_patch(img, lab, cfg.patch_size, cfg.fg_ratio, rng)
            if pseudo == "none":
                target = build_mask_target(pl.data.data, ds.space, extended.taxonomy)
            else:
                vol_key = sum(len(d.volumes) for d in plan.datasets[:di]) + vi
                full_target = cache[vol_key] if vol_key in cache \
                    else targets_for(ds, img, lab)
                target = _crop_target(full_target, pl.origin, cfg.patch_size)
            batch.append((pi.data.data, target))
        metrics = train_step_frozen(batch, extended, cfg, model.taxonomy.indices()
                                    if freeze_old_heads else ())
        history.append(metrics)
        if log_every and metrics["step"] % log_every == 0:
            log(f"extension step {metrics['step']:5d}  loss {metrics['loss']:.4f}")

    new_classes = [c.index for c in plan.new_classes]
    after = evaluate_dice(extended, eval_set, old_classes + new_classes, spec,
                          extended.taxonomy, threads=threads)
    rows = [ForgettingRow(cls, extended.taxonomy[cls].name,
                          before.get(cls, float("nan")), after[cls])
            for cls in old_classes]
    rows += [ForgettingRow(cls, extended.taxonomy[cls].name, float("nan"),
                           after[cls]) for cls in new_classes]
    return extended, rows, history


def _crop_target(target: MaskTarget, origin, size) -> MaskTarget:
    size = tuple(size if np.iterable(size) else (size,) * 3)
    out = {}
    for cls, m in target.masks.items():
        block = np.zeros(size, dtype=np.float64)
        src, dst = [], []
        ok = True
        for o, s, n in zip(origin, size, m.shape):
            lo, hi = max(o, 0), min(o + s, n)
            if lo >= hi:
                ok = False
                break
            src.append(slice(lo, hi))
            dst.append(slice(lo - o, hi - o))
        if ok:
            block[tuple(dst)] = m[tuple(src)]
        out[cls] = block
    return MaskTarget(target.dataset_id, out)


def train_step_frozen(batch, model: ModelState, cfg: TrainConfig,
                      frozen_classes=()):
    """train_step variant that drops the parameter-generator gradients of
    ``frozen_classes`` before the optimizer sees them."""
    if not frozen_classes:
        return train_step(batch, model, cfg)
    from .errors import DivergedLoss
    from .model import backward_sample, forward_sample
    from .training import (_adam_state, adam_step, learning_rate, masked_loss,
                           masked_loss_grad)
    total, loss_sum = {}, 0.0
    for x, target in batch:
        probs, tape = forward_sample(model, x, classes=sorted(target.masks))
        loss, _ = masked_loss(probs, target)
        loss_sum += loss
        grads = backward_sample(model, tape, masked_loss_grad(probs, target),
                                cfg.detach_global_feature)
        for k, g in grads.items():
            if k in total:
                total[k] += g
            else:
                total[k] = g
    for cls in frozen_classes:
        total.pop(f"lpg/{cls}/W", None)
        total.pop(f"lpg/{cls}/b", None)
    if not np.isfinite(loss_sum):
        raise DivergedLoss(f"non-finite loss at step {model.step}")
    if not model.adam:
        model.adam.update(_adam_state())
    adam_step(model.adam, model.named_parameters(), total,
              learning_rate(model.step, cfg), cfg.weight_decay)
    model.step += 1
    return {"step": model.step, "loss": loss_sum / len(batch),
            "lr": learning_rate(model.step - 1, cfg), "dice": {}}
