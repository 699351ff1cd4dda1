"""Masked partial-label optimization: per-class BCE + Dice restricted to
the annotated classes, AdamW with warmup-cosine schedule, the training
loop over partially labeled datasets, and checkpointing."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import clipdriver as cd
from .backbone import BackboneConfig
from .errors import (CheckpointVersion, DivergedLoss, EmptyLabelSpace,
                     ShapeMismatch, TaxonomyMismatch)
from .model import ModelState, backward_sample, forward_sample
from .taxonomy import LabelSpace, LabelVolume, Taxonomy, apply_inclusion, parse_template
from .volume import AugmentConfig, Volume, augment, sample_patch

DICE_EPS = 1e-5
BCE_CLAMP = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 50
    schedule: str = "warmup-cosine"
    batch_size: int = 2
    patch_size: int = 96
    epochs: int = 100
    steps_per_epoch: int = 20
    seed: int = 0
    fg_ratio: float = 2.0 / 3.0
    class_balanced_fg: bool = False
    augment: bool = True
    shift_amplitude: float = 0.1
    detach_global_feature: bool = False

    def __post_init__(self):
        # lr 0 is legal: it gives the provably-inert step used by the
        # no-update sanity checks
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


@dataclass
class MaskTarget:
    """Per-class binary targets for one sample; only the sample's annotated
    classes appear."""

    dataset_id: str
    masks: dict[int, np.ndarray]

    def __post_init__(self):
        for cls, m in self.masks.items():
            self.masks[cls] = np.asarray(m, dtype=np.float64)


def build_mask_target(label_patch: np.ndarray, space: LabelSpace,
                      taxonomy: Taxonomy) -> MaskTarget:
    """Binary ground truth per annotated class from an integer label patch,
    with children OR-ed back into annotated parents (a tumor voxel is also
    an organ voxel)."""
    vols = {cls: Volume((label_patch == cls).astype(np.uint8), kind="mask")
            for cls in sorted(space.classes)}
    vols = apply_inclusion(vols, taxonomy)
    return MaskTarget(space.dataset_id,
                      {cls: vols[cls].data for cls in sorted(space.classes)})


# ---------------------------------------------------------------------------
# loss


def _bce(p: np.ndarray, m: np.ndarray) -> float:
    q = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-(m * np.log(q) + (1.0 - m) * np.log1p(-q)).mean())


def _dice_loss(p: np.ndarray, m: np.ndarray) -> float:
    num = 2.0 * float((p * m).sum()) + DICE_EPS
    den = float(p.sum()) + float(m.sum()) + DICE_EPS
    return 1.0 - num / den


def masked_loss(probs: dict[int, np.ndarray], target: MaskTarget):
    """Sum of (Dice loss + BCE) over the annotated classes only; classes
    outside the label space contribute exactly zero because they never
    enter the sum. Returns (total, {cls: (dice_loss, bce)})."""
    if not target.masks:
        raise EmptyLabelSpace(f"sample from {target.dataset_id!r} has no classes")
    total = 0.0
    breakdown: dict[int, tuple[float, float]] = {}
    for cls in sorted(target.masks):
        if cls not in probs:
            raise ShapeMismatch(f"no prediction for annotated class {cls}")
        p, m = probs[cls], target.masks[cls]
        if p.shape != m.shape:
            raise ShapeMismatch(f"class {cls}: pred {p.shape} vs mask {m.shape}")
        d, b = _dice_loss(p, m), _bce(p, m)
        breakdown[cls] = (d, b)
        total += d + b
    return total, breakdown


def masked_loss_grad(probs: dict[int, np.ndarray],
                     target: MaskTarget) -> dict[int, np.ndarray]:
    """d(total)/dP_cls for the annotated classes.

    The BCE term differentiates the unclamped cross entropy (the clamp
    only guards the loss value): dividing by the true p(1-p) makes the
    gradient chained through the sigmoid equal its stable from-logits form
    (p - m), so saturated-wrong voxels keep a full-strength signal instead
    of being silenced. The denominator is floored at 1e-300 against
    underflow.
    """
    grads: dict[int, np.ndarray] = {}
    for cls in sorted(target.masks):
        p, m = probs[cls], target.masks[cls]
        n = p.size
        # dice: 1 - (2I+eps)/S with I = sum(pm), S = sum(p)+sum(m)+eps
        i2 = 2.0 * float((p * m).sum()) + DICE_EPS
        s = float(p.sum()) + float(m.sum()) + DICE_EPS
        g_dice = i2 / (s * s) - 2.0 * m / s
        g_bce = (p - m) / (np.maximum(p * (1.0 - p), 1e-300) * n)
        grads[cls] = g_dice + g_bce
    return grads


# ---------------------------------------------------------------------------
# optimizer and schedule


def _adam_state() -> dict:
    return {"m": {}, "v": {}, "t": {}}


def adam_step(state: dict, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float, weight_decay: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """Decoupled-weight-decay Adam over exactly the parameters named in
    ``grads``; anything else keeps parameters *and* moments untouched, so
    classes with structurally zero gradients are skipped entirely."""
    b1, b2 = betas
    for path in sorted(grads):
        g = grads[path]
        p = params[path]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{path}: grad {g.shape} vs param {p.shape}")
        m = state["m"].setdefault(path, np.zeros_like(p))
        v = state["v"].setdefault(path, np.zeros_like(p))
        t = state["t"].get(path, 0) + 1
        state["t"][path] = t
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from lr/warmup_steps to lr, then cosine decay to zero."""
    warm, total = cfg.warmup_steps, cfg.total_steps
    if warm > 0 and step < warm:
        return cfg.lr * (step + 1) / warm
    if total <= warm:
        return cfg.lr
    phase = min(1.0, (step - warm) / (total - warm))
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * phase))


# ---------------------------------------------------------------------------
# the step and the loop


@dataclass
class TrainingDataset:
    """One partially labeled source: its label space and its volumes
    (image, integer label map), already resampled and normalized."""

    space: LabelSpace
    volumes: list[tuple[Volume, LabelVolume]]


def train_step(batch, model: ModelState, cfg: TrainConfig,
               return_grads: bool = False):
    """One optimizer step on a batch of (image patch array, MaskTarget).

    Gradients are summed over samples in batch order (a deterministic
    ordered reduction); only the parameter generators of classes annotated
    somewhere in the batch are updated.
    """
    total: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    dice_scores: dict[int, list[float]] = {}
    for x, target in batch:
        probs, tape = forward_sample(model, x, classes=sorted(target.masks))
        loss, breakdown = masked_loss(probs, target)
        loss_sum += loss
        for cls, (d, _) in breakdown.items():
            dice_scores.setdefault(cls, []).append(1.0 - d)
        gp = masked_loss_grad(probs, target)
        grads = backward_sample(model, tape, gp, cfg.detach_global_feature)
        for k, g in grads.items():
            if k in total:
                total[k] += g
            else:
                total[k] = g
    if not np.isfinite(loss_sum):
        raise DivergedLoss(f"non-finite loss at step {model.step}: {loss_sum}")
    if not model.adam:
        model.adam.update(_adam_state())
    lr = learning_rate(model.step, cfg)
    adam_step(model.adam, model.named_parameters(), total, lr, cfg.weight_decay)
    model.step += 1
    metrics = {
        "step": model.step,
        "lr": lr,
        "loss": loss_sum / len(batch),
        "dice": {cls: float(np.mean(v)) for cls, v in dice_scores.items()},
    }
    return (metrics, total) if return_grads else metrics


def make_batch(datasets: list[TrainingDataset], model: ModelState,
               cfg: TrainConfig, rng: np.random.Generator):
    """Uniform dataset choice, then uniform volume choice, then a
    foreground-biased patch; augmentation applied pairwise."""
    batch = []
    aug_cfg = AugmentConfig(shift=cfg.shift_amplitude)
    for _ in range(cfg.batch_size):
        ds = datasets[rng.integers(len(datasets))]
        img, lab = ds.volumes[rng.integers(len(ds.volumes))]
        pi, pl = sample_patch(img, lab, cfg.patch_size, cfg.fg_ratio, rng,
                              class_balanced=cfg.class_balanced_fg)
        if cfg.augment:
            pi, pl = augment(pi, pl, aug_cfg, rng)
        target = build_mask_target(pl.data.data, ds.space, model.taxonomy)
        batch.append((pi.data.data, target))
    return batch


def train(model: ModelState, datasets: list[TrainingDataset], cfg: TrainConfig,
          rng: np.random.Generator, steps: int | None = None,
          log_every: int = 0, log=print):
    """Run (or resume) the training loop for ``steps`` steps (default: up
    to cfg.total_steps). Returns the per-step metric history."""
    if not model.adam:
        model.adam.update(_adam_state())
    todo = (cfg.total_steps - model.step) if steps is None else steps
    history = []
    for _ in range(max(0, todo)):
        batch = make_batch(datasets, model, cfg, rng)
        metrics = train_step(batch, model, cfg)
        history.append(metrics)
        if log_every and metrics["step"] % log_every == 0:
            log(f"step {metrics['step']:5d}  lr {metrics['lr']:.2e}  "
                f"loss {metrics['loss']:.4f}")
    return history


# ---------------------------------------------------------------------------
# checkpointing (UCKPT1 sectioned binary, bit-exact round trip)

_CKPT_MAGIC = b"UCKPT1\n"
_CKPT_FORMAT = 1
_DTYPE_CODES = {"<f8": 0, "<i8": 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == np.float64:
            code = 0
        elif a.dtype == np.int64:
            code = 1
        else:
            a = a.astype(np.float64)
            code = 0
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", code, a.ndim))
        out.append(struct.pack(f"<{max(a.ndim, 1)}Q", *(a.shape or (0,))))
        out.append(a.astype(_CODE_DTYPES[code]).tobytes())
    return b"".join(out)


def _unpack_arrays(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{max(ndim, 1)}Q", buf, pos)
        pos += 8 * max(ndim, 1)
        shape = tuple(dims[:ndim]) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        dt = np.dtype(_CODE_DTYPES[code])
        arrays[name] = np.frombuffer(buf[pos:pos + n * dt.itemsize],
                                     dtype=dt).reshape(shape).copy()
        pos += n * dt.itemsize
    return arrays


def _sections_bytes(sections: list[tuple[str, bytes]]) -> bytes:
    out = [_CKPT_MAGIC]
    for name, payload in sections:
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def _read_sections(buf: bytes) -> dict[str, bytes]:
    if not buf.startswith(_CKPT_MAGIC):
        raise CheckpointVersion("not a UCKPT1 checkpoint")
    pos = len(_CKPT_MAGIC)
    sections = {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        sections[name] = buf[pos:pos + plen]
        pos += plen
    return sections


def save_checkpoint(model: ModelState, path, rng: np.random.Generator | None = None) -> None:
    meta = {
        "format": _CKPT_FORMAT,
        "taxonomy_version": model.taxonomy.version,
        "taxonomy_digest": model.taxonomy.digest(),
        "embed_source": model.embeddings.source,
        "embed_dim": model.embeddings.dim,
        "backbone_channels": list(model.backbone_cfg.channels),
        "decoder_channels": model.backbone_cfg.decoder_channels,
        "act_slope": model.backbone_cfg.act_slope,
        "step": model.step,
        "config_echo": model.config_echo,
    }
    lpg_arrays = {}
    for cls, m in model.lpg.items():
        lpg_arrays[f"{cls}/W"] = m.weight
        lpg_arrays[f"{cls}/b"] = m.bias
    adam_arrays = {}
    for key in ("m", "v"):
        for path_, a in model.adam.get(key, {}).items():
            adam_arrays[f"{key}/{path_}"] = a
    for path_, t in model.adam.get("t", {}).items():
        adam_arrays[f"t/{path_}"] = np.array(t, dtype=np.int64)
    emb_lines = [f"UEMB1 {model.embeddings.dim} {model.embeddings.source}"]
    for cls in sorted(model.embeddings.vectors):
        vals = " ".join(format(v, ".17g") for v in model.embeddings.vectors[cls])
        emb_lines.append(f"{cls} {vals}")
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("taxonomy", model.taxonomy.to_text().encode()),
        ("embeddings", ("\n".join(emb_lines) + "\n").encode()),
        ("backbone", _pack_arrays(model.backbone)),
        ("lpg", _pack_arrays(lpg_arrays)),
        ("adam", _pack_arrays(adam_arrays)),
        ("rng", json.dumps(rng.bit_generator.state if rng is not None else None,
                           sort_keys=True).encode()),
    ]
    with open(path, "wb") as fh:
        fh.write(_sections_bytes(sections))


def load_checkpoint(path, expected_taxonomy_digest: str | None = None):
    """Restore a ModelState (and the saved training rng state, or None).

    Raises CheckpointVersion on a format mismatch and TaxonomyMismatch when
    the caller pins a different taxonomy digest.
    """
    with open(path, "rb") as fh:
        sections = _read_sections(fh.read())
    meta = json.loads(sections["meta"])
    if meta.get("format") != _CKPT_FORMAT:
        raise CheckpointVersion(f"checkpoint format {meta.get('format')}, "
                                f"expected {_CKPT_FORMAT}")
    if (expected_taxonomy_digest is not None
            and meta["taxonomy_digest"] != expected_taxonomy_digest):
        raise TaxonomyMismatch(
            f"checkpoint taxonomy {meta['taxonomy_digest'][:12]} != "
            f"expected {expected_taxonomy_digest[:12]}")
    taxonomy = replace(parse_template(sections["taxonomy"].decode(), source=str(path),
                                      require_contiguous=False),
                       version=meta["taxonomy_version"])
    emb_lines = sections["embeddings"].decode().splitlines()
    head = emb_lines[0].split()
    vectors = {}
    for line in emb_lines[1:]:
        parts = line.split()
        vectors[int(parts[0])] = np.array([float(p) for p in parts[1:]])
    embeddings = cd.EmbeddingStore(vectors, int(head[1]),
                                   head[2] if len(head) > 2 else "unknown")
    cfg = BackboneConfig(tuple(meta["backbone_channels"]),
                         meta["decoder_channels"], meta["act_slope"])
    backbone = _unpack_arrays(sections["backbone"])
    lpg_arrays = _unpack_arrays(sections["lpg"])
    lpg = {}
    for name in lpg_arrays:
        cls, leaf = name.split("/")
        if leaf == "W":
            lpg[int(cls)] = cd.LpgMap(lpg_arrays[name], lpg_arrays[f"{cls}/b"])
    adam_arrays = _unpack_arrays(sections["adam"])
    adam = _adam_state()
    for name, a in adam_arrays.items():
        key, path_ = name.split("/", 1)
        if key == "t":
            adam["t"][path_] = int(a.ravel()[0])
        else:
            adam[key][path_] = a
    rng_state = json.loads(sections["rng"])
    model = ModelState(taxonomy, embeddings, cfg, backbone, lpg,
                       step=meta["step"], adam=adam,
                       config_echo=meta.get("config_echo", ""))
    return model, rng_state
