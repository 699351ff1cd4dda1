"""Command-line entry point: ``uniseg phantom | train | extend | infer |
eval | embed-onehot``. Logs go to stderr, artifacts to --out; exit code 0
on success, 1 on usage errors, 2 on runtime errors."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields

import numpy as np

from . import clipdriver as cd
from . import continual, inference, metrics, phantom
from . import training as tr
from .backbone import BackboneConfig
from .errors import ConfigError, UnisegError
from .model import init_model, make_window_predictor
from .taxonomy import decompose, load_template, parse_template_rows
from .volume import load_volume, normalize_intensity, resample


def _log(*msg):
    print(*msg, file=sys.stderr)


def read_config(path) -> dict[str, str]:
    """key = value lines, # comments; raw strings, caller validates keys."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}

_TRAIN_KEYS = {
    "lr": float, "weight_decay": float, "warmup_epochs": int,
    "batch_size": int, "patch_size": int, "epochs": int,
    "steps_per_epoch": int, "fg_ratio": float,
    "augment": "bool", "shift_amplitude": float, "class_balanced_fg": "bool",
    "detach_global_feature": "bool",
    "channels": "ints", "decoder_channels": int,
    "window": int, "overlap": float,
}

_PHANTOM_KEYS = {
    "suite": str, "grid": int, "volumes": int, "eval_volumes": int,
    "noise_sigma": float,
}


def _coerce(raw: dict[str, str], allowed: dict, path) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{path}: unknown config key {key!r} "
                              f"(known: {', '.join(sorted(allowed))})")
        typ = allowed[key]
        try:
            if typ == "bool":
                out[key] = _BOOL[value.lower()]
            elif typ == "ints":
                out[key] = tuple(int(v) for v in value.replace(",", " ").split())
            else:
                out[key] = typ(value)
        except (ValueError, KeyError):
            raise ConfigError(f"{path}: bad value {value!r} for {key!r}") from None
    return out


def _echo_config(outdir, raw: dict[str, str], extra: dict) -> str:
    lines = [f"{k} = {v}" for k, v in raw.items()]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(outdir, "config_used.cfg"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def _train_config(cfg_values: dict, seed: int) -> tr.TrainConfig:
    keys = {f.name for f in fields(tr.TrainConfig)}
    kwargs = {k: v for k, v in cfg_values.items() if k in keys}
    return tr.TrainConfig(seed=seed, **kwargs)


def _backbone_config(cfg_values: dict) -> BackboneConfig:
    kwargs = {}
    if "channels" in cfg_values:
        kwargs["channels"] = tuple(cfg_values["channels"])
    if "decoder_channels" in cfg_values:
        kwargs["decoder_channels"] = cfg_values["decoder_channels"]
    return BackboneConfig(**kwargs)


def _window_spec(cfg_values: dict, patch_size: int) -> inference.WindowSpec:
    w = cfg_values.get("window", patch_size)
    return inference.WindowSpec((w, w, w), cfg_values.get("overlap", 0.5))


# ---------------------------------------------------------------------------
# subcommands

_SUITES = {
    "two-dataset": phantom.two_dataset_spec,
    "organs-only": phantom.organs_only_spec,
    "tumor-only": phantom.tumor_only_spec,
    "six-class": phantom.six_class_spec,
}


def cmd_phantom(args) -> int:
    raw = read_config(args.spec) if args.spec else {}
    vals = _coerce(raw, _PHANTOM_KEYS, args.spec or "<flags>")
    suite = vals.get("suite", args.suite)
    if suite not in _SUITES:
        raise ConfigError(f"unknown suite {suite!r} (known: {sorted(_SUITES)})")
    taxonomy, spec = _SUITES[suite](vals.get("grid", args.grid))
    if "noise_sigma" in vals:
        spec.noise_sigma = vals["noise_sigma"]
    n_train = vals.get("volumes", args.volumes)
    n_eval = vals.get("eval_volumes", args.eval_volumes)
    rng = np.random.default_rng(args.seed)

    os.makedirs(args.out, exist_ok=True)
    samples = [phantom.generate(spec, taxonomy, rng) for _ in range(n_train)]
    entries = []
    for ds_id, classes in spec.datasets:
        paths = phantom.write_dataset(args.out, ds_id, samples, which="partial")
        entries.append((ds_id, classes, paths))
    phantom.write_manifest(os.path.join(args.out, "manifest.txt"), entries)

    eval_samples = [phantom.generate(spec, taxonomy, rng) for _ in range(n_eval)]
    full_classes = eval_samples[0].full.label_space.classes
    eval_paths = phantom.write_dataset(args.out, "eval", eval_samples, which="full")
    phantom.write_manifest(os.path.join(args.out, "eval_manifest.txt"),
                           [("eval", full_classes, eval_paths)])
    with open(os.path.join(args.out, "template.tmpl"), "w", encoding="utf-8") as fh:
        fh.write(taxonomy.to_text())
    _echo_config(args.out, raw, {"suite": suite, "seed": args.seed,
                                 "volumes": n_train, "eval_volumes": n_eval})
    _log(f"phantom: wrote {n_train} training and {n_eval} eval volumes to {args.out}")
    return 0


def _load_training_inputs(args):
    taxonomy = load_template(args.template)
    embeddings = cd.load_embeddings(args.embeddings)
    datasets = phantom.load_manifest_datasets(args.manifest, taxonomy,
                                              normalize=normalize_intensity)
    return taxonomy, embeddings, datasets


def cmd_train(args) -> int:
    raw = read_config(args.config) if args.config else {}
    vals = _coerce(raw, _TRAIN_KEYS, args.config or "<flags>")
    taxonomy, embeddings, datasets = _load_training_inputs(args)
    cfg = _train_config(vals, args.seed)
    model = init_model(taxonomy, embeddings, _backbone_config(vals), args.seed)
    os.makedirs(args.out, exist_ok=True)
    model.config_echo = _echo_config(args.out, raw, {"seed": args.seed})
    rng = np.random.default_rng(args.seed + 1)
    _log(f"train: {len(datasets)} datasets, {cfg.total_steps} steps, "
         f"patch {cfg.patch_size}, batch {cfg.batch_size}")
    history = tr.train(model, datasets, cfg, rng, log_every=args.log_every,
                       log=_log)
    with open(os.path.join(args.out, "loss_curve.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for h in history:
            w.writerow([h["step"], f"{h['lr']:.8g}", f"{h['loss']:.8g}"])
    ckpt = os.path.join(args.out, "final.uckpt")
    tr.save_checkpoint(model, ckpt, rng=rng)
    _log(f"train: checkpoint saved to {ckpt}")
    return 0


def _read_plan(path) -> dict[str, str]:
    base = os.path.dirname(os.path.abspath(path))
    plan: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            if key not in ("template", "embeddings", "manifest", "eval_manifest"):
                raise ConfigError(f"{path}:{lineno}: unknown plan key {key!r}")
            plan[key] = os.path.join(base, rest[0])
    for key in ("template", "embeddings", "manifest", "eval_manifest"):
        if key not in plan:
            raise ConfigError(f"{path}: plan is missing the {key!r} entry")
    return plan


def cmd_extend(args) -> int:
    raw = read_config(args.config) if args.config else {}
    vals = _coerce(raw, _TRAIN_KEYS, args.config or "<flags>")
    model, _ = tr.load_checkpoint(args.checkpoint)
    plan_paths = _read_plan(args.plan)
    with open(plan_paths["template"], encoding="utf-8") as fh:
        new_classes = parse_template_rows(fh.read(), plan_paths["template"])
    new_store = cd.load_embeddings(plan_paths["embeddings"])
    extended_tax = model.taxonomy.extend(new_classes)
    datasets = phantom.load_manifest_datasets(plan_paths["manifest"], extended_tax,
                                              normalize=normalize_intensity)
    eval_sets = phantom.load_manifest_datasets(plan_paths["eval_manifest"],
                                               extended_tax,
                                               normalize=normalize_intensity)
    eval_volumes = [(img, lab) for ds in eval_sets for img, lab in ds.volumes]
    plan = continual.ExtensionPlan(
        new_classes, {c.index: new_store.get(c.index) for c in new_classes},
        datasets)
    cfg = _train_config(vals, args.seed)
    spec = _window_spec(vals, cfg.patch_size)
    rng = np.random.default_rng(args.seed + 2)
    os.makedirs(args.out, exist_ok=True)
    model.config_echo = _echo_config(args.out, raw,
                                     {"seed": args.seed, "pseudo": args.pseudo})
    _log(f"extend: +{len(new_classes)} classes, pseudo={args.pseudo}")
    extended, rows, _ = continual.extension_stage(
        model, plan, cfg, eval_volumes, spec, rng, pseudo=args.pseudo,
        freeze_old_heads=args.freeze_old_heads, threads=args.threads,
        log_every=args.log_every, log=_log)
    continual.write_forgetting_report(os.path.join(args.out, "forgetting.csv"), rows)
    ckpt = os.path.join(args.out, "extended.uckpt")
    tr.save_checkpoint(extended, ckpt, rng=rng)
    _log(f"extend: checkpoint saved to {ckpt}")
    return 0


def _read_regions(path) -> dict[int, tuple[int, ...]]:
    """Per-class bounding boxes: ``cls z0 z1 y0 y1 x0 x1`` lines (half-open)."""
    regions: dict[int, tuple[int, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ConfigError(f"{path}:{lineno}: expected 'cls z0 z1 y0 y1 x0 x1'")
            regions[int(parts[0])] = tuple(int(p) for p in parts[1:])
    return regions


def cmd_infer(args) -> int:
    model, _ = tr.load_checkpoint(args.checkpoint)
    img = load_volume(args.image)
    if args.spacing is not None:
        img = resample(img, (args.spacing,) * 3)
    if not args.no_normalize:
        img = normalize_intensity(img)
    spec = inference.WindowSpec((args.window,) * 3, args.overlap)
    post = inference.PostprocConfig(threshold=args.threshold,
                                    split_lateral=args.split_lateral,
                                    keep_largest=frozenset(args.keep_largest or ()),
                                    regions=_read_regions(args.regions)
                                    if args.regions else {})
    ps = inference.predict_volume(img, make_window_predictor(model), spec,
                                  model.taxonomy, post, threads=args.threads)
    inference.write_prediction_set(args.out, ps, spec, post,
                                   checkpoint_path=args.checkpoint,
                                   save_probabilities=args.save_probs)
    _log(f"infer: wrote {len(ps.masks)} class masks + merged map to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = tr.load_checkpoint(args.checkpoint)
    taxonomy = model.taxonomy
    eval_sets = phantom.load_manifest_datasets(args.manifest, taxonomy,
                                               normalize=normalize_intensity)
    spec = inference.WindowSpec((args.window,) * 3, args.overlap)
    rule = metrics.DetectionRule(args.min_voxels)
    os.makedirs(args.out, exist_ok=True)
    classes = taxonomy.indices()
    rows = []
    detect_cases: dict[int, list[tuple[np.ndarray, bool]]] = {}
    case = 0
    for ds in eval_sets:
        for img, lab in ds.volumes:
            probs = inference.sliding_window(img, make_window_predictor(model),
                                             spec, threads=args.threads)
            truth = decompose(lab, taxonomy)
            for cls in classes:
                pred = (probs[cls].data >= args.threshold).astype(np.uint8)
                gt = truth.get(cls)
                gtd = gt.data if gt is not None else np.zeros(img.dims, np.uint8)
                d = metrics.dice(pred, gtd)
                n = metrics.nsd(pred, gtd, args.tolerance, img.spacing)
                rows.append((case, cls, d, n))
                if taxonomy[cls].kind == "tumor":
                    detect_cases.setdefault(cls, []).append((pred, bool(gtd.any())))
            case += 1
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "class", "dice", "nsd"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}"])
        w.writerow([])
        w.writerow(["summary", "class", "mean_dice", "mean_nsd"])
        for cls in classes:
            ds_ = [r[2] for r in rows if r[1] == cls]
            ns_ = [r[3] for r in rows if r[1] == cls]
            w.writerow(["summary", cls, f"{np.mean(ds_):.6f}", f"{np.mean(ns_):.6f}"])
    det_path = os.path.join(args.out, "detection.csv")
    with open(det_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "sensitivity", "specificity", "harmonic_mean"])
        for cls, cases in sorted(detect_cases.items()):
            try:
                s, p, h = metrics.detection_stats(cases, rule)
                w.writerow([cls, f"{s:.6f}", f"{p:.6f}", f"{h:.6f}"])
            except UnisegError as exc:
                w.writerow([cls, "n/a", "n/a", f"skipped: {exc}"])
    _log(f"eval: wrote metrics for {case} cases to {args.out}")
    return 0


def cmd_embed_onehot(args) -> int:
    taxonomy = load_template(args.template)
    store = cd.one_hot_store(taxonomy, dim=args.dim)
    cd.save_embeddings(args.out, store)
    _log(f"embed-onehot: {len(store)} classes, dim {store.dim} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uniseg",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic dataset suite")
    sp.add_argument("--spec", help="key=value spec file (suite, grid, volumes, ...)")
    sp.add_argument("--suite", default="two-dataset", choices=sorted(_SUITES))
    sp.add_argument("--grid", type=int, default=32)
    sp.add_argument("--volumes", type=int, default=6)
    sp.add_argument("--eval-volumes", type=int, default=3)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train on a phantom manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--template", required=True)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--config", help="key=value training config file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("extend", help="continual extension with new classes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--plan", required=True,
                    help="plan file: template/embeddings/manifest/eval_manifest")
    sp.add_argument("--config")
    sp.add_argument("--pseudo", default="hard", choices=["hard", "soft", "none"])
    sp.add_argument("--freeze-old-heads", action="store_true")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_extend)

    sp = sub.add_parser("infer", help="full-volume prediction")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=int, default=96)
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--spacing", type=float, default=None,
                    help="resample to this isotropic spacing first")
    sp.add_argument("--no-normalize", action="store_true")
    sp.add_argument("--split-lateral", action="store_true")
    sp.add_argument("--keep-largest", type=int, nargs="*",
                    help="classes whose non-largest components are removed")
    sp.add_argument("--regions",
                    help="per-class bounding-box file: cls z0 z1 y0 y1 x0 x1")
    sp.add_argument("--save-probs", action="store_true")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="dice/nsd/detection metrics over a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True,
                    help="manifest of fully labeled evaluation volumes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=int, default=96)
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--tolerance", type=float, default=1.0)
    sp.add_argument("--min-voxels", type=int, default=10)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("embed-onehot", help="write a one-hot UEMB1 file")
    sp.add_argument("--template", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dim", type=int, default=None)
    sp.set_defaults(func=cmd_embed_onehot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except UnisegError as exc:
        _log(f"error: {exc}")
        return 2
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
