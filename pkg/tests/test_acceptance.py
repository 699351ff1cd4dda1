"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured numbers (run with ``pytest -s tests/test_acceptance.py`` to see
them). The heavy learning analogues live at the end; the whole module is
self-contained and seeded.
"""

import copy
import time

import numpy as np
import pytest

from uniseg import clipdriver as cd
from uniseg import nnops
from uniseg import training as tr
from uniseg.backbone import BackboneConfig
from uniseg.continual import ExtensionPlan, evaluate_dice, extension_stage
from uniseg.inference import (WindowSpec, gaussian_weights, largest_component,
                              merge, predict_volume, sliding_window)
from uniseg.metrics import dice, harmonic_mean, nsd
from uniseg.model import (backward_sample, forward_sample, init_model,
                          make_window_predictor)
from uniseg.phantom import (generate, organs_only_spec, six_class_spec,
                            toy_taxonomy, tumor_only_spec, two_dataset_spec)
from uniseg.taxonomy import ClassDef, LabelSpace, LabelVolume
from uniseg.volume import Volume, normalize_intensity, resample, sample_patch

from test_inference import bfs_largest_oracle
from test_metrics import DETECTION_TABLE, nsd_bruteforce_oracle
from test_volume import trilinear_oracle


def report(name: str, detail: str):
    print(f"\nPASS [{name}] {detail}")


def _rel(a, fd):
    return abs(a - fd) / max(abs(a) + abs(fd), 1e-8)


def _fd_probe(loss_fn, param, idx):
    orig = param[idx]
    h = 1e-6 * max(1.0, abs(orig))
    param[idx] = orig + h
    lp = loss_fn()
    param[idx] = orig - h
    lm = loss_fn()
    param[idx] = orig
    return (lp - lm) / (2.0 * h)


def _check(loss_fn, params: dict, grads: dict, rng, probes=10, tol=1e-4):
    worst = 0.0
    for name in sorted(grads):
        p = params[name]
        for _ in range(probes):
            idx = tuple(rng.integers(s) for s in p.shape)
            fd = _fd_probe(loss_fn, p, idx)
            ag = float(grads[name][idx])
            if abs(ag - fd) < 1e-10:
                continue
            r = _rel(ag, fd)
            worst = max(worst, r)
            assert r < tol, f"{name}{idx}: {ag} vs {fd}"
    return worst


class TestGradientSuite:
    def test_every_differentiable_op(self):
        """Gradient suite: all ops pass central-difference checks at
        rel. error < 1e-4 with >= 10 probes each, in under two minutes."""
        t0 = time.time()
        rng = np.random.default_rng(0)
        worst = 0.0

        # conv3d stride 1 and 2
        for stride in (1, 2):
            x = rng.normal(size=(2, 4, 4, 4))
            w = rng.normal(size=(3, 2, 3, 3, 3))
            b = rng.normal(size=3)
            y, ctx = nnops.conv3d_forward(x, w, b, stride)
            c = rng.normal(size=y.shape)
            gx, gw, gb = nnops.conv3d_backward(ctx, w, c)
            worst = max(worst, _check(
                lambda: float((c * nnops.conv3d_forward(x, w, b, stride)[0]).sum()),
                {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng))

        # activation, downsample/upsample, GAP through the full backbone
        cfg = BackboneConfig(channels=(3, 4, 5), decoder_channels=4)
        import uniseg.backbone as bb
        params = bb.init_backbone(cfg, rng)
        x = rng.normal(size=(8, 8, 8))
        c1 = rng.normal(size=(4, 8, 8, 8))
        c2 = rng.normal(size=(5,))

        def bloss():
            fd_, f_, _ = bb.forward(x, params, cfg)
            return float((c1 * fd_).sum() + (c2 * f_).sum())

        fd_, f_, tape = bb.forward(x, params, cfg)
        grads, _ = bb.backward(tape, params, c1, c2)
        worst = max(worst, _check(bloss, params, grads, rng))

        # LPG affine + CSH head + masked BCE+Dice, end to end
        tax = toy_taxonomy(2, (1,))
        model = init_model(tax, cd.one_hot_store(tax),
                           BackboneConfig(channels=(3, 4), decoder_channels=4),
                           seed=1)
        xs = rng.normal(size=(8, 8, 8))
        target = tr.MaskTarget("t", {
            1: (rng.random((8, 8, 8)) > 0.6).astype(float),
            3: (rng.random((8, 8, 8)) > 0.9).astype(float)})

        def full_loss():
            probs, _ = forward_sample(model, xs, classes=[1, 3])
            return tr.masked_loss(probs, target)[0]

        probs, stape = forward_sample(model, xs, classes=[1, 3])
        gp = tr.masked_loss_grad(probs, target)
        grads = backward_sample(model, stape, gp)
        worst = max(worst, _check(full_loss, model.named_parameters(), grads, rng))

        dt = time.time() - t0
        assert dt < 120.0
        report("gradient-suite",
               f"conv/act/pool/LPG/CSH/loss all < 1e-4 (worst rel err "
               f"{worst:.2e}), {dt:.1f}s")


class TestMaskingTheorem:
    def test_hundred_seeds_bitwise_zero(self):
        """Unannotated classes get bit-level-zero LPG gradients on
        two-dataset phantom batches, for 100 seeds, in under a minute."""
        t0 = time.time()
        tax, spec = two_dataset_spec(grid=16)
        model = init_model(tax, cd.one_hot_store(tax),
                           BackboneConfig(channels=(3, 4), decoder_channels=4),
                           seed=5)
        checked = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            sample = generate(spec, tax, rng)
            img = normalize_intensity(sample.image)
            # one sample per dataset, disjoint label spaces
            batch = []
            for ds_id in ("A", "B"):
                lab = sample.partials[ds_id]
                pi, pl = sample_patch(img, lab, 8, 1.0, rng)
                target = tr.build_mask_target(pl.data.data, lab.label_space, tax)
                batch.append((pi.data.data, target))
            for x, target in batch:
                probs, tape = forward_sample(model, x)  # all classes forwarded
                gp = tr.masked_loss_grad(probs, target)
                for cls in model.classes():
                    if cls not in gp:
                        gp[cls] = np.zeros_like(probs[cls])
                grads = backward_sample(model, tape, gp)
                for cls in model.classes():
                    if cls not in target.masks:
                        assert (grads[f"lpg/{cls}/W"] == 0.0).all()
                        assert (grads[f"lpg/{cls}/b"] == 0.0).all()
                        checked += 1
        dt = time.time() - t0
        assert dt < 60.0
        report("masking-theorem",
               f"{checked} unannotated-class gradients bitwise zero over "
               f"100 seeds, {dt:.1f}s")


class TestMultiLabel:
    def test_sigmoid_not_softmax(self):
        """A voxel can belong to organ and tumor at once; the merge keeps
        both binary masks while the label map shows the tumor."""
        t0 = time.time()
        tax = toy_taxonomy(1, (1,))  # 1 organ, 2 = its tumor
        theta = np.zeros(cd.head_param_count(4))
        theta[-1] = 8.0  # saturate the final bias
        head = cd.HeadParams.from_flat(theta, 4)
        fdat = np.zeros((4, 4, 4, 4))
        p_organ, _ = cd.head_forward(fdat, head)
        p_tumor, _ = cd.head_forward(fdat, head)
        assert (p_organ > 0.5).all() and (p_tumor > 0.5).all()

        masks = {1: Volume((p_organ > 0.5).astype(np.uint8), kind="mask"),
                 2: Volume((p_tumor > 0.5).astype(np.uint8), kind="mask")}
        probs = {1: Volume(p_organ, kind="image"), 2: Volume(p_tumor, kind="image")}
        before = {c: masks[c].data.copy() for c in masks}
        merged = merge(masks, probs, tax)
        assert (merged.data == 2).all()  # tumor tier wins the flat map
        for c in masks:
            assert (masks[c].data == before[c]).all()
        dt = time.time() - t0
        assert dt < 1.0
        report("multi-label", f"P_organ and P_tumor > 0.5 at every voxel, "
               f"merge kept both masks, {dt * 1000:.0f} ms")


class TestExtensionIsolation:
    def test_zero_byte_change(self):
        import hashlib
        tax = toy_taxonomy(3, ())
        model = init_model(tax, cd.one_hot_store(tax, dim=8),
                           BackboneConfig(channels=(3, 4), decoder_channels=4),
                           seed=9)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 8, 8))
        before_pred, _ = forward_sample(model, x)

        def digest(m, keys):
            h = hashlib.sha256()
            named = m.named_parameters()
            for k in sorted(keys):
                h.update(k.encode())
                h.update(named[k].tobytes())
            return h.hexdigest()

        old_keys = sorted(model.named_parameters())
        before_hash = digest(model, old_keys)
        vec = np.zeros(8)
        vec[3] = 1.0
        from uniseg.continual import extend_model
        extended = extend_model(
            model, ExtensionPlan([ClassDef(4, "t", "tumor", 1, "none", 3)],
                                 {4: vec}), rng)
        assert digest(extended, old_keys) == before_hash
        after_pred, _ = forward_sample(extended, x, classes=[1, 2, 3])
        for cls in (1, 2, 3):
            assert (before_pred[cls] == after_pred[cls]).all()
        report("extension-isolation",
               "pre-existing parameter bytes and old-class predictions "
               "bit-identical across extend_model")


class TestMetricOracles:
    def test_dice_nsd_bruteforce_and_detection_table(self):
        rng = np.random.default_rng(11)
        # dice: exact agreement with the counting definition on 1000 pairs
        for _ in range(1000):
            dims = tuple(rng.integers(1, 9, size=3))
            p = (rng.random(dims) > 0.6).astype(np.uint8)
            g = (rng.random(dims) > 0.6).astype(np.uint8)
            inter = int((p & g).sum())
            denom = int(p.sum()) + int(g.sum())
            ref = 1.0 if denom == 0 else 2.0 * inter / denom
            assert dice(p, g) == ref
        # nsd: brute-force all-pairs oracle within 1e-9 on 1000 pairs
        worst = 0.0
        for _ in range(1000):
            dims = tuple(rng.integers(2, 9, size=3))
            p = (rng.random(dims) > 0.65).astype(np.uint8)
            g = (rng.random(dims) > 0.65).astype(np.uint8)
            spacing = tuple(rng.uniform(0.5, 2.0, size=3))
            tol = float(rng.uniform(0.5, 3.0))
            got = nsd(p, g, tol, spacing)
            ref = nsd_bruteforce_oracle(p, g, tol, spacing)
            worst = max(worst, abs(got - ref))
            assert abs(got - ref) < 1e-9
        # detection: every published (sens, spec) pair reproduces its
        # harmonic mean within 0.01
        worst_h = 0.0
        for sens, spec, harm in DETECTION_TABLE:
            got = harmonic_mean(sens / 100.0, spec / 100.0) * 100.0
            worst_h = max(worst_h, abs(got - harm))
            assert abs(got - harm) < 0.01
        report("metric-oracles",
               f"dice exact on 1000 pairs; nsd within {worst:.1e} of the "
               f"O(n^2) oracle on 1000 pairs; {len(DETECTION_TABLE)} published "
               f"detection rows reproduced (worst gap {worst_h:.4f})")


class TestInferenceOracles:
    def test_blending_components_determinism(self):
        rng = np.random.default_rng(12)
        # two-window analytic oracle
        a, b = 0.2, 0.9
        state = {"n": 0}

        def two_vals(patch):
            state["n"] += 1
            return {1: np.full(patch.shape, a if state["n"] == 1 else b)}

        x = Volume(np.zeros((12, 8, 8)), kind="image")
        spec = WindowSpec((8, 8, 8), 0.5)
        out = sliding_window(x, two_vals, spec)[1].data
        w = gaussian_weights((8, 8, 8), 0.125)
        num = np.zeros((12, 8, 8))
        den = np.zeros((12, 8, 8))
        num[0:8] += w * a
        den[0:8] += w
        num[4:12] += w * b
        den[4:12] += w
        gap = np.abs(out - num / den).max()
        assert gap < 1e-6

        # largest component vs BFS on 500 random masks
        for trial in range(500):
            dims = tuple(rng.integers(2, 9, size=3))
            m = (rng.random(dims) > 0.62).astype(np.uint8)
            got = largest_component(Volume(m, kind="mask")).data
            assert (got == bfs_largest_oracle(m)).all(), trial

        # constant model -> exactly constant
        xq = Volume(rng.normal(size=(13, 11, 10)), kind="image")
        outc = sliding_window(xq, lambda p: {1: np.full(p.shape, 0.5)},
                              WindowSpec((4, 4, 4), 0.5))[1].data
        assert (outc == 0.5).all()
        outc2 = sliding_window(xq, lambda p: {1: np.full(p.shape, 0.37)},
                               WindowSpec((4, 4, 4), 0.5))[1].data
        assert np.abs(outc2 - 0.37).max() < 1e-12

        # full pipeline bit-deterministic across runs and thread counts
        tax = toy_taxonomy(2, (1,))
        model = init_model(tax, cd.one_hot_store(tax),
                           BackboneConfig(channels=(3, 4), decoder_channels=4),
                           seed=13)
        xv = Volume(rng.normal(size=(12, 12, 12)), kind="image")
        wspec = WindowSpec((8, 8, 8), 0.5)
        runs = [predict_volume(xv, make_window_predictor(model), wspec,
                               tax, threads=t) for t in (1, 4, 1)]
        for other in runs[1:]:
            assert (runs[0].merged.data == other.merged.data).all()
            for cls in runs[0].probabilities:
                assert (runs[0].probabilities[cls].data
                        == other.probabilities[cls].data).all()
        report("inference-oracles",
               f"two-window blend gap {gap:.1e}; 500 component masks match "
               "BFS; constant aggregation exact; pipeline bit-stable over "
               "thread counts 1/4")


class TestPreprocessing:
    def test_normalize_resample_sampling(self):
        # exact window endpoints
        v = Volume(np.array([[[-175.0, 250.0, -1000.0]]]), kind="image")
        out = normalize_intensity(v).data
        assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == 1.0 and out[0, 0, 2] == 0.0

        # resample against the independent trilinear oracle
        rng = np.random.default_rng(14)
        data = rng.normal(size=(5, 6, 4))
        vol = Volume(data, (2.0, 1.0, 1.5), kind="image")
        res = resample(vol, (1.5, 1.5, 1.5))
        ref = trilinear_oracle(data, (2.0, 1.0, 1.5), (1.5, 1.5, 1.5), res.dims)
        gap = np.abs(res.data - ref).max()
        assert gap < 1e-6

        # fg:bg patch ratio 2:1 within +-0.03 over 1e4 draws (sparse
        # foreground makes the uniform branch a negligible contribution)
        img = Volume(np.zeros((8, 8, 8)), kind="image")
        grid = np.zeros((8, 8, 8), dtype=np.int64)
        grid[4, 4, 4] = 1
        lab = LabelVolume(Volume(grid, kind="mask"), LabelSpace("d", frozenset({1})))
        srng = np.random.default_rng(15)
        hits = 0
        n = 10_000
        for _ in range(n):
            pi, _ = sample_patch(img, lab, (1, 1, 1), 2.0 / 3.0, srng)
            hits += pi.origin == (4, 4, 4)
        rate = hits / n
        assert abs(rate - 2.0 / 3.0) < 0.03
        report("preprocessing",
               f"window endpoints exact; resample oracle gap {gap:.1e}; "
               f"foreground rate {rate:.4f} vs 2/3 over {n} draws")


# ---------------------------------------------------------------------------
# learning analogues (minutes, seeded)


def _two_dataset_world(grid=32, n_train=8, n_eval=3, seed=42):
    tax, spec = two_dataset_spec(grid)
    rng = np.random.default_rng(seed)
    train = [generate(spec, tax, rng) for _ in range(n_train)]
    evals = [generate(spec, tax, rng) for _ in range(n_eval)]
    datasets = []
    for ds_id in ("A", "B"):
        vols = [(normalize_intensity(s.image), s.partials[ds_id]) for s in train]
        datasets.append(tr.TrainingDataset(train[0].partials[ds_id].label_space,
                                           vols))
    eval_set = [(normalize_intensity(s.image), s.full) for s in evals]
    return tax, datasets, eval_set


class TestIntegratedLearning:
    def test_partial_label_training_reaches_dice_090(self):
        """One model, two partially labeled datasets (3 organs / 1 tumor):
        every class reaches Dice >= 0.90 on held-out phantoms."""
        t0 = time.time()
        tax, datasets, eval_set = _two_dataset_world()
        model = init_model(tax, cd.one_hot_store(tax), BackboneConfig(), seed=1)
        cfg = tr.TrainConfig(lr=1.5e-3, batch_size=2, patch_size=16, epochs=50,
                             steps_per_epoch=20, warmup_epochs=3,
                             shift_amplitude=0.05)
        tr.train(model, datasets, cfg, np.random.default_rng(2))
        scores = evaluate_dice(model, eval_set, tax.indices(),
                               WindowSpec((16, 16, 16), 0.5), tax)
        dt = time.time() - t0
        assert dt < 15 * 60
        for cls, d in scores.items():
            assert d >= 0.90, f"class {cls}: dice {d:.3f}"
        report("integrated-learning",
               "held-out dice " + " ".join(f"{c}:{d:.3f}"
                                           for c, d in scores.items())
               + f", {dt / 60:.1f} min")


class TestContinualLearning:
    def test_extension_with_pseudo_labels(self):
        """Step 1 organs, step 2 tumor extension: old-class mean Dice drop
        <= 0.05, strictly smaller than the no-pseudo-label ablation on the
        same seed, and new-class Dice >= 0.85."""
        t0 = time.time()
        world_tax, spec_a = organs_only_spec(grid=32)
        _, spec_b = tumor_only_spec(grid=32)
        old_tax = toy_taxonomy(3, ())
        rng = np.random.default_rng(7)
        train_a = [generate(spec_a, world_tax, rng) for _ in range(6)]
        train_b = [generate(spec_b, world_tax, rng) for _ in range(6)]
        evals = [generate(spec_a, world_tax, rng) for _ in range(3)]
        ds_a = tr.TrainingDataset(
            train_a[0].partials["A"].label_space,
            [(normalize_intensity(s.image), s.partials["A"]) for s in train_a])
        ds_b = tr.TrainingDataset(
            train_b[0].partials["B"].label_space,
            [(normalize_intensity(s.image), s.partials["B"]) for s in train_b])
        eval_set = [(normalize_intensity(s.image), s.full) for s in evals]

        model = init_model(old_tax, cd.one_hot_store(old_tax, dim=8),
                           BackboneConfig(), seed=2)
        cfg1 = tr.TrainConfig(lr=1.5e-3, batch_size=2, patch_size=16, epochs=40,
                              steps_per_epoch=20, warmup_epochs=3,
                              shift_amplitude=0.05)
        tr.train(model, [ds_a], cfg1, np.random.default_rng(3))

        # soft pseudo annotations (the gentler self-distillation reading)
        # anchor the old classes; "none" is the forgetting ablation
        vec = np.zeros(8)
        vec[3] = 1.0
        cfg2 = tr.TrainConfig(lr=3e-4, batch_size=2, patch_size=16, epochs=20,
                              steps_per_epoch=20, warmup_epochs=2,
                              shift_amplitude=0.05)
        outcomes = {}
        for mode in ("soft", "none"):
            start = copy.deepcopy(model)
            plan = ExtensionPlan(
                [ClassDef(4, "tumor of organ a", "tumor", 1, "none", 3)],
                {4: vec}, [ds_b])
            _, rows, _ = extension_stage(start, plan, cfg2, eval_set,
                                         WindowSpec((16, 16, 16), 0.5),
                                         np.random.default_rng(11), pseudo=mode)
            old = [r for r in rows if r.cls in (1, 2, 3)]
            new = [r for r in rows if r.cls == 4][0]
            outcomes[mode] = (float(np.mean([r.dice_before - r.dice_after
                                             for r in old])), new.dice_after)
        drop_pseudo, new_dice = outcomes["soft"]
        drop_ablation, _ = outcomes["none"]
        dt = time.time() - t0
        assert dt < 20 * 60
        assert drop_pseudo <= 0.05, f"old-class drop {drop_pseudo:.4f}"
        assert drop_pseudo < drop_ablation, \
            f"pseudo {drop_pseudo:.4f} !< ablation {drop_ablation:.4f}"
        assert new_dice >= 0.85, f"new-class dice {new_dice:.3f}"
        report("continual-learning",
               f"old-class drop {drop_pseudo:+.4f} (ablation "
               f"{drop_ablation:+.4f}), new-class dice {new_dice:.3f}, "
               f"{dt / 60:.1f} min")


class TestEmbeddingConditioning:
    def test_one_hot_and_structured_both_converge(self):
        """Six classes, one-hot vs structured embeddings: both setups
        converge (Dice >= 0.85 everywhere) and heads stay independent."""
        t0 = time.time()
        tax, spec = six_class_spec(grid=32)
        rng = np.random.default_rng(21)
        train = [generate(spec, tax, rng) for _ in range(8)]
        evals = [generate(spec, tax, rng) for _ in range(2)]
        datasets = []
        for ds_id in ("all",):
            vols = [(normalize_intensity(s.image), s.partials[ds_id])
                    for s in train]
            datasets.append(tr.TrainingDataset(
                train[0].partials[ds_id].label_space, vols))
        eval_set = [(normalize_intensity(s.image), s.full) for s in evals]

        results = {}
        for name, store in (("one-hot", cd.one_hot_store(tax)),
                            ("structured", cd.structured_store(tax))):
            model = init_model(tax, store, BackboneConfig(), seed=4)
            cfg = tr.TrainConfig(lr=1.25e-3, batch_size=2, patch_size=16,
                                 epochs=130, steps_per_epoch=20, warmup_epochs=5,
                                 fg_ratio=0.75, class_balanced_fg=True,
                                 augment=False, detach_global_feature=True)
            tr.train(model, datasets, cfg, np.random.default_rng(5))
            results[name] = evaluate_dice(model, eval_set, tax.indices(),
                                          WindowSpec((16, 16, 16), 0.5), tax)
            # per-class independence holds whatever the encoding
            x = np.random.default_rng(6).normal(size=(16, 16, 16))
            before, _ = forward_sample(model, x)
            model.lpg[1].weight += 0.25
            after, _ = forward_sample(model, x)
            assert not (before[1] == after[1]).all()
            for cls in (2, 3, 4, 5, 6):
                assert (before[cls] == after[cls]).all()
        dt = time.time() - t0
        for name, scores in results.items():
            for cls, d in scores.items():
                assert d >= 0.85, f"{name} class {cls}: dice {d:.3f}"
        report("embedding-conditioning",
               "; ".join(f"{name}: " + " ".join(f"{c}:{d:.2f}"
                                                for c, d in scores.items())
                         for name, scores in results.items())
               + f", {dt / 60:.1f} min")
