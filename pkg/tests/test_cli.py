import json
import os

import numpy as np
import pytest

from uniseg import clipdriver as cd
from uniseg.cli import main, read_config
from uniseg.errors import ConfigError


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def phantom_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "p1"
    code = run(["phantom", "--suite", "two-dataset", "--grid", "16",
                "--volumes", "2", "--eval-volumes", "1",
                "--out", str(out), "--seed", "7"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_run(phantom_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "t1"
    emb = phantom_run / "onehot.uemb"
    assert run(["embed-onehot", "--template", str(phantom_run / "template.tmpl"),
                "--out", str(emb), "--dim", "8"]) == 0
    cfg = phantom_run / "small.cfg"
    cfg.write_text("lr = 2e-3\nbatch_size = 2\npatch_size = 8\n"
                   "epochs = 2\nsteps_per_epoch = 5\nwarmup_epochs = 1\n"
                   "channels = 3 4\ndecoder_channels = 4\naugment = false\n")
    code = run(["train", "--manifest", str(phantom_run / "manifest.txt"),
                "--template", str(phantom_run / "template.tmpl"),
                "--embeddings", str(emb), "--config", str(cfg),
                "--out", str(out), "--seed", "11"])
    assert code == 0
    return out


class TestUsageErrors:
    def test_no_subcommand(self):
        assert run([]) == 1

    def test_missing_required_flag(self):
        assert run(["phantom", "--out", "/tmp/x"]) == 1  # no --seed

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_key = 1\n")
        code = run(["train", "--manifest", "m", "--template", "t",
                    "--embeddings", "e", "--config", str(cfg),
                    "--out", str(tmp_path / "o"), "--seed", "1"])
        assert code == 2

    def test_runtime_error_missing_file(self, tmp_path):
        code = run(["train", "--manifest", str(tmp_path / "nope.txt"),
                    "--template", str(tmp_path / "nope.tmpl"),
                    "--embeddings", str(tmp_path / "nope.uemb"),
                    "--out", str(tmp_path / "o"), "--seed", "1"])
        assert code == 2

    def test_config_parser(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nlr = 0.001\n\nbatch_size = 4\n")
        assert read_config(cfg) == {"lr": "0.001", "batch_size": "4"}
        bad = tmp_path / "bad.cfg"
        bad.write_text("just words\n")
        with pytest.raises(ConfigError):
            read_config(bad)


class TestPhantomCommand:
    def test_outputs_exist(self, phantom_run):
        assert (phantom_run / "manifest.txt").exists()
        assert (phantom_run / "eval_manifest.txt").exists()
        assert (phantom_run / "template.tmpl").exists()
        assert (phantom_run / "config_used.cfg").exists()
        assert (phantom_run / "A" / "vol000_img.uvol").exists()
        assert (phantom_run / "B" / "vol001_lab.uvol").exists()
        assert (phantom_run / "eval" / "vol000_lab.uvol").exists()

    def test_reproducible(self, phantom_run, tmp_path):
        out2 = tmp_path / "p2"
        assert run(["phantom", "--suite", "two-dataset", "--grid", "16",
                    "--volumes", "2", "--eval-volumes", "1",
                    "--out", str(out2), "--seed", "7"]) == 0
        a = (phantom_run / "A" / "vol000_img.uvol").read_bytes()
        b = (out2 / "A" / "vol000_img.uvol").read_bytes()
        assert a == b


class TestTrainCommand:
    def test_outputs(self, trained_run):
        assert (trained_run / "final.uckpt").exists()
        curve = (trained_run / "loss_curve.csv").read_text().splitlines()
        assert curve[0] == "step,lr,loss"
        assert len(curve) == 1 + 10  # 2 epochs x 5 steps

    def test_checkpoint_loads(self, trained_run):
        from uniseg.training import load_checkpoint
        model, rng_state = load_checkpoint(trained_run / "final.uckpt")
        assert model.step == 10
        assert rng_state is not None
        assert "lr = 2e-3" in model.config_echo


class TestInferEvalCommands:
    def test_infer_smoke(self, phantom_run, trained_run, tmp_path):
        out = tmp_path / "i1"
        code = run(["infer", "--checkpoint", str(trained_run / "final.uckpt"),
                    "--image", str(phantom_run / "eval" / "vol000_img.uvol"),
                    "--out", str(out), "--window", "8", "--threads", "2"])
        assert code == 0
        assert (out / "merged.uvol").exists()
        sidecar = json.loads((out / "prediction.json").read_text())
        assert sidecar["checkpoint_sha256"]
        assert sidecar["classes"] == [1, 2, 3, 4]

    def test_infer_with_region_file(self, phantom_run, trained_run, tmp_path):
        regions = tmp_path / "regions.txt"
        regions.write_text("1 0 16 0 16 0 16\n")
        out = tmp_path / "i2"
        code = run(["infer", "--checkpoint", str(trained_run / "final.uckpt"),
                    "--image", str(phantom_run / "eval" / "vol000_img.uvol"),
                    "--out", str(out), "--window", "8",
                    "--regions", str(regions)])
        assert code == 0
        from uniseg.volume import load_volume
        mask = load_volume(out / "class001_mask.uvol")
        assert mask.data[:, :, :].sum() == mask.data[0:16, 0:16, 0:16].sum()

    def test_eval_smoke(self, phantom_run, trained_run, tmp_path):
        out = tmp_path / "e1"
        code = run(["eval", "--checkpoint", str(trained_run / "final.uckpt"),
                    "--manifest", str(phantom_run / "eval_manifest.txt"),
                    "--out", str(out), "--window", "8", "--min-voxels", "5"])
        assert code == 0
        text = (out / "metrics.csv").read_text()
        assert "summary" in text
        assert (out / "detection.csv").exists()


class TestExtendCommand:
    def test_two_step_extend_flow(self, tmp_path):
        """Step 1 trains an organs-only model; step 2 extends it with the
        tumor class from a tumor-only cohort."""
        pa, pb = tmp_path / "pa", tmp_path / "pb"
        assert run(["phantom", "--suite", "organs-only", "--grid", "16",
                    "--volumes", "2", "--eval-volumes", "1",
                    "--out", str(pa), "--seed", "9"]) == 0
        assert run(["phantom", "--suite", "tumor-only", "--grid", "16",
                    "--volumes", "2", "--eval-volumes", "1",
                    "--out", str(pb), "--seed", "10"]) == 0
        # the step-1 world knows only the three organ classes
        tmpl3 = tmp_path / "organs.tmpl"
        full_rows = (pa / "template.tmpl").read_text().splitlines()
        tmpl3.write_text("\n".join(r for r in full_rows
                                   if not r.startswith("4\t")) + "\n")
        emb = tmp_path / "onehot8.uemb"
        assert run(["embed-onehot", "--template", str(tmpl3),
                    "--out", str(emb), "--dim", "8"]) == 0
        cfg = tmp_path / "small.cfg"
        cfg.write_text("lr = 2e-3\nbatch_size = 2\npatch_size = 8\nepochs = 1\n"
                       "steps_per_epoch = 5\nwarmup_epochs = 0\n"
                       "channels = 3 4\ndecoder_channels = 4\naugment = false\n"
                       "window = 8\n")
        t1 = tmp_path / "t1"
        assert run(["train", "--manifest", str(pa / "manifest.txt"),
                    "--template", str(tmpl3), "--embeddings", str(emb),
                    "--config", str(cfg), "--out", str(t1), "--seed", "11"]) == 0

        rows = tmp_path / "new_rows.tmpl"
        rows.write_text("4\ttumor of organ a\ttumor\t1\tnone\t3\n")
        new_emb = tmp_path / "new.uemb"
        cd.save_embeddings(new_emb,
                           cd.EmbeddingStore({4: np.eye(8)[3]}, 8, "one-hot"))
        plan = tmp_path / "add_tumor.plan"
        plan.write_text(f"template {rows}\nembeddings {new_emb}\n"
                        f"manifest {pb / 'manifest.txt'}\n"
                        f"eval_manifest {pb / 'eval_manifest.txt'}\n")
        out = tmp_path / "e1"
        code = run(["extend", "--checkpoint", str(t1 / "final.uckpt"),
                    "--plan", str(plan), "--config", str(cfg),
                    "--out", str(out), "--seed", "13"])
        assert code == 0
        assert (out / "extended.uckpt").exists()
        report = (out / "forgetting.csv").read_text().splitlines()
        assert report[0] == "class,name,dice_before,dice_after,delta"
        assert len(report) == 1 + 4  # 3 old + 1 new

        from uniseg.training import load_checkpoint
        model, _ = load_checkpoint(out / "extended.uckpt")
        assert sorted(model.lpg) == [1, 2, 3, 4]
        assert model.taxonomy.version == 2
