import json
from pathlib import Path

import numpy as np
import pytest

import ssm_lab
import tensor_autodiff
from analysis import read_pgm
from checkpoint import load_checkpoint
from data import Dataset, save_idx

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """
backbone.channels = 4,8
ssm.num_heads = 4
ssm.num_classes = 2
train.epochs = {epochs}
train.milestones =
train.batch_size = 16
train.augment_pad = 1
data.source = synthetic
data.synthetic_per_class = 16
data.synthetic_test_per_class = 8
data.image_size = 8
precision = 64
"""


# untrained model on label-independent noise images, 10 balanced classes
CHANCE = """
backbone.channels = 4,8
ssm.num_heads = 4
ssm.num_classes = 10
train.epochs = 0
train.milestones =
data.source = idx
data.train_images = {root}/train-images.idx
data.train_labels = {root}/train-labels.idx
data.test_images = {root}/test-images.idx
data.test_labels = {root}/test-labels.idx
precision = 64
"""


def tiny_config(tmp_path, epochs=3, name="tiny.cfg"):
    path = tmp_path / name
    path.write_text(TINY.format(epochs=epochs))
    return path


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    config = tiny_config(root)
    assert ssm_lab.main(["train", "--config", str(config), "--out", str(root / "run"), "--quiet"]) == 0
    return config, root / "run"


class TestTrain:
    def test_artifacts(self, trained):
        _, run = trained
        for name in ("metrics.jsonl", "checkpoint_last.ckpt", "checkpoint_best.ckpt", "checkpoint_final.ckpt"):
            assert (run / name).exists()
        records = read_jsonl(run / "metrics.jsonl")
        assert [r["epoch"] for r in records] == [0, 1, 2]
        assert all(len(r["eval"]["head_accuracies"]) == 4 for r in records)
        final = load_checkpoint(run / "checkpoint_final.ckpt")
        assert final.epoch == 3
        assert final.input_shape == (1, 8, 8)
        assert final.config["ssm.num_heads"] == "4"

    def test_same_seed_same_metrics(self, trained, tmp_path):
        config, run = trained
        assert ssm_lab.main(["train", "--config", str(config), "--out", str(tmp_path / "again"), "--quiet"]) == 0
        assert (tmp_path / "again" / "metrics.jsonl").read_text() == (run / "metrics.jsonl").read_text()

    def test_resume_matches_uninterrupted_run(self, trained, tmp_path):
        config, run = trained
        out = tmp_path / "resumed"
        short = tiny_config(tmp_path, epochs=1, name="short.cfg")
        assert ssm_lab.main(["train", "--config", str(short), "--out", str(out), "--quiet"]) == 0
        assert ssm_lab.main(["train", "--config", str(config), "--out", str(out), "--quiet",
                             "--resume", str(out / "checkpoint_last.ckpt")]) == 0

        assert (out / "metrics.jsonl").read_text() == (run / "metrics.jsonl").read_text()
        expected = load_checkpoint(run / "checkpoint_final.ckpt").tensors
        resumed = load_checkpoint(out / "checkpoint_final.ckpt").tensors
        assert all(np.array_equal(resumed[k], v) for k, v in expected.items())

    def test_resume_rejects_a_different_model(self, trained, tmp_path):
        _, run = trained
        other = tmp_path / "other.cfg"
        other.write_text(TINY.format(epochs=3).replace("ssm.num_heads = 4", "ssm.num_heads = 2"))
        code = ssm_lab.main(["train", "--config", str(other), "--out", str(tmp_path / "x"), "--quiet",
                             "--resume", str(run / "checkpoint_last.ckpt")])
        assert code == 4

    def test_indivisible_width_fails_before_any_output(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("backbone.channels = 32,64,250\n")
        out = tmp_path / "never"
        assert ssm_lab.main(["train", "--config", str(bad), "--out", str(out), "--quiet"]) == 2
        assert "divisible" in capsys.readouterr().out
        assert not out.exists()

    def test_negative_seed_is_a_config_error(self, tmp_path, capsys):
        out = tmp_path / "never"
        code = ssm_lab.main(["train", "--config", str(tiny_config(tmp_path)), "--out", str(out), "--quiet",
                             "--seed", "-1"])
        assert code == 2
        assert "train.seed" in capsys.readouterr().out
        assert not out.exists()

    def test_unknown_key(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("train.speed = 3\n")
        assert ssm_lab.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_idx_files(self, tmp_path):
        cfg = tmp_path / "idx.cfg"
        cfg.write_text("data.source = idx\n" + "".join(
            f"data.{k} = {tmp_path / k}\n" for k in ("train_images", "train_labels", "test_images", "test_labels")))
        assert ssm_lab.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


class TestEvaluationCommands:
    def test_eval_is_repeatable(self, trained, tmp_path):
        _, run = trained
        args = ["eval", "--checkpoint", str(run / "checkpoint_final.ckpt"), "--out", str(tmp_path)]
        assert ssm_lab.main(args) == 0
        assert ssm_lab.main(args) == 0
        first, second = read_jsonl(tmp_path / "eval.jsonl")
        assert first == second
        assert len(first["head_accuracies"]) == 4
        assert first["count"] == 16

    def test_eval_matches_training_log(self, trained, tmp_path):
        _, run = trained
        assert ssm_lab.main(["eval", "--checkpoint", str(run / "checkpoint_final.ckpt"), "--out", str(tmp_path)]) == 0
        last = read_jsonl(run / "metrics.jsonl")[-1]["eval"]
        (record,) = read_jsonl(tmp_path / "eval.jsonl")
        assert record["combined_accuracy"] == last["combined_accuracy"]
        assert record["head_accuracies"] == last["head_accuracies"]

    def test_eval_report_defaults_to_the_run_folder(self, trained):
        _, run = trained
        ckpt = str(run / "checkpoint_final.ckpt")
        assert ssm_lab.main(["eval", "--checkpoint", ckpt]) == 0
        assert read_jsonl(run / "eval.jsonl")[-1]["checkpoint"] == ckpt

    def test_fresh_model_scores_at_chance(self, tmp_path):
        rng = np.random.default_rng(7)
        for split, count in (("train", 200), ("test", 3000)):
            labels = rng.permutation(np.arange(count) % 10)
            images = rng.random((count, 1, 8, 8))
            save_idx(Dataset(images, labels, 10, split=split),
                     tmp_path / f"{split}-images.idx", tmp_path / f"{split}-labels.idx")
        cfg = tmp_path / "fresh.cfg"
        cfg.write_text(CHANCE.format(root=tmp_path))
        assert ssm_lab.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--quiet"]) == 0
        assert ssm_lab.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint_final.ckpt"),
                             "--out", str(tmp_path)]) == 0

        (record,) = read_jsonl(tmp_path / "eval.jsonl")
        assert record["count"] == 3000
        for accuracy in [record["combined_accuracy"], *record["head_accuracies"]]:
            assert abs(accuracy - 0.10) <= 0.03

    def test_missing_checkpoint(self, tmp_path):
        assert ssm_lab.main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt")]) == 4

    def test_gradcam_files(self, trained, tmp_path):
        _, run = trained
        out = tmp_path / "cams"
        args = ["gradcam", "--checkpoint", str(run / "checkpoint_final.ckpt"), "--image", "2", "--out", str(out)]
        assert ssm_lab.main(args) == 0
        files = sorted(p.name for p in out.iterdir())
        assert len(files) == 5
        assert all(read_pgm(out / name).shape == (8, 8) for name in files)
        snapshot = {name: (out / name).read_bytes() for name in files}
        assert ssm_lab.main(args) == 0
        assert {name: (out / name).read_bytes() for name in files} == snapshot

    def test_gradcam_single_head(self, trained, tmp_path):
        _, run = trained
        args = ["gradcam", "--checkpoint", str(run / "checkpoint_final.ckpt"), "--head", "3", "--class", "1",
                "--out", str(tmp_path)]
        assert ssm_lab.main(args) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["image0_class1_head3.pgm", "image0_class1_input.pgm"]

    def test_gradcam_head_out_of_range(self, trained, tmp_path):
        _, run = trained
        args = ["gradcam", "--checkpoint", str(run / "checkpoint_final.ckpt"), "--head", "5", "--out", str(tmp_path)]
        assert ssm_lab.main(args) == 1

    def test_self_ensemble(self, trained, tmp_path):
        _, run = trained
        ckpt = str(run / "checkpoint_final.ckpt")
        assert ssm_lab.main(["ensemble", "--checkpoint", ckpt, "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
        assert ssm_lab.main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
        (ensemble,) = read_jsonl(tmp_path / "ensemble.jsonl")
        (solo,) = read_jsonl(tmp_path / "eval.jsonl")
        assert ensemble["ensemble_accuracy"] == solo["combined_accuracy"]
        assert [m["accuracy"] for m in ensemble["members"]] == [solo["combined_accuracy"]] * 2

    def test_two_seed_ensemble_beats_the_weaker_member(self, trained, tmp_path):
        config, run = trained
        other = tmp_path / "seed1"
        assert ssm_lab.main(["train", "--config", str(config), "--out", str(other), "--seed", "1", "--quiet"]) == 0
        assert ssm_lab.main(["ensemble", "--checkpoint", str(run / "checkpoint_final.ckpt"),
                             "--checkpoint", str(other / "checkpoint_final.ckpt"), "--out", str(tmp_path)]) == 0

        (record,) = read_jsonl(tmp_path / "ensemble.jsonl")
        accuracies = [m["accuracy"] for m in record["members"]]
        assert record["ensemble_accuracy"] >= min(accuracies)
        assert [m["name"] for m in record["members"]] == ["run/checkpoint_final.ckpt",
                                                          "seed1/checkpoint_final.ckpt"]

    def test_ensemble_needs_two_members(self, trained):
        _, run = trained
        assert ssm_lab.main(["ensemble", "--checkpoint", str(run / "checkpoint_final.ckpt")]) == 1


class TestParams:
    def test_imagenet_sizes(self, tmp_path, capsys):
        code = ssm_lab.main(["params", "--config", str(CONFIGS / "imagenet_params.cfg"), "--out", str(tmp_path)])
        assert code == 0
        rows = {r["classifier"]: r for r in read_jsonl(tmp_path / "params.jsonl")}
        assert rows["1FC"]["head_params"] == 2_049_000
        assert rows["2FC"]["delta_vs_1fc"] == 2_049_000
        assert rows["SSM (H=4)"]["delta_vs_1fc"] == 3_081_144
        assert 3_075_000 <= rows["SSM (H=4)"]["delta_vs_1fc"] <= 3_086_000
        assert "3,081,144" in capsys.readouterr().out

    def test_single_head_without_bn_costs_nothing(self, tmp_path):
        cfg = tmp_path / "one.cfg"
        cfg.write_text("backbone.channels = 8,16\nssm.num_heads = 1\n")
        assert ssm_lab.main(["params", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        rows = {r["classifier"]: r for r in read_jsonl(tmp_path / "params.jsonl")}
        assert rows["SSM (H=1, no BN)"]["delta_vs_1fc"] == 0


class TestGradcheck:
    def test_every_check_passes(self, tmp_path, capsys):
        assert ssm_lab.main(["gradcheck", "--out", str(tmp_path)]) == 0
        records = read_jsonl(tmp_path / "gradcheck.jsonl")
        assert [r["check"] for r in records] == list(ssm_lab.GRADCHECKS)
        assert all(r["passed"] and r["max_relative_error"] < 1e-4 for r in records)
        printed = capsys.readouterr().out
        assert all(name in printed for name in ssm_lab.GRADCHECKS)

    def test_broken_backward_rule_is_caught(self, monkeypatch, tmp_path):
        def doubled(g, inputs, out, **params):
            return (np.where(inputs[0] > 0, 2.0 * g, 0.0),)

        monkeypatch.setitem(tensor_autodiff.BACKWARD_RULES, "relu", doubled)
        assert ssm_lab.main(["gradcheck", "--out", str(tmp_path)]) == 1
        failed = {r["check"] for r in read_jsonl(tmp_path / "gradcheck.jsonl") if not r["passed"]}
        assert "relu" in failed


def test_thread_cap_must_be_a_positive_integer(monkeypatch, tmp_path):
    monkeypatch.setenv("SSM_LAB_THREADS", "none")
    assert ssm_lab.main(["params", "--out", str(tmp_path)]) == 2
