"""End-to-end tests of the affinity-refine command line."""

import json
import math

import numpy as np
import pytest

from affinity_refine.main import main
from affinity_refine.tensor_core import LabelMap, labelmap_read_pgm, tensor_read
from tests.helpers.files import write_labels, write_tensor


def _run(capsys, *argv: str) -> tuple[int, dict | None, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    out = captured.out.strip()
    return code, (json.loads(out) if out else None), captured.err


@pytest.fixture
def two_by_two_files(tmp_path, two_by_two_labels, two_by_two_probs):
    probs = write_tensor(tmp_path / "probs.dten", two_by_two_probs)
    labels = write_labels(tmp_path / "labels.pgm", two_by_two_labels)
    conf = write_tensor(tmp_path / "conf.dten", np.ones((2, 2)))
    return probs, labels, conf


# ============================================================================
# Loss commands
# ============================================================================


@pytest.mark.integration
class TestAffinityLossCommand:
    def test_standard_loss_on_two_by_two(self, capsys, two_by_two_files, tmp_path):
        probs, labels, _ = two_by_two_files
        grad = tmp_path / "grad.dten"
        code, out, _ = _run(
            capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels),
            "--mode", "sa", "--kernels", "1", "--grad-out", str(grad),
        )
        assert code == 0
        # float32 storage of 0.9 / 0.1 shifts the value slightly
        assert out["total"] == pytest.approx(6.0 - 1.6 * math.log(9.0), abs=1e-5)
        assert out["per_dilation"]["1"]["counts"] == [2, 0, 4]
        assert out["grad_written_to"] == str(grad)
        assert tensor_read(grad).dims == (2, 2, 2)

    def test_adaptive_with_unit_confidence_matches_standard(self, capsys, two_by_two_files):
        probs, labels, conf = two_by_two_files
        _, sa, _ = _run(capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels), "--mode", "sa", "--kernels", "1")
        _, aa, _ = _run(
            capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels), "--conf", str(conf),
            "--mode", "aa", "--kernels", "1",
        )
        assert aa["total"] == sa["total"]

    def test_confidence_gradient_output(self, capsys, two_by_two_files, tmp_path):
        probs, labels, conf = two_by_two_files
        code, out, _ = _run(
            capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels), "--conf", str(conf),
            "--kernels", "1", "--grad-conf-out", str(tmp_path / "gc.dten"),
        )
        assert code == 0
        assert tensor_read(tmp_path / "gc.dten").dims == (2, 2)
        assert out["grad_conf_written_to"].endswith("gc.dten")

    def test_adaptive_needs_confidence(self, capsys, two_by_two_files):
        probs, labels, _ = two_by_two_files
        code, out, err = _run(capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels), "--mode", "aa")
        assert code == 1
        assert out is None
        assert "--conf" in err

    def test_bad_kernel_flag(self, capsys, two_by_two_files):
        probs, labels, _ = two_by_two_files
        code, _, err = _run(capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels), "--kernels", "3-2")
        assert code == 1
        assert "error" in err

    def test_missing_input_file(self, capsys, tmp_path, two_by_two_files):
        _, labels, _ = two_by_two_files
        code, _, err = _run(capsys, "affinity-loss", "--probs", str(tmp_path / "none.dten"), "--labels", str(labels), "--mode", "sa")
        assert code == 2
        assert "I/O error" in err

    def test_label_out_of_range(self, capsys, tmp_path, two_by_two_files):
        probs, _, _ = two_by_two_files
        labels = write_labels(tmp_path / "bad.pgm", [[0, 7], [1, 1]])
        code, _, _ = _run(capsys, "affinity-loss", "--probs", str(probs), "--labels", str(labels), "--mode", "sa")
        assert code == 1


@pytest.mark.integration
class TestLabelReassignCommands:
    @pytest.fixture
    def lr_files(self, tmp_path):
        embed = write_tensor(tmp_path / "embed.dten", [[[1.0, 0.0], [0.0, 1.0]]])
        labels = write_labels(tmp_path / "labels.pgm", [[0, 1]])
        conf = write_tensor(tmp_path / "conf.dten", [[1.0, 1.0]])
        return embed, labels, conf

    def test_lr_loss(self, capsys, lr_files):
        embed, labels, conf = lr_files
        code, out, _ = _run(
            capsys, "lr-loss", "--embed", str(embed), "--labels", str(labels), "--conf", str(conf),
            "--gamma", "0", "--margin-n", "1.5",
        )
        assert code == 0
        assert out["total"] == pytest.approx(1.0)
        assert (out["e_bg"], out["e_fg"], out["changed"]) == (1, 1, 0)
        assert out["classes"] == [0, 1]

    def test_reassign_writes_map(self, capsys, lr_files, tmp_path):
        embed, labels, conf = lr_files
        code, out, _ = _run(
            capsys, "reassign", "--embed", str(embed), "--labels", str(labels), "--conf", str(conf),
            "--out", str(tmp_path / "re.pgm"),
        )
        assert code == 0
        assert labelmap_read_pgm(tmp_path / "re.pgm").labels.tolist() == [[0, 1]]
        assert out["mean_alpha"] == pytest.approx((2.0 / 3.0) ** 2)

    def test_single_class_is_undefined(self, capsys, tmp_path, lr_files):
        embed, _, conf = lr_files
        labels = write_labels(tmp_path / "one.pgm", [[1, 1]])
        code, _, err = _run(capsys, "lr-loss", "--embed", str(embed), "--labels", str(labels), "--conf", str(conf))
        assert code == 1
        assert "LR loss undefined" in err


@pytest.mark.integration
class TestGradCheckCommand:
    def test_label_reassign_target(self, capsys):
        code, out, _ = _run(capsys, "grad-check", "--target", "lr", "--seed", "7", "--size", "8x8x4")
        assert code == 0
        assert out["passed"] is True
        assert out["max_rel_error"] < 1e-4

    def test_bad_size(self, capsys):
        code, _, _ = _run(capsys, "grad-check", "--target", "lr", "--size", "8x8")
        assert code == 1


# ============================================================================
# Scenes, training, refinement, evaluation
# ============================================================================


@pytest.mark.integration
class TestPipelineCommands:
    def test_synth_train_refine(self, capsys, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"height": 16, "width": 16}), encoding="utf-8")
        code, gen, _ = _run(capsys, "synth", "gen", "--spec", str(spec), "--seed", "4", "--out", str(tmp_path / "scene"))
        assert code == 0 and gen["seed"] == 4

        cfg = tmp_path / "run.json"
        cfg.write_text(
            json.dumps({"train": {"epochs": 2, "steps_per_epoch": 2, "lr_loss_last_epochs": 1, "snapshot_every_epoch": True,
                                  "affinity": {"kernels": [1, 2]}}}),
            encoding="utf-8",
        )
        code, trained, _ = _run(
            capsys, "train", "--config", str(cfg), "--data", str(tmp_path / "scene"), "--out", str(tmp_path / "run")
        )
        assert code == 0
        assert trained["steps"] == 4
        assert 0.0 <= trained["refined_miou"] <= 1.0
        run = tmp_path / "run"
        for name in ("manifest.json", "metrics.csv", "run.json", "refined.pgm", "refined_epoch01.pgm", "refined_epoch02.pgm"):
            assert (run / name).exists(), name

        code, refined, _ = _run(
            capsys, "refine", "--ckpt", str(run), "--in", str(tmp_path / "scene"), "--out", str(tmp_path / "r.pgm")
        )
        assert code == 0
        assert (refined["height"], refined["width"]) == (16, 16)
        # float32 checkpoint weights can only move the map, not the shape
        assert labelmap_read_pgm(tmp_path / "r.pgm").height == 16
        assert "miou" in refined

    def test_train_is_repeatable(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(
            json.dumps({"train": {"epochs": 1, "steps_per_epoch": 3, "lr_loss_last_epochs": 1},
                        "scene": {"height": 16, "width": 16}}),
            encoding="utf-8",
        )
        _, a, _ = _run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "a"))
        _, b, _ = _run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "b"))
        assert a["final"] == b["final"]
        assert (tmp_path / "a" / "head_w.dten").read_bytes() == (tmp_path / "b" / "head_w.dten").read_bytes()

    def test_eval_miou_identical_maps(self, capsys, tmp_path):
        path = write_labels(tmp_path / "m.pgm", [[0, 1, 2], [2, 255, 0]])
        code, out, _ = _run(capsys, "eval", "miou", "--pred", str(path), "--gt", str(path), "--classes", "3")
        assert code == 0
        assert out["miou"] == 1.0

    def test_eval_miou_half_overlap(self, capsys, tmp_path):
        gt = write_labels(tmp_path / "gt.pgm", [[0, 0, 1, 1]])
        pred = write_labels(tmp_path / "pred.pgm", LabelMap.full(1, 4, 0))
        _, out, _ = _run(capsys, "eval", "miou", "--pred", str(pred), "--gt", str(gt), "--classes", "2")
        assert out["miou"] == pytest.approx(0.25)

    def test_bad_config_json(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text("[1, 2]", encoding="utf-8")
        code, _, err = _run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "x"))
        assert code == 1
        assert "JSON object" in err


# ============================================================================
# Benchmarks, experiments, self-test, global flags
# ============================================================================


@pytest.mark.integration
class TestToolCommands:
    def test_bench_small(self, capsys):
        code, out, _ = _run(capsys, "--threads", "1", "bench", "affinity", "--size", "24x24x3", "--kernels", "1-2", "--repeat", "2")
        assert code == 0
        assert out["pairs"] > 0 and out["repeat"] == 2
        assert out["threads"] == 1
        assert out["mean_ms"] >= 0.0

    def test_experiment_smoke(self, capsys, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(
            json.dumps({"train": {"epochs": 1, "steps_per_epoch": 2, "lr_loss_last_epochs": 1, "hidden_channels": 4,
                                  "embed_dim": 4}, "scene": {"height": 16, "width": 16}}),
            encoding="utf-8",
        )
        code, out, _ = _run(capsys, "experiment", "refine", "--config", str(cfg), "--seeds", "1", "--variants", "baseline,full")
        assert code == 0
        assert out["seeds"] == [0]
        assert out["full_vs_baseline"]["seeds"] == 1

    def test_self_test(self, capsys):
        code, out, _ = _run(capsys, "self-test", "--instances", "20")
        assert code == 0
        assert out["passed"] is True

    def test_unknown_flag(self, capsys):
        code, out, err = _run(capsys, "eval", "miou", "--bogus")
        assert code == 1 and out is None
        assert "error" in err

    def test_missing_subcommand(self, capsys):
        code, _, _ = _run(capsys)
        assert code == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "affinity-refine" in capsys.readouterr().out
