"""Stage orchestration: digest guards, artifact wiring, training invariants."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from textshift import pipeline
from textshift.artifacts import (BankEntry, Checkpoint, StyleBank, load_bank,
                                 load_checkpoint, load_eval_split,
                                 load_manifest, save_bank, save_checkpoint)
from textshift.config import PathsConfig, config_digest, default_config
from textshift.core import EvalSplit
from textshift.pipeline import stage1_total_loss
from textshift.reporting import read_report


def tiny_cfg(root):
    cfg = default_config(root)
    cfg.toyworld = replace(cfg.toyworld, n_train=2, n_eval_per_domain=1)
    cfg.encoder.calibration_images = 4
    cfg.head.pretrain_iterations = 20
    cfg.stage1.steps = 3
    cfg.stage2.iterations = 10
    return cfg.validate()


def paths_under(cfg, root, **overrides):
    """cfg with artifact paths moved to root except the pinned overrides."""
    base = PathsConfig(
        dataset_dir=str(root / "dataset"),
        style_bank=str(root / "style_bank.tsb"),
        baseline_checkpoint=str(root / "baseline.tsc"),
        checkpoint=str(root / "adapted.tsc"),
        report=str(root / "report.tsv"),
        figures_dir=str(root / "figures"),
        stage1_log=str(root / "stage1_log.tsv"),
        stage2_log=str(root / "stage2_log.tsv"),
    )
    return replace(cfg, paths=replace(base, **overrides))


class TestStage1TotalLoss:
    def test_zero_weights(self):
        total = stage1_total_loss((1.0, 2.0, 3.0), (0.0, 0.0, 0.0))
        assert float(total) == 0.0

    def test_unit_weights_sum(self):
        total = stage1_total_loss((1.5, 2.25, 3.0), (1.0, 1.0, 1.0))
        assert abs(float(total) - 6.75) < 1e-15

    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(50)
        for _ in range(10):
            comps = rng.normal(size=3) ** 2
            weights = rng.uniform(0, 2, size=3)
            got = float(stage1_total_loss(tuple(comps), tuple(weights)))
            assert abs(got - float(np.dot(comps, weights))) < 1e-12

    @pytest.mark.parametrize("slot,name", [
        (0, "hierarchical-alignment"),
        (1, "cross-domain-consistency"),
        (2, "segmentation"),
    ])
    def test_non_finite_component_named(self, slot, name):
        comps = [1.0, 1.0, 1.0]
        comps[slot] = float("nan")
        with pytest.raises(ValueError, match=name):
            stage1_total_loss(tuple(comps), (1.0, 1.0, 1.0))

    def test_arity_checked(self):
        with pytest.raises(ValueError, match="3 components"):
            stage1_total_loss((1.0, 2.0), (1.0, 1.0))

    def test_gradient_flows(self):
        comps = [torch.tensor(v, dtype=torch.float64, requires_grad=True)
                 for v in (1.0, 2.0, 3.0)]
        stage1_total_loss(comps, (0.5, 0.0, 2.0)).backward()
        assert float(comps[0].grad) == 0.5
        assert float(comps[1].grad) == 0.0
        assert float(comps[2].grad) == 2.0


class TestMakeToyData:
    def test_create_then_idempotent(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        out = pipeline.make_toy_data(cfg)
        for name in ("manifest.yaml", "train_images.f64", "train_labels.u8",
                     "eval_fog_images.f64"):
            assert (out / name).exists()
        manifest = load_manifest(out)
        assert manifest["config_digest"] == config_digest(cfg, "data")
        assert manifest["separability"]["ratio"] > 1.0
        before = (out / "manifest.yaml").read_bytes()
        assert pipeline.make_toy_data(cfg) == out
        assert (out / "manifest.yaml").read_bytes() == before

    def test_refuses_mismatched_dataset_then_force(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        pipeline.make_toy_data(cfg)
        other = tiny_cfg(tmp_path)
        other.toyworld = replace(other.toyworld, seed=cfg.toyworld.seed + 1)
        with pytest.raises(RuntimeError, match="different config"):
            pipeline.make_toy_data(other)
        out = pipeline.make_toy_data(other, force=True)
        assert load_manifest(out)["config_digest"] == config_digest(other, "data")

    def test_stage2_knobs_do_not_invalidate_dataset(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        pipeline.make_toy_data(cfg)
        later = tiny_cfg(tmp_path)
        later.stage2.iterations = 999
        assert pipeline.make_toy_data(later) == Path(cfg.paths.dataset_dir)


class TestStage1Artifacts:
    def test_bank_covers_every_pair_in_order(self, small_run):
        cfg, bank = small_run["cfg"], small_run["bank"]
        domains = [d.id for d in cfg.domains]
        n_train = cfg.toyworld.n_train
        assert len(bank.entries) == n_train * len(domains)
        got = [(e.image_id, e.domain_id) for e in bank.entries]
        want = [(f"train-{i:04d}", d) for i in range(n_train) for d in domains]
        assert got == want
        assert all(e.status == "ok" for e in bank.entries)
        assert all(e.mu.shape == (cfg.encoder.feature_dim,) for e in bank.entries)

    def test_bank_digest_scope(self, small_run):
        cfg = small_run["cfg"]
        assert small_run["bank"].config_digest == config_digest(cfg, "stage1")
        on_disk = load_bank(cfg.paths.style_bank)
        assert on_disk.config_digest == small_run["bank"].config_digest

    def test_baseline_checkpoint(self, small_run):
        cfg = small_run["cfg"]
        base = load_checkpoint(cfg.paths.baseline_checkpoint)
        assert base.meta["digest_scope"] == "stage1"
        assert base.config_digest == config_digest(cfg, "stage1")
        assert base.rectifier_on is False
        assert set(base.arrays) == {"head_w1", "head_b1", "head_w2", "head_b2"}
        assert base.meta["n_classes"] == len(cfg.classes)
        assert base.meta["upsample"] == cfg.encoder.stride

    def test_stage1_log_rows(self, small_run):
        cfg = small_run["cfg"]
        lines = Path(cfg.paths.stage1_log).read_text().splitlines()
        assert lines[0].split("\t") == ["image_id", "step", "total", "hc", "dc",
                                        "seg", "scene_mean"]
        assert len(lines) - 1 == cfg.toyworld.n_train * cfg.stage1.steps

    def test_report_round_trip(self, small_run):
        cfg, report = small_run["cfg"], small_run["report"]
        back = read_report(cfg.paths.report)
        assert back["mean_miou"] == pytest.approx(report.mean_miou, abs=1e-12)
        assert back["config_digest"] == config_digest(cfg)
        fog = back["per_domain"]["fog"]
        assert fog["domain_miou:-"] == pytest.approx(
            report.per_domain["fog"].miou, abs=1e-12)


class TestStage1Refusals:
    def test_stale_bank_refused(self, small_run, tmp_path):
        cfg = replace(small_run["cfg"], stage1=replace(small_run["cfg"].stage1,
                                                       lambda_hc=2.0))
        with pytest.raises(RuntimeError, match="force"):
            pipeline.run_stage1(cfg)

    def test_dataset_from_other_config_refused(self, small_run, tmp_path):
        src = small_run["cfg"]
        cfg = paths_under(src, tmp_path, dataset_dir=src.paths.dataset_dir)
        cfg = replace(cfg, toyworld=replace(cfg.toyworld, seed=cfg.toyworld.seed + 1))
        with pytest.raises(ValueError, match="make-toy-data"):
            pipeline.run_stage1(cfg)

    def test_unreadable_bank_refused(self, small_run, tmp_path):
        src = small_run["cfg"]
        junk = tmp_path / "style_bank.tsb"
        junk.write_bytes(b"not a container")
        cfg = paths_under(src, tmp_path, dataset_dir=src.paths.dataset_dir,
                          style_bank=str(junk))
        with pytest.raises(RuntimeError, match="unreadable"):
            pipeline.run_stage1(cfg)


class TestStage2:
    def test_adapted_checkpoint_contents(self, small_run):
        cfg, ckpt = small_run["cfg"], small_run["ckpt"]
        assert ckpt.meta["digest_scope"] == "full"
        assert ckpt.config_digest == config_digest(cfg)
        assert ckpt.rectifier_on is True
        assert ckpt.iterations == cfg.stage2.iterations
        assert {"head_w1", "rect_weight", "rect_bias", "rect_beta"} <= set(ckpt.arrays)
        lines = Path(cfg.paths.stage2_log).read_text().splitlines()
        assert lines[0].split("\t") == ["iteration", "loss", "beta"]
        assert len(lines) - 1 == cfg.stage2.iterations

    def test_beta_zero_matches_no_rectifier(self, small_run, tmp_path):
        # a frozen zero gate must be indistinguishable from no rectifier at
        # all: same sampling stream, same features, bitwise-equal head
        src = small_run["cfg"]
        shared = dict(dataset_dir=src.paths.dataset_dir,
                      style_bank=src.paths.style_bank,
                      baseline_checkpoint=src.paths.baseline_checkpoint)
        plain = paths_under(src, tmp_path / "plain", **shared)
        plain = replace(plain, stage2=replace(src.stage2, rectifier=False))
        gated = paths_under(src, tmp_path / "gated", **shared)
        gated = replace(gated, stage2=replace(src.stage2, rectifier=True,
                                              freeze_beta=True, beta_init=0.0))
        a = pipeline.run_stage2(plain)
        b = pipeline.run_stage2(gated)
        assert a.rectifier_on is False and b.rectifier_on is True
        assert float(b.arrays["rect_beta"][0]) == 0.0
        for name in ("head_w1", "head_b1", "head_w2", "head_b2"):
            assert a.arrays[name].tobytes() == b.arrays[name].tobytes()

    def test_bank_from_other_config_refused(self, small_run):
        cfg = replace(small_run["cfg"], stage1=replace(small_run["cfg"].stage1,
                                                       steps=99))
        with pytest.raises(ValueError, match="different config"):
            pipeline.run_stage2(cfg)

    def test_bank_without_usable_entries_refused(self, small_run, tmp_path):
        src = small_run["cfg"]
        cfg = paths_under(src, tmp_path, dataset_dir=src.paths.dataset_dir,
                          baseline_checkpoint=src.paths.baseline_checkpoint)
        rng = np.random.default_rng(51)
        dead = StyleBank(
            feature_dim=src.encoder.feature_dim,
            config_digest=config_digest(src, "stage1"),
            domains=[d.id for d in src.domains],
            entries=[BankEntry("fog", "train-0000",
                               rng.normal(size=src.encoder.feature_dim),
                               np.ones(src.encoder.feature_dim), float("nan"),
                               "failed")],
        )
        save_bank(dead, cfg.paths.style_bank)
        with pytest.raises(RuntimeError, match="no usable entries"):
            pipeline.run_stage2(cfg)

    def test_bank_with_unknown_image_refused(self, small_run, tmp_path):
        src = small_run["cfg"]
        cfg = paths_under(src, tmp_path, dataset_dir=src.paths.dataset_dir,
                          baseline_checkpoint=src.paths.baseline_checkpoint)
        rng = np.random.default_rng(52)
        ghost = StyleBank(
            feature_dim=src.encoder.feature_dim,
            config_digest=config_digest(src, "stage1"),
            domains=[d.id for d in src.domains],
            entries=[BankEntry("fog", "train-9999",
                               rng.normal(size=src.encoder.feature_dim),
                               np.ones(src.encoder.feature_dim), 0.5)],
        )
        save_bank(ghost, cfg.paths.style_bank)
        with pytest.raises(RuntimeError, match="train-9999"):
            pipeline.run_stage2(cfg)


class TestEvaluate:
    def test_single_domain_split(self, small_run, tmp_path):
        cfg, full = small_run["cfg"], small_run["report"]
        split = load_eval_split(cfg.paths.dataset_dir)
        sub = EvalSplit({"fog": split.by_domain["fog"]})
        rep = pipeline.evaluate(cfg, report_path=tmp_path / "fog.tsv",
                                figures=False, eval_split=sub)
        assert list(rep.per_domain) == ["fog"]
        assert rep.mean_miou == rep.per_domain["fog"].miou
        # same checkpoint, same images: identical to the full run's fog score
        assert rep.per_domain["fog"].miou == full.per_domain["fog"].miou

    def test_class_count_mismatch_refused(self, small_run, tmp_path):
        cfg = small_run["cfg"]
        base = load_checkpoint(cfg.paths.checkpoint)
        bad = Checkpoint(base.config_digest, base.iterations, base.rng_state,
                         base.rectifier_on, {**base.meta, "n_classes": 3},
                         base.arrays)
        save_checkpoint(bad, tmp_path / "bad.tsc")
        with pytest.raises(ValueError, match="classes"):
            pipeline.evaluate(cfg, checkpoint_path=tmp_path / "bad.tsc",
                              figures=False)

    def test_foreign_digest_refused(self, small_run, tmp_path):
        cfg = small_run["cfg"]
        base = load_checkpoint(cfg.paths.checkpoint)
        bad = Checkpoint("0" * 64, base.iterations, base.rng_state,
                         base.rectifier_on, dict(base.meta), base.arrays)
        save_checkpoint(bad, tmp_path / "bad.tsc")
        with pytest.raises(ValueError, match="different config"):
            pipeline.evaluate(cfg, checkpoint_path=tmp_path / "bad.tsc",
                              figures=False)

    def test_missing_checkpoint(self, small_run, tmp_path):
        with pytest.raises(FileNotFoundError):
            pipeline.evaluate(small_run["cfg"],
                              checkpoint_path=tmp_path / "nowhere.tsc",
                              figures=False)

    def test_domain_metadata_order_never_reaches_predictions(self, small_run):
        cfg = small_run["cfg"]
        ckpt = load_checkpoint(cfg.paths.checkpoint)
        head = pipeline._head_from_checkpoint(ckpt)
        pair_fwd = pipeline.build_encoder(cfg)
        shuffled = replace(cfg, domains=list(reversed(cfg.domains)))
        pair_rev = pipeline.build_encoder(shuffled)
        split = load_eval_split(cfg.paths.dataset_dir)
        for domain_id in split.by_domain:
            item = split.by_domain[domain_id][0]
            a = pipeline.predict_image(pair_fwd, head, item.image)
            b = pipeline.predict_image(pair_rev, head, item.image)
            assert np.array_equal(a, b)


class TestRunAll:
    def test_summary_and_artifacts(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "all")
        summary = pipeline.run_all(cfg)
        assert set(summary) == {"adapted_mean_miou", "baseline_mean_miou",
                                "gain", "seconds"}
        assert summary["gain"] == summary["adapted_mean_miou"] - summary["baseline_mean_miou"]
        assert summary["seconds"] > 0
        root = tmp_path / "all"
        for rel in ("style_bank.tsb", "baseline.tsc", "adapted.tsc",
                    "report.tsv", "report_baseline.tsv", "stage1_log.tsv",
                    "stage2_log.tsv", "figures/miou_by_domain.png",
                    "figures/per_class_iou.png"):
            assert (root / rel).exists(), rel
        adapted = read_report(root / "report.tsv")
        assert adapted["mean_miou"] == pytest.approx(summary["adapted_mean_miou"],
                                                     abs=1e-12)
