"""Frozen encoder pair: prompts, calibration, pooling, external adapter."""

import numpy as np
import pytest
import torch
import yaml

from textshift.config import EncoderConfig
from textshift.core import unit
from textshift.encoders import (ENV_WEIGHTS_DIR, build_external_encoder,
                                build_prompt_set, build_toy_encoder,
                                check_domain_separability, domain_suffix,
                                normalize_text)
from textshift.toyworld import (DomainShift, ToySpec, apply_domain_shift,
                                default_domain_shifts, generate_calibration)


class TestPromptConstruction:
    def test_the_bus_in_rain(self):
        ps = build_prompt_set(["bus"], "driving under rain")
        assert ps.class_prompts == ["the bus in rain"]
        assert ps.domain_prompt == "driving under rain"

    def test_the_road_in_snow(self):
        ps = build_prompt_set(["road"], "driving in snow")
        assert ps.class_prompts == ["the road in snow"]

    def test_index_alignment(self):
        names = ["road", "car", "sky"]
        ps = build_prompt_set(names, "driving at night")
        assert ps.class_names == names
        assert [p.split(" ")[1] for p in ps.class_prompts] == names

    def test_duplicate_classes_rejected(self):
        with pytest.raises(ValueError):
            build_prompt_set(["road", "road"], "driving in fog")

    def test_empty_class_list_rejected(self):
        with pytest.raises(ValueError):
            build_prompt_set([], "driving in fog")

    def test_pattern_needs_class_slot(self):
        with pytest.raises(ValueError):
            build_prompt_set(["road"], "driving in fog", pattern="just {suffix}")

    def test_custom_pattern(self):
        ps = build_prompt_set(["car"], "driving in fog",
                              pattern="a {cls} seen in {suffix}")
        assert ps.class_prompts == ["a car seen in fog"]

    def test_templates_validated(self):
        with pytest.raises(ValueError):
            build_prompt_set(["car"], "driving in fog", templates=["no slot"])

    def test_domain_suffix_strips_punctuation(self):
        assert domain_suffix("Driving under RAIN.") == "rain"
        with pytest.raises(ValueError):
            domain_suffix("...")

    def test_normalize_text(self):
        assert normalize_text("The Bus, in   Rain!") == "the bus in rain"


class TestToyEncoderText:
    def test_unit_norm_contract(self, toy_setup):
        pair = toy_setup["pair"]
        for prompt in ["driving in dense fog", "the car in rain", "unseen words"]:
            v = pair.encode_text(prompt)
            assert abs(float(v.norm()) - 1.0) < 1e-6

    def test_repeat_calls_bit_identical(self, toy_setup):
        pair = toy_setup["pair"]
        a = pair.encode_text("the road in fog")
        b = pair.encode_text("the road in fog")
        assert torch.equal(a, b)

    def test_distinct_class_tokens_not_collinear(self, toy_setup):
        pair = toy_setup["pair"]
        classes = toy_setup["classes"]
        embs = [pair.encode_text(c) for c in classes]
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                assert float((embs[i] * embs[j]).sum()) < 1.0 - 1e-3

    def test_calibration_targets_domain_centroids(self, toy_setup):
        # each domain description must embed onto the mean pooled vision
        # feature of images shifted into that domain
        pair, spec = toy_setup["pair"], toy_setup["spec"]
        calib = generate_calibration(spec, 8)
        for domain_id, description in toy_setup["domains"]:
            pooled = []
            for item in calib:
                shifted = apply_domain_shift(item.image, domain_id, spec)
                pooled.append(pair.pool_scene(pair.encode_image_features(shifted)))
            centroid = unit(torch.stack(pooled).mean(dim=0))
            emb = pair.encode_text(description)
            assert float((emb * centroid).sum()) >= 0.95

    def test_class_set_shape_and_rows(self, toy_setup):
        pair, classes = toy_setup["pair"], toy_setup["classes"]
        ps = build_prompt_set(classes, "driving at night", domain_id="night")
        ts = pair.encode_class_text(ps)
        assert ts.class_embs.shape == (len(classes), pair.feature_dim)
        assert ts.domain_id == "night"
        norms = ts.class_embs.norm(dim=1)
        assert float((norms - 1.0).abs().max()) < 1e-6

    def test_empty_prompt_rejected(self, toy_setup):
        with pytest.raises(ValueError):
            toy_setup["pair"].encode_text("   ")


class TestToyEncoderVision:
    def test_feature_shape(self, toy_setup):
        pair = toy_setup["pair"]
        img = np.random.default_rng(0).random((32, 32, 3))
        f = pair.encode_image_features(img)
        assert (f.h, f.w, f.d) == (8, 8, pair.feature_dim)

    def test_frozen_bit_identical(self, toy_setup):
        pair = toy_setup["pair"]
        img = np.random.default_rng(1).random((32, 32, 3))
        a = pair.encode_image_features(img).data
        b = pair.encode_image_features(img).data
        assert torch.equal(a, b)

    def test_non_constant_map(self, toy_setup):
        pair = toy_setup["pair"]
        z = pair.encode_image_features(np.zeros((32, 32, 3))).data
        o = pair.encode_image_features(np.ones((32, 32, 3))).data
        assert float((z - o).abs().max()) > 0

    def test_stride_divisibility_enforced(self, toy_setup):
        with pytest.raises(ValueError):
            toy_setup["pair"].encode_image_features(np.zeros((30, 30, 3)))

    def test_non_finite_rejected(self, toy_setup):
        img = np.zeros((32, 32, 3))
        img[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            toy_setup["pair"].encode_image_features(img)


class TestPooling:
    def test_constant_map_pools_to_direction(self, toy_setup):
        v = torch.tensor([3.0, 4.0], dtype=torch.float64)
        data = v.expand(2, 2, 2).clone()
        pooled = toy_setup["pair"].pool(data)
        assert torch.allclose(pooled, v / v.norm(), atol=1e-12)

    def test_two_pixel_hand_case(self, toy_setup):
        data = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
        pooled = toy_setup["pair"].pool(data)
        want = torch.tensor([0.70710678, 0.70710678], dtype=torch.float64)
        assert torch.allclose(pooled, want, atol=1e-6)

    def test_unit_norm(self, toy_setup):
        data = torch.randn(3, 5, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        assert abs(float(toy_setup["pair"].pool(data).norm()) - 1.0) < 1e-6

    def test_rank_checked(self, toy_setup):
        with pytest.raises(ValueError):
            toy_setup["pair"].pool(torch.zeros(4, 4, dtype=torch.float64))


class TestSeparability:
    def test_default_domains_separate(self, toy_setup):
        report = check_domain_separability(
            toy_setup["pair"], toy_setup["spec"],
            [d for d, _ in toy_setup["domains"]], n_probe=8)
        assert report["ratio"] > report["margin"]
        assert set(report["distances"]) == {"fog|night", "fog|rain", "night|rain"}

    def test_coincident_domains_rejected(self):
        shift = DomainShift((1.05, 1.0, 0.95), (0.1, 0.0, -0.1), 0.01)
        spec = ToySpec(n_classes=3, image_size=16, n_train=2, n_eval_per_domain=1,
                       domain_shifts={"a": shift, "b": shift}, seed=3)
        enc = EncoderConfig(feature_dim=8, text_dim=8, stride=4,
                            hidden_channels=8, seed=5, calibration_images=4)
        pair = build_toy_encoder(enc, spec, [("a", "weather a"), ("b", "weather b")],
                                 ["road", "car", "sky"])
        with pytest.raises(ValueError, match="overlap"):
            check_domain_separability(pair, spec, ["a", "b"], n_probe=6)

    def test_needs_two_domains(self, toy_setup):
        with pytest.raises(ValueError):
            check_domain_separability(toy_setup["pair"], toy_setup["spec"], ["fog"])


def write_adapter_dir(root, feature_dim=4, text_dim=4, stride=2, projection=False):
    rng = np.random.default_rng(17)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"feature_dim": feature_dim, "text_dim": text_dim, "stride": stride}
    (root / "adapter.yaml").write_text(yaml.safe_dump(manifest))
    np.save(root / "vision_weight.npy",
            rng.normal(size=(feature_dim, 3, stride, stride)))
    np.save(root / "vision_bias.npy", rng.normal(size=feature_dim))
    (root / "vocab.txt").write_text("road\nfog\nrain\n")
    np.save(root / "token_table.npy", rng.normal(size=(3, text_dim)))
    if projection:
        np.save(root / "projection.npy", rng.normal(size=(feature_dim, text_dim)))
    return root


class TestExternalAdapter:
    def test_missing_env_var_is_descriptive(self, monkeypatch):
        monkeypatch.delenv(ENV_WEIGHTS_DIR, raising=False)
        with pytest.raises(RuntimeError, match=ENV_WEIGHTS_DIR):
            build_external_encoder()

    def test_loads_from_env(self, tmp_path, monkeypatch):
        write_adapter_dir(tmp_path / "w")
        monkeypatch.setenv(ENV_WEIGHTS_DIR, str(tmp_path / "w"))
        pair = build_external_encoder()
        assert pair.descriptor == "external-adapter"
        assert pair.feature_dim == 4

    def test_text_and_vision_roundtrip(self, tmp_path):
        pair = build_external_encoder(write_adapter_dir(tmp_path / "w"))
        v = pair.encode_text("the road in fog")
        assert abs(float(v.norm()) - 1.0) < 1e-6
        f = pair.encode_image_features(np.random.default_rng(0).random((4, 4, 3)))
        assert (f.h, f.w, f.d) == (2, 2, 4)

    def test_missing_file_named_in_error(self, tmp_path):
        root = write_adapter_dir(tmp_path / "w")
        (root / "token_table.npy").unlink()
        with pytest.raises(RuntimeError, match="token table"):
            build_external_encoder(root)

    def test_never_falls_back_silently(self, tmp_path):
        with pytest.raises(RuntimeError):
            build_external_encoder(tmp_path / "does-not-exist")

    def test_channel_count_cross_checked(self, tmp_path):
        root = write_adapter_dir(tmp_path / "w")
        manifest = yaml.safe_load((root / "adapter.yaml").read_text())
        manifest["feature_dim"] = 9
        (root / "adapter.yaml").write_text(yaml.safe_dump(manifest))
        with pytest.raises(RuntimeError, match="declares"):
            build_external_encoder(root)

    def test_projection_bridges_dims(self, tmp_path):
        root = write_adapter_dir(tmp_path / "w", feature_dim=4, text_dim=6,
                                 projection=True)
        pair = build_external_encoder(root)
        v = pair.encode_text("fog")
        assert v.shape == (4,)
        assert abs(float(v.norm()) - 1.0) < 1e-6

    def test_projection_required_when_dims_differ(self, tmp_path):
        root = write_adapter_dir(tmp_path / "w", feature_dim=4, text_dim=6,
                                 projection=False)
        with pytest.raises(RuntimeError, match="projection"):
            build_external_encoder(root)

    def test_unknown_tokens_rejected(self, tmp_path):
        pair = build_external_encoder(write_adapter_dir(tmp_path / "w"))
        with pytest.raises(ValueError, match="vocabulary"):
            pair.encode_text("zzz qqq")
