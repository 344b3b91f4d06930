"""Shared fixtures.

The default-size pipeline takes ~20 s end to end, so module tests that need
trained artifacts share one session-scoped run of a shrunken configuration;
only the acceptance tests run the full default sizes.
"""

from dataclasses import replace

import pytest
import torch

from textshift import pipeline
from textshift.config import EncoderConfig, default_config
from textshift.encoders import build_toy_encoder
from textshift.toyworld import ToySpec, default_domain_shifts

# keep tiny fp64 ops single-threaded: faster at these sizes and removes any
# reduction-order wiggle from the byte-level determinism comparisons
torch.set_num_threads(1)


def shrunken_config(root):
    """Default config with sizes cut down for fast pipeline tests."""
    cfg = default_config(root)
    cfg.toyworld = replace(cfg.toyworld, n_train=6, n_eval_per_domain=3)
    cfg.encoder.calibration_images = 8
    cfg.head.pretrain_iterations = 150
    cfg.stage1.steps = 12
    cfg.stage2.iterations = 80
    return cfg.validate()


@pytest.fixture(scope="session")
def small_cfg(tmp_path_factory):
    return shrunken_config(tmp_path_factory.mktemp("small-run"))


@pytest.fixture(scope="session")
def small_run(small_cfg):
    """One full (shrunken) pipeline pass shared by every test that needs it."""
    pipeline.make_toy_data(small_cfg)
    bank = pipeline.run_stage1(small_cfg)
    ckpt = pipeline.run_stage2(small_cfg)
    report = pipeline.evaluate(small_cfg, figures=False)
    return {"cfg": small_cfg, "bank": bank, "ckpt": ckpt, "report": report}


@pytest.fixture(scope="session")
def toy_setup():
    """Calibrated toy encoder pair over the default three domains."""
    spec = ToySpec(domain_shifts=default_domain_shifts(), n_train=4,
                   n_eval_per_domain=2)
    domains = [("fog", "driving in dense fog"), ("night", "driving at night"),
               ("rain", "driving under heavy rain")]
    classes = ["road", "building", "car", "vegetation"]
    enc = EncoderConfig(calibration_images=8)
    pair = build_toy_encoder(enc, spec, domains, classes)
    return {"spec": spec, "pair": pair, "domains": domains, "classes": classes}
