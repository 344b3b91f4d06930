"""Text-driven multi-domain feature simulation and unified head adaptation.

Simulates target-domain features from labeled source images using nothing but
text descriptions of the targets, then fine-tunes a single segmentation head
that serves every domain without domain ids at inference. Ships a
deterministic toy world + toy joint embedding so the whole pipeline runs and
verifies on a laptop core in minutes.
"""

from .config import (RunConfig, default_config, load_config, save_config,
                     config_digest)
from .core import FeatureMap, LabelMap, LabeledImage, SourceDataset, EvalSplit
from .encoders import EncoderPair, build_prompt_set, build_toy_encoder
from .pipeline import (evaluate, make_toy_data, run_all, run_stage1,
                       run_stage2, stage1_total_loss)
from .selfcheck import run_selfcheck

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "default_config", "load_config", "save_config", "config_digest",
    "FeatureMap", "LabelMap", "LabeledImage", "SourceDataset", "EvalSplit",
    "EncoderPair", "build_prompt_set", "build_toy_encoder",
    "evaluate", "make_toy_data", "run_all", "run_stage1", "run_stage2",
    "stage1_total_loss", "run_selfcheck", "__version__",
]
