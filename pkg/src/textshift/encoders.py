"""Frozen vision/text encoder pair with prompt templating.

Two implementations share one interface:

  toy.             A seeded linear convolution stack plus a calibrated text
                   table. The text side is built by calibration: each domain
                   token maps to the renormalized mean pooled vision feature
                   of domain-shifted toy images, so text and vision genuinely
                   share an embedding space without any pretrained weights.
  external-adapter. Loads real weights from the directory named by the
                   ULDA_ENCODER_DIR environment variable; absent weights
                   raise a descriptive error rather than silently degrading.

Everything here is frozen: encoders never train, repeated calls are
bit-identical, and both implementations use mean pooling for the scene
embedding (declared via EncoderPair.descriptor).
"""

from __future__ import annotations

import os
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .alignment import TextEmbeddingSet
from .core import DTYPE, FeatureMap, stable_seed, unit
from .toyworld import ToySpec, apply_domain_shift, generate_calibration

ENV_WEIGHTS_DIR = "ULDA_ENCODER_DIR"

# Small fixed ensemble in the spirit of the usual ImageNet prompt templates.
DEFAULT_TEMPLATES = [
    "a photo of {}.",
    "a photo of the {}.",
    "a bright photo of {}.",
    "a dark photo of {}.",
    "a good photo of {}.",
    "a blurry photo of {}.",
    "a close-up photo of {}.",
    "a cropped photo of {}.",
]

DEFAULT_CLASS_PATTERN = "the {cls} in {suffix}"

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_text(text: str) -> str:
    """Lowercase, punctuation to spaces, collapsed whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def domain_suffix(description: str) -> str:
    """Last whitespace-separated token of a description ("driving under rain" -> "rain")."""
    tokens = normalize_text(description).split()
    if not tokens:
        raise ValueError("domain description must contain at least one word")
    return tokens[-1]


@dataclass
class PromptSet:
    """Class-in-domain prompts for one target domain plus the raw description."""

    domain_id: str
    domain_prompt: str
    class_prompts: list[str]
    class_names: list[str]
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))

    def __post_init__(self):
        if not self.class_prompts:
            raise ValueError("class_prompts must be non-empty")
        if len(set(self.class_prompts)) != len(self.class_prompts):
            raise ValueError("class_prompts contain duplicates")
        if not self.templates:
            raise ValueError("templates must be non-empty")
        for t in self.templates:
            if "{}" not in t:
                raise ValueError(f"template {t!r} has no {{}} slot")

    @property
    def n(self) -> int:
        return len(self.class_prompts)


def build_prompt_set(class_names: list[str], domain_description: str,
                     domain_id: str | None = None,
                     pattern: str = DEFAULT_CLASS_PATTERN,
                     templates: list[str] | None = None) -> PromptSet:
    """Combine class names with the domain description's last word.

    ("bus", "driving under rain") -> "the bus in rain" under the default
    pattern. The domain prompt stays the raw description.
    """
    if not class_names:
        raise ValueError("class_names must be non-empty")
    if len(set(class_names)) != len(class_names):
        raise ValueError("class names must be unique")
    if not domain_description.strip():
        raise ValueError("domain description must be non-empty")
    if "{cls}" not in pattern:
        raise ValueError("pattern must contain a {cls} slot")
    suffix = domain_suffix(domain_description)
    prompts = [pattern.format(cls=name, suffix=suffix) for name in class_names]
    return PromptSet(
        domain_id=domain_id if domain_id is not None else domain_description,
        domain_prompt=domain_description,
        class_prompts=prompts,
        class_names=list(class_names),
        templates=list(templates) if templates is not None else list(DEFAULT_TEMPLATES),
    )


def _split_stride(stride: int) -> tuple[int, int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    for s1 in range(int(np.sqrt(stride)), 0, -1):
        if stride % s1 == 0:
            return s1, stride // s1
    return 1, stride


class ToyVisionEncoder:
    """Two linear convolutions, channels 3 -> hidden -> d, total stride s.

    No nonlinearity between the stages, so the whole map is linear in pixel
    space: per-channel affine image shifts become affine feature shifts,
    which is what makes channel-statistics styles expressive on toy domains.
    """

    def __init__(self, feature_dim: int, stride: int, hidden: int, seed: int):
        if feature_dim < 1 or hidden < 1:
            raise ValueError("feature_dim and hidden must be positive")
        self.feature_dim = feature_dim
        self.stride = stride
        s1, s2 = _split_stride(stride)
        gen = torch.Generator().manual_seed(stable_seed(seed, "toy-vision"))

        def draw(shape, scale):
            t = torch.empty(shape, dtype=DTYPE)
            t.normal_(0.0, scale, generator=gen)
            return t

        self.w1 = draw((hidden, 3, s1, s1), 1.0 / np.sqrt(3 * s1 * s1))
        # zero conv biases keep the mean feature inside the image of pixel
        # space, so per-channel pixel biases can reach (and rotate) it
        self.b1 = torch.zeros(hidden, dtype=DTYPE)
        self.w2 = draw((feature_dim, hidden, s2, s2), 1.0 / np.sqrt(hidden * s2 * s2))
        self.b2 = torch.zeros(feature_dim, dtype=DTYPE)
        self._strides = (s1, s2)

    def encode_features(self, image: np.ndarray) -> FeatureMap:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
        h, w = img.shape[:2]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"image size {h}x{w} not divisible by encoder stride {self.stride}"
            )
        if not np.isfinite(img).all():
            raise ValueError("image contains non-finite values")
        # center on mid-gray so the source mean feature stays small; domain
        # biases then land at a wide angle from the source scene direction
        x = torch.as_tensor(img - 0.5, dtype=DTYPE).permute(2, 0, 1).unsqueeze(0)
        s1, s2 = self._strides
        x = F.conv2d(x, self.w1, self.b1, stride=s1)
        x = F.conv2d(x, self.w2, self.b2, stride=s2)
        return FeatureMap(x.squeeze(0).permute(1, 2, 0).contiguous())


class ToyTextEncoder:
    """Token-table text encoder calibrated against the toy vision encoder.

    Domain tokens return calibration centroids; class tokens return seeded
    random unit vectors; a prompt naming both returns their equal-weight
    blend, renormalized. Prompts matching nothing get a deterministic
    hash-seeded unit vector so unknown text still embeds somewhere fixed.
    """

    def __init__(self, dim: int, seed: int,
                 domain_entries: list[tuple[set[str], torch.Tensor]],
                 class_entries: list[tuple[str, torch.Tensor]]):
        self.dim = dim
        self.seed = seed
        self.domain_entries = domain_entries
        self.class_entries = class_entries

    def _fallback(self, normalized: str) -> torch.Tensor:
        gen = torch.Generator().manual_seed(stable_seed(self.seed, "fallback", normalized))
        v = torch.empty(self.dim, dtype=DTYPE)
        v.normal_(0.0, 1.0, generator=gen)
        return unit(v)

    def encode_text(self, prompt: str) -> torch.Tensor:
        normalized = normalize_text(prompt)
        if not normalized:
            raise ValueError("prompt must be non-empty")
        tokens = set(normalized.split())
        class_hits = [vec for name, vec in self.class_entries
                      if set(name.split()) <= tokens]
        domain_hits = [vec for keys, vec in self.domain_entries
                       if (keys & tokens) or any(" " in k and k in normalized for k in keys)]
        parts = []
        if class_hits:
            parts.append(unit(torch.stack(class_hits).mean(dim=0)))
        if domain_hits:
            parts.append(unit(torch.stack(domain_hits).mean(dim=0)))
        if not parts:
            return self._fallback(normalized)
        return unit(torch.stack(parts).mean(dim=0))


@dataclass
class EncoderPair:
    """Frozen vision + text encoders sharing a d-dimensional embedding space."""

    vision: object
    text: object
    feature_dim: int
    text_dim: int
    descriptor: str
    projection: torch.Tensor | None = None  # (feature_dim, text_dim) when dims differ

    def __post_init__(self):
        if self.feature_dim < 1 or self.text_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.text_dim != self.feature_dim and self.projection is None:
            raise ValueError("text_dim != feature_dim requires a projection matrix")
        if self.projection is not None and tuple(self.projection.shape) != (self.feature_dim, self.text_dim):
            raise ValueError("projection must be (feature_dim, text_dim)")

    def encode_text(self, prompt: str, templates: list[str] | None = None) -> torch.Tensor:
        """Template-averaged unit embedding of a prompt, projected to d dims."""
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        templates = templates if templates is not None else ["{}"]
        if not templates:
            raise ValueError("templates must be non-empty")
        embs = [self.text.encode_text(t.format(prompt)) for t in templates]
        avg = torch.stack(embs).mean(dim=0)
        if self.projection is not None:
            avg = self.projection @ avg
        return unit(avg)

    def encode_class_text(self, prompts: PromptSet) -> TextEmbeddingSet:
        rows = [self.encode_text(p, prompts.templates) for p in prompts.class_prompts]
        domain_emb = self.encode_text(prompts.domain_prompt, prompts.templates)
        return TextEmbeddingSet(torch.stack(rows), domain_emb, prompts.domain_id)

    def encode_image_features(self, image: np.ndarray) -> FeatureMap:
        return self.vision.encode_features(image)

    def pool(self, data: torch.Tensor) -> torch.Tensor:
        """Mean over spatial positions, renormalized; differentiable."""
        if data.ndim != 3:
            raise ValueError(f"expected (h, w, d) features, got shape {tuple(data.shape)}")
        return unit(data.reshape(-1, data.shape[-1]).mean(dim=0))

    def pool_scene(self, features: FeatureMap) -> torch.Tensor:
        return self.pool(features.data)

    @property
    def stride(self) -> int:
        return self.vision.stride


def build_toy_encoder(cfg, toy_spec: ToySpec, domains: list[tuple[str, str]],
                      class_names: list[str]) -> EncoderPair:
    """Construct and calibrate the toy encoder pair.

    cfg needs feature_dim, text_dim, stride, hidden_channels, seed and
    calibration_images. domains is a list of (domain_id, description); each
    id must have a registered shift in toy_spec so calibration can render
    shifted images.
    """
    if cfg.text_dim != cfg.feature_dim:
        raise ValueError("toy encoder requires text_dim == feature_dim")
    if not domains:
        raise ValueError("need at least one target domain to calibrate")
    vision = ToyVisionEncoder(cfg.feature_dim, cfg.stride, cfg.hidden_channels, cfg.seed)
    pooled_mean = lambda data: unit(data.reshape(-1, data.shape[-1]).mean(dim=0))

    calib = generate_calibration(toy_spec, cfg.calibration_images)
    domain_entries = []
    for domain_id, description in domains:
        if domain_id not in toy_spec.domain_shifts:
            raise ValueError(f"domain {domain_id!r} has no shift in the toy spec")
        vecs = []
        for item in calib:
            shifted = apply_domain_shift(item.image, domain_id, toy_spec)
            vecs.append(pooled_mean(vision.encode_features(shifted).data))
        centroid = unit(torch.stack(vecs).mean(dim=0))
        keys = {normalize_text(domain_id), domain_suffix(description),
                normalize_text(description)}
        domain_entries.append((keys, centroid))

    class_entries = []
    for name in class_names:
        gen = torch.Generator().manual_seed(stable_seed(cfg.seed, "toy-class", name))
        v = torch.empty(cfg.feature_dim, dtype=DTYPE)
        v.normal_(0.0, 1.0, generator=gen)
        class_entries.append((normalize_text(name), unit(v)))

    text = ToyTextEncoder(cfg.feature_dim, cfg.seed, domain_entries, class_entries)
    return EncoderPair(vision, text, cfg.feature_dim, cfg.feature_dim, "toy")


class _AdapterVision:
    """Single-patch convolution loaded from an adapter weight directory."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int):
        self.weight = torch.as_tensor(weight, dtype=DTYPE)
        self.bias = torch.as_tensor(bias, dtype=DTYPE)
        if self.weight.ndim != 4:
            raise ValueError("vision weight must be (d, channels, k, k)")
        self.stride = stride
        self.feature_dim = self.weight.shape[0]

    def encode_features(self, image: np.ndarray) -> FeatureMap:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != self.weight.shape[1]:
            raise ValueError(
                f"expected (H, W, {self.weight.shape[1]}) image, got shape {img.shape}"
            )
        if img.shape[0] % self.stride or img.shape[1] % self.stride:
            raise ValueError(
                f"image size {img.shape[0]}x{img.shape[1]} not divisible by stride {self.stride}"
            )
        x = torch.as_tensor(img, dtype=DTYPE).permute(2, 0, 1).unsqueeze(0)
        x = F.conv2d(x, self.weight, self.bias, stride=self.stride)
        return FeatureMap(x.squeeze(0).permute(1, 2, 0).contiguous())


class _AdapterText:
    """Bag-of-tokens lookup into a pretrained token table."""

    def __init__(self, vocab: list[str], table: np.ndarray):
        if len(vocab) != table.shape[0]:
            raise ValueError("vocab length does not match token table rows")
        self.index = {tok: i for i, tok in enumerate(vocab)}
        self.table = torch.as_tensor(table, dtype=DTYPE)

    def encode_text(self, prompt: str) -> torch.Tensor:
        normalized = normalize_text(prompt)
        if not normalized:
            raise ValueError("prompt must be non-empty")
        rows = [self.index[t] for t in normalized.split() if t in self.index]
        if not rows:
            raise ValueError(
                f"no tokens of {prompt!r} appear in the adapter vocabulary"
            )
        return unit(self.table[rows].mean(dim=0))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise RuntimeError(
            f"external encoder adapter is missing {what} at {path}; "
            f"point {ENV_WEIGHTS_DIR} at a directory with adapter.yaml, "
            "vision_weight.npy, vision_bias.npy, vocab.txt and token_table.npy"
        )
    return path


def build_external_encoder(weights_dir: str | os.PathLike | None = None) -> EncoderPair:
    """Load a real encoder pair from ULDA_ENCODER_DIR (or an explicit path).

    The directory must contain adapter.yaml (feature_dim, text_dim, stride),
    the vision patch weights, the token vocabulary and table, and, when
    text_dim differs from feature_dim, a projection.npy mapping text
    embeddings into feature space. Anything missing is a hard error; this
    never falls back to the toy encoder.
    """
    if weights_dir is None:
        weights_dir = os.environ.get(ENV_WEIGHTS_DIR)
        if not weights_dir:
            raise RuntimeError(
                f"environment variable {ENV_WEIGHTS_DIR} is not set; it must "
                "name the directory holding the external encoder weights"
            )
    root = Path(weights_dir)
    _require(root, "its weight directory")
    manifest = yaml.safe_load(_require(root / "adapter.yaml", "adapter.yaml").read_text())
    try:
        feature_dim = int(manifest["feature_dim"])
        text_dim = int(manifest["text_dim"])
        stride = int(manifest["stride"])
    except (KeyError, TypeError) as exc:
        raise RuntimeError(f"adapter.yaml is missing required key: {exc}") from exc
    vision = _AdapterVision(
        np.load(_require(root / "vision_weight.npy", "vision weights")),
        np.load(_require(root / "vision_bias.npy", "vision bias")),
        stride,
    )
    if vision.feature_dim != feature_dim:
        raise RuntimeError(
            f"vision weights produce {vision.feature_dim} channels, "
            f"adapter.yaml declares {feature_dim}"
        )
    vocab = _require(root / "vocab.txt", "token vocabulary").read_text().split("\n")
    vocab = [v for v in vocab if v.strip()]
    text = _AdapterText(vocab, np.load(_require(root / "token_table.npy", "token table")))
    projection = None
    if text_dim != feature_dim:
        projection = torch.as_tensor(
            np.load(_require(root / "projection.npy", "text projection")), dtype=DTYPE)
    return EncoderPair(vision, text, feature_dim, text_dim, "external-adapter", projection)


def check_domain_separability(pair: EncoderPair, toy_spec: ToySpec,
                              domain_ids: list[str], n_probe: int = 16,
                              margin: float = 3.0) -> dict:
    """Verify pooled embeddings of shifted images separate the domains.

    For each domain, pool features of n_probe shifted calibration images;
    require every pairwise centroid distance to exceed margin times the
    largest within-domain spread (RMS distance to centroid). Raises
    ValueError when domains are too entangled for alignment to target them.
    """
    if len(domain_ids) < 2:
        raise ValueError("separability needs at least two domains")
    probe = generate_calibration(toy_spec, n_probe)
    centroids, spreads = {}, {}
    for domain_id in domain_ids:
        vecs = torch.stack([
            pair.pool_scene(pair.encode_image_features(
                apply_domain_shift(item.image, domain_id, toy_spec)))
            for item in probe
        ])
        center = vecs.mean(dim=0)
        centroids[domain_id] = center
        spreads[domain_id] = float(((vecs - center) ** 2).sum(dim=1).mean().sqrt())
    report = {"spreads": spreads, "distances": {}, "margin": margin}
    worst = float("inf")
    max_spread = max(spreads.values())
    for i, a in enumerate(domain_ids):
        for b in domain_ids[i + 1:]:
            dist = float((centroids[a] - centroids[b]).norm())
            report["distances"][f"{a}|{b}"] = dist
            worst = min(worst, dist)
    report["min_distance"] = worst
    report["max_spread"] = max_spread
    report["ratio"] = worst / max_spread if max_spread > 0 else float("inf")
    if worst <= margin * max_spread:
        raise ValueError(
            f"domain embeddings overlap: min centroid distance {worst:.4f} <= "
            f"{margin} x max within-domain spread {max_spread:.4f}"
        )
    return report
