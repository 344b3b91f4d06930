"""Shared tensor types and small numeric helpers used across the package."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

# Whole package runs CPU double precision: desk-scale tensors are tiny and the
# verification tolerances (1e-10 and tighter) are only meaningful in fp64.
DTYPE = torch.float64

IGNORE_INDEX = 255

# Floor used when unit-normalizing vectors that may transiently vanish.
NORM_EPS = 1e-12


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from a tuple of hashable parts.

    Stable across processes and platforms (unlike builtin hash()).
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def unit(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalize along dim; zero vectors map to zero rather than NaN."""
    return torch.nn.functional.normalize(v, dim=dim, eps=NORM_EPS)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; raises on zero input."""
    na, nb = a.norm(), b.norm()
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise ValueError("cosine of zero vector is undefined")
    return (a * b).sum() / (na * nb)


@dataclass
class FeatureMap:
    """Spatial grid of d-dimensional feature vectors, shape (h, w, d)."""

    data: torch.Tensor

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be (h, w, d), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite entries")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    def flat(self) -> torch.Tensor:
        """View as (h*w, d)."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass
class LabelMap:
    """Per-pixel integer class labels, shape (h, w), with an ignore sentinel."""

    labels: np.ndarray
    n_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        valid = self.labels != self.ignore_index
        if valid.any() and self.labels[valid].max() >= self.n_classes:
            raise ValueError(
                f"label {int(self.labels[valid].max())} out of range for {self.n_classes} classes"
            )
        if valid.any() and self.labels[valid].min() < 0:
            raise ValueError("negative label")

    @property
    def h(self) -> int:
        return self.labels.shape[0]

    @property
    def w(self) -> int:
        return self.labels.shape[1]

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    def torch_targets(self) -> torch.Tensor:
        """Flattened labels as a long tensor for cross-entropy."""
        return torch.as_tensor(self.flat().astype(np.int64))

    def downsample(self, factor: int) -> "LabelMap":
        """Nearest-neighbor reduction to the feature grid (center sampling).

        Aligns labels with an encoder of the given stride; classes whose
        regions are smaller than a stride cell can disappear, which the
        presence flags downstream are built to handle.
        """
        if factor < 1:
            raise ValueError("factor must be >= 1")
        if self.h % factor or self.w % factor:
            raise ValueError(f"label grid {self.h}x{self.w} not divisible by {factor}")
        off = factor // 2
        return LabelMap(self.labels[off::factor, off::factor].copy(),
                        self.n_classes, self.ignore_index)


@dataclass
class LabeledImage:
    """One image with exact ground-truth labels and a stable identifier."""

    image_id: str
    image: np.ndarray  # (H, W, 3) float64
    labels: LabelMap


@dataclass
class SourceDataset:
    """Training split. The only dataset type the training stages accept."""

    items: list[LabeledImage] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


@dataclass
class EvalSplit:
    """Held-out per-domain evaluation images.

    Deliberately a distinct type from SourceDataset so the training path cannot
    consume it by accident; only the evaluation entry point takes an EvalSplit.
    """

    by_domain: dict[str, list[LabeledImage]] = field(default_factory=dict)

    def n_images(self) -> int:
        return sum(len(v) for v in self.by_domain.values())
