"""Shared segmentation head, its training loss, and evaluation metrics.

One head serves every domain; nothing in this module takes a domain id. The
head is a small per-pixel MLP on encoder features followed by nearest-neighbor
upsampling back to image resolution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import DTYPE, FeatureMap, LabelMap, as_tensor


@dataclass
class SegHead:
    """Per-pixel two-layer classifier: d -> hidden (ReLU) -> n_classes."""

    w1: torch.Tensor  # (hidden, d)
    b1: torch.Tensor  # (hidden,)
    w2: torch.Tensor  # (n_classes, hidden)
    b2: torch.Tensor  # (n_classes,)
    upsample: int = 1

    def __post_init__(self):
        if self.w1.shape[0] != self.b1.shape[0]:
            raise ValueError("w1/b1 size mismatch")
        if self.w2.shape[0] != self.b2.shape[0]:
            raise ValueError("w2/b2 size mismatch")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("layer width mismatch")
        if self.upsample < 1:
            raise ValueError("upsample factor must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    def parameters(self) -> list[torch.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def requires_grad_(self, flag: bool) -> "SegHead":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def detached_copy(self) -> "SegHead":
        w1, b1, w2, b2 = (p.detach().clone() for p in self.parameters())
        return SegHead(w1, b1, w2, b2, self.upsample)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "head_w1": self.w1.detach().numpy().copy(),
            "head_b1": self.b1.detach().numpy().copy(),
            "head_w2": self.w2.detach().numpy().copy(),
            "head_b2": self.b2.detach().numpy().copy(),
        }


def make_head(in_dim: int, n_classes: int, hidden: int, upsample: int, seed: int) -> SegHead:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, zero biases."""
    gen = torch.Generator().manual_seed(seed)

    def draw(shape, fan_in):
        bound = 1.0 / float(np.sqrt(fan_in))
        t = torch.empty(shape, dtype=DTYPE)
        t.uniform_(-bound, bound, generator=gen)
        return t

    return SegHead(
        w1=draw((hidden, in_dim), in_dim),
        b1=torch.zeros(hidden, dtype=DTYPE),
        w2=draw((n_classes, hidden), hidden),
        b2=torch.zeros(n_classes, dtype=DTYPE),
        upsample=upsample,
    )


def head_forward(f, head: SegHead) -> torch.Tensor:
    """Logits at image resolution, shape (h*up, w*up, n_classes)."""
    grid = f.data if isinstance(f, FeatureMap) else as_tensor(f)
    if grid.shape[-1] != head.in_dim:
        raise ValueError(f"feature dim {grid.shape[-1]} != head input {head.in_dim}")
    h, w, _ = grid.shape
    x = grid.reshape(-1, head.in_dim)
    hidden = F.relu(x @ head.w1.T + head.b1)
    logits = hidden @ head.w2.T + head.b2
    logits = logits.reshape(h, w, head.n_classes)
    if head.upsample > 1:
        logits = logits.repeat_interleave(head.upsample, dim=0)
        logits = logits.repeat_interleave(head.upsample, dim=1)
    return logits


def seg_loss(logits: torch.Tensor, y: LabelMap) -> torch.Tensor:
    """Mean cross-entropy over labeled pixels; ignored pixels drop out."""
    logits = as_tensor(logits)
    targets = y.torch_targets()
    flat = logits.reshape(-1, logits.shape[-1])
    if flat.shape[0] != targets.shape[0]:
        raise ValueError(f"logit pixels {flat.shape[0]} != label pixels {targets.shape[0]}")
    if not bool((targets != y.ignore_index).any()):
        warnings.warn("seg loss: all pixels ignored, contributing 0", RuntimeWarning)
        # keep the graph connected so callers can still backpropagate
        return (flat * 0.0).sum()
    return F.cross_entropy(flat, targets, ignore_index=y.ignore_index)


def predict(logits: torch.Tensor) -> np.ndarray:
    """Argmax class map, shape (h, w), dtype int64."""
    return logits.detach().argmax(dim=-1).numpy()


def accumulate_confusion(pred: np.ndarray, y: LabelMap, acc: np.ndarray | None = None,
                         n_classes: int | None = None) -> np.ndarray:
    """Add pred/truth pair into an (n, n) confusion matrix; rows are truth.

    Pixels whose label equals the ignore index are skipped.
    """
    n = n_classes if acc is None else acc.shape[0]
    if n is None:
        raise ValueError("need n_classes when no accumulator is given")
    if acc is None:
        acc = np.zeros((n, n), dtype=np.int64)
    truth = np.asarray(y.labels).reshape(-1)
    guess = np.asarray(pred).reshape(-1)
    if truth.shape != guess.shape:
        raise ValueError(f"shape mismatch: pred {guess.shape} vs labels {truth.shape}")
    keep = truth != y.ignore_index
    truth, guess = truth[keep], guess[keep]
    if guess.size and (guess.min() < 0 or guess.max() >= n):
        raise ValueError("prediction outside class range")
    np.add.at(acc, (truth, guess), 1)
    return acc


@dataclass
class DomainMetrics:
    """Percent-scale scores for one evaluation domain."""

    domain_id: str
    per_class_iou: np.ndarray  # NaN where the class union is empty
    miou: float
    macc: float
    pixel_count: int


@dataclass
class MetricsReport:
    per_domain: dict[str, DomainMetrics] = field(default_factory=dict)
    mean_miou: float = float("nan")
    confusions: dict[str, np.ndarray] = field(default_factory=dict)


def metrics_from_confusion(conf: np.ndarray, domain_id: str = "") -> DomainMetrics:
    """IoU per class = TP / (TP + FP + FN), skipping classes with empty union.

    macc is the mean per-class recall over classes that occur in the truth.
    """
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    union = tp + fp + fn
    iou = np.full(conf.shape[0], np.nan)
    nz = union > 0
    iou[nz] = tp[nz] / union[nz]
    occurs = conf.sum(axis=1) > 0
    if not occurs.any():
        raise ValueError(f"confusion matrix for {domain_id!r} has no labeled pixels")
    recall = tp[occurs] / conf.sum(axis=1)[occurs]
    return DomainMetrics(
        domain_id=domain_id,
        per_class_iou=100.0 * iou,
        miou=100.0 * float(np.nanmean(iou)),
        macc=100.0 * float(recall.mean()),
        pixel_count=int(conf.sum()),
    )


def compute_metrics(confusions: dict[str, np.ndarray]) -> MetricsReport:
    """Per-domain metrics plus the unweighted mean of the per-domain mIoUs."""
    if not confusions:
        raise ValueError("no confusion matrices to score")
    report = MetricsReport(confusions={k: np.asarray(v).copy() for k, v in confusions.items()})
    for domain_id, conf in confusions.items():
        report.per_domain[domain_id] = metrics_from_confusion(conf, domain_id)
    report.mean_miou = float(np.mean([m.miou for m in report.per_domain.values()]))
    return report
