"""Multi-level alignment of simulated features with class/domain text embeddings.

Three granularities share one temperature tau (default 0.1):
  scene    - 1 - cosine(pooled feature, domain embedding)  (see simulation)
  regional - contrastive loss between class prototypes and class embeddings
  pixel    - temperature-scaled cross-entropy of per-pixel cosine rows

Classes with no pixels in the label map are dropped from both the numerator
and the softmax denominator of the regional term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DTYPE, FeatureMap, LabelMap, NORM_EPS, as_tensor, unit

DEFAULT_TAU = 0.1


@dataclass
class MaskSet:
    """Binary per-class pixel masks, shape (n, h*w), plus presence flags."""

    masks: torch.Tensor
    present: np.ndarray

    @property
    def n(self) -> int:
        return self.masks.shape[0]


@dataclass
class PrototypeSet:
    """Masked-average-pooled class prototypes, shape (n, d)."""

    protos: torch.Tensor
    present: np.ndarray
    domain_id: str = ""

    @property
    def n(self) -> int:
        return self.protos.shape[0]


@dataclass
class TextEmbeddingSet:
    """Unit-row class embedding matrix (n, d) plus one domain embedding (d,)."""

    class_embs: torch.Tensor
    domain_emb: torch.Tensor
    domain_id: str = ""

    def __post_init__(self):
        self.class_embs = as_tensor(self.class_embs)
        self.domain_emb = as_tensor(self.domain_emb)
        norms = self.class_embs.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise ValueError("class embeddings must have unit rows")
        if abs(float(self.domain_emb.norm()) - 1.0) > 1e-6:
            raise ValueError("domain embedding must be unit norm")

    @property
    def n(self) -> int:
        return self.class_embs.shape[0]


def _grid(f) -> torch.Tensor:
    return f.data if isinstance(f, FeatureMap) else as_tensor(f)


def label_to_masks(y: LabelMap, n: int) -> MaskSet:
    """Expand labels (h, w) into n disjoint binary masks over h*w pixels."""
    flat = y.flat()
    valid = flat != y.ignore_index
    if valid.any() and flat[valid].max() >= n:
        raise ValueError(f"label {int(flat[valid].max())} >= n_classes {n}")
    masks = np.zeros((n, flat.size), dtype=np.float64)
    for k in range(n):
        masks[k] = (flat == k)
    present = masks.sum(axis=1) > 0
    return MaskSet(torch.as_tensor(masks, dtype=DTYPE), present)


def masked_average_pool(f, m: MaskSet) -> PrototypeSet:
    """Per-class mean feature over each mask; absent classes get a zero row."""
    grid = _grid(f)
    feats = grid.reshape(-1, grid.shape[-1])  # (hw, d)
    if m.masks.shape[1] != feats.shape[0]:
        raise ValueError(
            f"mask length {m.masks.shape[1]} != pixel count {feats.shape[0]}"
        )
    counts = m.masks.sum(dim=1, keepdim=True)  # (n, 1)
    sums = m.masks @ feats  # (n, d)
    protos = sums / counts.clamp_min(1.0)
    return PrototypeSet(protos, m.present.copy())


def similarity_matrix(C: PrototypeSet, T: TextEmbeddingSet) -> torch.Tensor:
    """S[i, j] = cosine(prototype_i, class_embedding_j); (n, n)."""
    if C.n != T.n:
        raise ValueError(f"class count mismatch: {C.n} vs {T.n}")
    if C.protos.shape[1] != T.class_embs.shape[1]:
        raise ValueError("feature dim mismatch between prototypes and embeddings")
    norms = C.protos.norm(dim=1)
    present_t = torch.as_tensor(C.present)
    if bool((norms[present_t] < NORM_EPS).any()):
        raise ValueError("present prototype has zero norm")
    return unit(C.protos, dim=1) @ unit(T.class_embs, dim=1).T


def regional_loss(S: torch.Tensor, present: np.ndarray, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Contrastive loss over the present-class submatrix of S.

    Sum over present classes i of -log softmax_i(S[i, present] / tau); the
    softmax denominator runs over present classes only.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    S = as_tensor(S)
    idx = np.flatnonzero(present)
    if idx.size == 0:
        warnings.warn("regional loss: no present classes, contributing 0", RuntimeWarning)
        return torch.zeros((), dtype=S.dtype)
    sub = S[np.ix_(idx, idx)] / tau
    targets = torch.arange(idx.size)
    return F.cross_entropy(sub, targets, reduction="sum")


def pixel_logits(f, T: TextEmbeddingSet) -> torch.Tensor:
    """Cosine of every pixel feature against every class embedding, (h*w, n).

    Zero-norm pixel features produce an all-zero row instead of an error:
    simulated features can transiently vanish mid-optimization.
    """
    grid = _grid(f)
    feats = grid.reshape(-1, grid.shape[-1])
    if feats.shape[1] != T.class_embs.shape[1]:
        raise ValueError("feature dim mismatch between pixels and embeddings")
    return unit(feats, dim=1) @ unit(T.class_embs, dim=1).T


def pixel_loss(P: torch.Tensor, y: LabelMap, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Cross-entropy of P/tau rows against labels, averaged over labeled pixels."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    P = as_tensor(P)
    targets = y.torch_targets()
    if P.shape[0] != targets.shape[0]:
        raise ValueError(f"logit rows {P.shape[0]} != pixel count {targets.shape[0]}")
    if not bool((targets != y.ignore_index).any()):
        warnings.warn("pixel loss: all pixels ignored, contributing 0", RuntimeWarning)
        return torch.zeros((), dtype=P.dtype)
    return F.cross_entropy(P / tau, targets, ignore_index=y.ignore_index)


def hca_loss(
    f_st,
    pooled: torch.Tensor,
    T: TextEmbeddingSet,
    y: LabelMap,
    weights: tuple[float, float],
    tau: float = DEFAULT_TAU,
    masks: MaskSet | None = None,
) -> tuple[torch.Tensor, dict]:
    """Composite alignment objective.

    total = w_regional * regional + w_pixel * pixel + scene, where scene is
    1 - cosine(pooled, domain embedding). Returns (total, breakdown); the
    breakdown carries the three components plus the prototypes so callers can
    reuse them for the cross-domain consistency term.
    """
    from .simulation import scene_alignment_loss

    w_regional, w_pixel = weights
    if masks is None:
        masks = label_to_masks(y, T.n)
    protos = masked_average_pool(f_st, masks)
    protos.domain_id = T.domain_id
    S = similarity_matrix(protos, T)
    regional = regional_loss(S, masks.present, tau)
    pixel = pixel_loss(pixel_logits(f_st, T), y, tau)
    scene = scene_alignment_loss(pooled, T.domain_emb)
    total = w_regional * regional + w_pixel * pixel + scene
    return total, {
        "regional": regional,
        "pixel": pixel,
        "scene": scene,
        "prototypes": protos,
    }
