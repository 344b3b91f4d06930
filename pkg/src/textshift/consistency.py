"""Cross-domain relational consistency between prototypes and text embeddings.

Prototypes from every simulated domain are stacked into one (m*n, d) matrix,
as are the class-in-domain text embeddings. The loss is the mean squared
difference between the two pairwise-cosine Gram matrices, restricted to rows
whose class is present in the corresponding label map. This constrains the
relative geometry of the simulated feature space, not absolute positions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import PrototypeSet, TextEmbeddingSet
from .core import NORM_EPS, unit


@dataclass
class StackedEmbeddings:
    """Row-stacked per-domain embeddings with (domain, class, present) metadata."""

    rows: torch.Tensor  # (m*n, d)
    meta: list[tuple[str, int, bool]] = field(default_factory=list)
    kind: str = "prototype"

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValueError(f"expected 2-D row stack, got shape {tuple(self.rows.shape)}")
        if len(self.meta) != self.rows.shape[0]:
            raise ValueError("metadata length must match row count")

    @property
    def present(self) -> np.ndarray:
        return np.array([p for _, _, p in self.meta], dtype=bool)


def stack_domains(per_domain: list) -> StackedEmbeddings:
    """Stack PrototypeSets or TextEmbeddingSets domain-major, class-minor.

    Text rows are always flagged present; prototype rows inherit the presence
    flags of their label maps. Domain order follows the input list.
    """
    if not per_domain:
        raise ValueError("need at least one domain to stack")
    first = per_domain[0]
    if isinstance(first, PrototypeSet):
        kind = "prototype"
    elif isinstance(first, TextEmbeddingSet):
        kind = "text"
    else:
        raise TypeError(f"cannot stack {type(first).__name__}")
    rows, meta = [], []
    n = first.n
    for item in per_domain:
        if type(item) is not type(first):
            raise TypeError("mixed stack of prototypes and text embeddings")
        if item.n != n:
            raise ValueError("all domains must cover the same classes")
        if kind == "prototype":
            rows.append(item.protos)
            flags = item.present
        else:
            rows.append(item.class_embs)
            flags = np.ones(n, dtype=bool)
        meta.extend((item.domain_id, k, bool(flags[k])) for k in range(n))
    return StackedEmbeddings(torch.cat(rows, dim=0), meta, kind)


def gram(X: StackedEmbeddings, keep: np.ndarray | None = None) -> torch.Tensor:
    """Pairwise-cosine Gram matrix over the kept (default: present) rows.

    Diagonal entries are 1 by construction. Raises if fewer than two rows
    participate or if a kept row has zero norm.
    """
    mask = X.present if keep is None else np.asarray(keep, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size < 2:
        raise ValueError(f"need at least 2 participating rows, have {idx.size}")
    rows = X.rows[idx]
    norms = rows.norm(dim=1)
    if bool((norms < NORM_EPS).any()):
        bad = int(torch.argmin(norms))
        dom, cls, _ = X.meta[int(idx[bad])]
        raise ValueError(f"zero-norm row in Gram input (domain={dom!r}, class={cls})")
    normed = unit(rows, dim=1)
    return normed @ normed.T


def dcrl_loss(C: StackedEmbeddings, T: StackedEmbeddings) -> torch.Tensor:
    """Mean squared difference between prototype and text Gram matrices.

    Both Grams are computed over the rows present on the prototype side, so
    the two matrices compare like with like. With fewer than two present rows
    there is no pairwise structure to match; warns and contributes 0.
    """
    if len(C.meta) != len(T.meta):
        raise ValueError(f"stack sizes differ: {len(C.meta)} vs {len(T.meta)}")
    for (dc, kc, _), (dt, kt, _) in zip(C.meta, T.meta):
        if (dc, kc) != (dt, kt):
            raise ValueError("prototype and text stacks are ordered differently")
    common = C.present & T.present
    if common.sum() < 2:
        warnings.warn("consistency loss: fewer than 2 present rows, contributing 0",
                      RuntimeWarning)
        return torch.zeros((), dtype=C.rows.dtype)
    return torch.mean((gram(C, common) - gram(T, common)) ** 2)
