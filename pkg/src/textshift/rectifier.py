"""Text-driven statistical rectification of simulated features.

A learned linear map turns a domain text embedding into correction statistics
(mu_t, sigma_t). Features are re-standardized with those statistics, scaled by
a learned residual gate beta, and added back to the input:

    out = beta * (sigma_t * (f - mu(f)) / sigma(f) + mu_t) + f

Because the correction is itself an affine map of already-restylized features,
beta * restylize(restylize(f)) + f collapses to a single affine map of the
channel-standardized source feature; `rectified_closed_form` evaluates that
collapsed form for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import DTYPE, as_tensor
from .simulation import DEFAULT_EPS, StyleParams, channel_stats, restylize


@dataclass
class RectifierParams:
    """Linear text-to-stats map (weight, bias) and scalar residual gate beta."""

    weight: torch.Tensor  # (2d, text_dim)
    bias: torch.Tensor  # (2d,)
    beta: torch.Tensor  # scalar

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        self.bias = as_tensor(self.bias)
        self.beta = as_tensor(self.beta).reshape(())
        if self.weight.ndim != 2 or self.weight.shape[0] % 2 != 0:
            raise ValueError("weight must be (2*d, text_dim)")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias must match weight rows")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0] // 2

    def parameters(self) -> list[torch.Tensor]:
        return [self.weight, self.bias, self.beta]

    def requires_grad_(self, flag: bool) -> "RectifierParams":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "rect_weight": self.weight.detach().numpy().copy(),
            "rect_bias": self.bias.detach().numpy().copy(),
            "rect_beta": self.beta.detach().numpy().reshape(1).copy(),
        }


def make_rectifier(feature_dim: int, text_dim: int, seed: int,
                   beta_init: float = 0.1) -> RectifierParams:
    """Seeded uniform(-1/sqrt(text_dim), ..) weight, zero bias, beta = beta_init."""
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / float(np.sqrt(text_dim))
    weight = torch.empty((2 * feature_dim, text_dim), dtype=DTYPE)
    weight.uniform_(-bound, bound, generator=gen)
    return RectifierParams(
        weight=weight,
        bias=torch.zeros(2 * feature_dim, dtype=DTYPE),
        beta=torch.tensor(float(beta_init), dtype=DTYPE),
    )


def identity_rectifier(feature_dim: int, beta_init: float = 0.1) -> RectifierParams:
    """Stacked-identity map: both mu_t and sigma_t equal the text embedding."""
    eye = torch.eye(feature_dim, dtype=DTYPE)
    return RectifierParams(
        weight=torch.cat([eye, eye], dim=0),
        bias=torch.zeros(2 * feature_dim, dtype=DTYPE),
        beta=torch.tensor(float(beta_init), dtype=DTYPE),
    )


def text_to_stats(text_emb: torch.Tensor, params: RectifierParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Split the linear map's output into (mu_t, sigma_t), each (d,)."""
    e = as_tensor(text_emb)
    if e.shape != (params.weight.shape[1],):
        raise ValueError(
            f"text embedding shape {tuple(e.shape)} != ({params.weight.shape[1]},)"
        )
    out = params.weight @ e + params.bias
    d = params.out_dim
    return out[:d], out[d:]


def rectify(f_st: torch.Tensor, mu_t: torch.Tensor, sigma_t: torch.Tensor,
            beta: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Gated residual correction of a simulated feature map, same shape as input."""
    grid = f_st.data if hasattr(f_st, "data") and not isinstance(f_st, torch.Tensor) else as_tensor(f_st)
    correction = restylize(grid, mu_t, sigma_t, eps=eps)
    return beta * correction + grid


def rectified_closed_form(f_s: torch.Tensor, style: StyleParams, mu_t: torch.Tensor,
                          sigma_t: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Collapsed rectify(restylize(f_s)) with eps = 0 in both standardizations.

    Let z = (f_s - mu(f_s)) / sigma(f_s). Restylizing gives z * sigma + mu,
    whose channel statistics are exactly (mu, sigma) when eps = 0, so the
    correction re-standardizes back to z and the whole pipeline is

        z * (beta * sigma_t + sigma) + (beta * mu_t + mu).

    The identity breaks for eps > 0; callers wanting the exact form must run
    with eps = 0.
    """
    grid = f_s.data if hasattr(f_s, "data") and not isinstance(f_s, torch.Tensor) else as_tensor(f_s)
    mean, std = channel_stats(grid, eps=0.0)
    z = (grid - mean) / std
    beta = as_tensor(beta).reshape(())
    scale = beta * as_tensor(sigma_t) + style.sigma
    shift = beta * as_tensor(mu_t) + style.mu
    return z * scale + shift
