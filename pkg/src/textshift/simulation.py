"""Text-guided simulation of target-domain features from source features.

A style is a per-channel (mu, sigma) pair. Applying it standardizes each
feature channel and re-scales/shifts it:

    out = sigma * (f - mu(f)) / sigma(f) + mu

Styles are mined per (source image, target domain) by gradient descent on a
composite objective (alignment + cross-domain consistency + frozen-head
segmentation loss); only the styles move, never the encoder or the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .alignment import label_to_masks
from .consistency import dcrl_loss, stack_domains
from .core import FeatureMap, SourceDataset, as_tensor, cosine
from .segmentation import SegHead, head_forward, seg_loss

DEFAULT_EPS = 1e-5


@dataclass
class StyleParams:
    """Per-channel target statistics for one (image, domain) pair."""

    mu: torch.Tensor  # (d,)
    sigma: torch.Tensor  # (d,)
    domain_id: str = ""

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma = as_tensor(self.sigma)
        if self.mu.ndim != 1 or self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must be 1-D with matching shape")
        if not bool(torch.isfinite(self.mu).all() & torch.isfinite(self.sigma).all()):
            raise ValueError("style statistics must be finite")
        if not bool((self.sigma > 0).all()):
            raise ValueError("sigma entries must be positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class MinedStyle:
    """One style-bank entry before serialization."""

    domain_id: str
    image_id: str
    style: StyleParams
    final_alignment_loss: float
    initial_alignment_loss: float
    status: str = "ok"


def channel_stats(f, eps: float = DEFAULT_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and std over all pixels of a (h, w, d) feature map.

    Population variance (N divisor); std = sqrt(var + eps), so eps = 0 gives
    the exact statistics and a constant channel yields std = 0 there.
    """
    grid = f.data if isinstance(f, FeatureMap) else as_tensor(f)
    if grid.ndim != 3:
        raise ValueError(f"expected (h, w, d) features, got shape {tuple(grid.shape)}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    flat = grid.reshape(-1, grid.shape[-1])
    mean = flat.mean(dim=0)
    var = ((flat - mean) ** 2).mean(dim=0)
    return mean, torch.sqrt(var + eps)


def restylize(data: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
              eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Standardize per channel, then apply target scale sigma and shift mu."""
    data = as_tensor(data)
    mean, std = channel_stats(data, eps=eps)
    return as_tensor(sigma) * (data - mean) / std + as_tensor(mu)


def pin(f, style: StyleParams, eps: float = DEFAULT_EPS):
    """Apply a mined style to a feature map; returns the input's container type.

    With eps = 0 the output's channel statistics equal (style.mu, style.sigma)
    exactly whenever no input channel is constant.
    """
    if isinstance(f, FeatureMap):
        return FeatureMap(restylize(f.data, style.mu, style.sigma, eps=eps))
    return restylize(f, style.mu, style.sigma, eps=eps)


def scene_alignment_loss(pooled: torch.Tensor, target_emb: torch.Tensor) -> torch.Tensor:
    """1 - cosine(pooled scene feature, domain text embedding)."""
    return 1.0 - cosine(pooled, target_emb)


def _per_image_losses(feats, mus, sigmas, text_sets, pair, masks, labels_small,
                      labels_full, head, cfg):
    """Composite loss terms across all target domains for one source image.

    Alignment terms run on the feature grid (labels_small), the segmentation
    term on the upsampled head output against the full-resolution labels.
    """
    from .alignment import hca_loss

    hc_total = feats.new_zeros(())
    seg_total = feats.new_zeros(())
    scene_vals = []
    protos = []
    for mu, sigma, text_set in zip(mus, sigmas, text_sets):
        f_st = restylize(feats, mu, sigma, eps=cfg.eps)
        pooled = pair.pool(f_st)
        hc, parts = hca_loss(f_st, pooled, text_set, labels_small,
                             (cfg.lambda_r, cfg.lambda_p), cfg.tau, masks=masks)
        hc_total = hc_total + hc
        scene_vals.append(float(parts["scene"].detach()))
        protos.append(parts["prototypes"])
        seg_total = seg_total + seg_loss(head_forward(f_st, head), labels_full)
    if len(mus) >= 2:
        dc = dcrl_loss(stack_domains(protos), stack_domains(text_sets))
    else:
        # single target domain: no cross-domain structure to constrain
        dc = feats.new_zeros(())
    return hc_total, dc, seg_total, scene_vals


def _scene_losses(feats, mus, sigmas, text_sets, pair, eps) -> list[float]:
    vals = []
    with torch.no_grad():
        for mu, sigma, text_set in zip(mus, sigmas, text_sets):
            f_st = restylize(feats, mu, sigma, eps=eps)
            vals.append(float(scene_alignment_loss(pair.pool(f_st), text_set.domain_emb)))
    return vals


def mine_styles(pair, dataset: SourceDataset, prompt_sets: list, head: SegHead,
                cfg) -> tuple[list[MinedStyle], list[dict]]:
    """Mine one style per (source image, target domain) pair.

    All target domains for an image are optimized jointly so the consistency
    term sees the full cross-domain prototype stack. The head stays frozen;
    sigma is clamped to cfg.sigma_floor after every step. If the composite
    loss goes non-finite the image's entries fall back to their source-stat
    initialization and are flagged "failed"; mining continues with the rest.

    Returns (entries, step log rows); entries are image-major in dataset
    order, domain-minor in prompt order.
    """
    from .pipeline import stage1_total_loss

    text_sets = [pair.encode_class_text(ps) for ps in prompt_sets]
    head = head.detached_copy().requires_grad_(False)
    weights = (cfg.lambda_hc, cfg.lambda_dc, cfg.lambda_seg)
    entries: list[MinedStyle] = []
    logs: list[dict] = []
    for item in dataset:
        feats = pair.encode_image_features(item.image).data.detach()
        labels_small = item.labels.downsample(pair.stride)
        masks = label_to_masks(labels_small, text_sets[0].n)
        init_mean, init_std = channel_stats(feats, eps=cfg.eps)
        mus = [init_mean.detach().clone().requires_grad_(True) for _ in text_sets]
        sigmas = [init_std.detach().clone().requires_grad_(True) for _ in text_sets]
        opt = torch.optim.SGD([*mus, *sigmas], lr=cfg.lr, momentum=cfg.momentum)
        initial = _scene_losses(feats, mus, sigmas, text_sets, pair, cfg.eps)
        failed = False
        for step in range(cfg.steps):
            try:
                hc, dc, seg, scene_vals = _per_image_losses(
                    feats, mus, sigmas, text_sets, pair, masks, labels_small,
                    item.labels, head, cfg)
                total = stage1_total_loss((hc, dc, seg), weights)
            except (ValueError, FloatingPointError):
                failed = True
                break
            logs.append({
                "image_id": item.image_id,
                "step": step,
                "total": float(total.detach()),
                "hc": float(hc.detach()),
                "dc": float(dc.detach()),
                "seg": float(seg.detach()),
                "scene_mean": sum(scene_vals) / len(scene_vals),
            })
            opt.zero_grad()
            total.backward()
            opt.step()
            with torch.no_grad():
                for sigma in sigmas:
                    sigma.clamp_(min=cfg.sigma_floor)
        if not failed:
            finals = _scene_losses(feats, mus, sigmas, text_sets, pair, cfg.eps)
        for t, text_set in enumerate(text_sets):
            if failed:
                style = StyleParams(init_mean.detach().clone(),
                                    init_std.detach().clone(), text_set.domain_id)
                entries.append(MinedStyle(text_set.domain_id, item.image_id, style,
                                          float("nan"), initial[t], status="failed"))
            else:
                style = StyleParams(mus[t].detach().clone(),
                                    sigmas[t].detach().clone(), text_set.domain_id)
                entries.append(MinedStyle(text_set.domain_id, item.image_id, style,
                                          finals[t], initial[t]))
    return entries, logs
