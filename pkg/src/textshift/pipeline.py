"""Two-stage orchestration: style mining, unified-head fine-tuning, evaluation.

Stage 1 pretrains a source-only head (also saved as the baseline checkpoint),
then mines per-(image, domain) styles against the frozen head and persists
them as a style bank. Stage 2 fine-tunes that head on restylized (and
optionally rectified) features sampled uniformly from the bank; one head
serves every domain. Evaluation runs encoder -> head with no domain input at
all; domain ids only bucket the confusion matrices afterwards.

Every artifact embeds the semantic config digest and loading cross-checks it,
so banks, checkpoints and reports from different configurations cannot be
silently mixed.
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path

import numpy as np
import torch

from . import artifacts, reporting
from .artifacts import (BankEntry, Checkpoint, StyleBank, load_bank,
                        load_checkpoint, load_eval_split, load_source_dataset,
                        save_bank, save_checkpoint, save_dataset)
from .config import RunConfig, config_digest, _toyworld_to_dict
from .core import DTYPE, EvalSplit, SourceDataset, as_tensor, stable_seed
from .encoders import (EncoderPair, build_external_encoder, build_prompt_set,
                       build_toy_encoder, check_domain_separability)
from .rectifier import RectifierParams, make_rectifier, rectify, text_to_stats
from .segmentation import (SegHead, accumulate_confusion, compute_metrics,
                           head_forward, make_head, predict, seg_loss)
from .simulation import mine_styles, restylize
from .toyworld import generate_source, make_eval_split

_COMPONENT_NAMES = ("hierarchical-alignment", "cross-domain-consistency",
                    "segmentation")


def stage1_total_loss(components, weights) -> torch.Tensor:
    """Weighted sum of the three stage-1 loss components.

    Raises naming the offending component if any value is non-finite, so a
    diverging term is attributable from the error alone.
    """
    if len(components) != 3 or len(weights) != 3:
        raise ValueError("expected 3 components and 3 weights")
    total = torch.zeros((), dtype=DTYPE)
    for name, comp, w in zip(_COMPONENT_NAMES, components, weights):
        t = as_tensor(comp)
        if not bool(torch.isfinite(t.detach()).all()):
            raise ValueError(f"{name} loss component is non-finite")
        total = total + float(w) * t
    return total


def build_encoder(cfg: RunConfig) -> EncoderPair:
    if cfg.encoder.kind == "toy":
        return build_toy_encoder(cfg.encoder, cfg.toyworld, cfg.domain_pairs(),
                                 cfg.classes)
    pair = build_external_encoder()
    if pair.feature_dim != cfg.encoder.feature_dim:
        raise RuntimeError(
            f"external encoder has feature_dim {pair.feature_dim}, "
            f"config says {cfg.encoder.feature_dim}"
        )
    return pair


def make_toy_data(cfg: RunConfig, force: bool = False) -> Path:
    """Generate, separability-check, and persist the toy dataset directory."""
    cfg.validate()
    digest = config_digest(cfg, scope="data")
    out = Path(cfg.paths.dataset_dir)
    manifest_path = out / "manifest.yaml"
    if manifest_path.exists() and not force:
        existing = artifacts.load_manifest(out)
        if existing.get("config_digest") == digest:
            return out
        raise RuntimeError(
            f"dataset at {out} was generated under a different config; "
            "pass --force to regenerate"
        )
    source = generate_source(cfg.toyworld)
    eval_split = make_eval_split(cfg.toyworld)
    pair = build_encoder(cfg)
    separability = check_domain_separability(
        pair, cfg.toyworld, [d.id for d in cfg.domains])
    save_dataset(out, source, eval_split, {
        "toyworld": _toyworld_to_dict(cfg.toyworld),
        "classes": list(cfg.classes),
        "config_digest": digest,
        "separability": {
            "min_distance": separability["min_distance"],
            "max_spread": separability["max_spread"],
            "ratio": separability["ratio"],
        },
    })
    return out


def _feature_cache(pair: EncoderPair, dataset: SourceDataset) -> dict[str, tuple]:
    cache = {}
    for item in dataset:
        feats = pair.encode_image_features(item.image).data.detach()
        cache[item.image_id] = (feats, item.labels)
    return cache


def train_source_head(pair: EncoderPair, dataset: SourceDataset,
                      cfg: RunConfig) -> SegHead:
    """Pretrain the shared head on unshifted source features only."""
    head = make_head(cfg.encoder.feature_dim, len(cfg.classes), cfg.head.hidden,
                     pair.stride, stable_seed(cfg.seed, "head-init"))
    head.requires_grad_(True)
    cache = _feature_cache(pair, dataset)
    ids = [item.image_id for item in dataset]
    opt = torch.optim.SGD(head.parameters(), lr=cfg.head.pretrain_lr,
                          momentum=cfg.head.momentum)
    rng = np.random.default_rng(stable_seed(cfg.seed, "head-pretrain"))
    for _ in range(cfg.head.pretrain_iterations):
        feats, labels = cache[ids[int(rng.integers(len(ids)))]]
        loss = seg_loss(head_forward(feats, head), labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return head.requires_grad_(False)


def _head_digest(head: SegHead) -> str:
    h = hashlib.sha256()
    for arr in head.state_arrays().values():
        h.update(arr.tobytes())
    return h.hexdigest()


def _bank_digest(bank: StyleBank) -> str:
    h = hashlib.sha256()
    for e in bank.entries:
        h.update(e.mu.tobytes())
        h.update(e.sigma.tobytes())
    return h.hexdigest()


def _refuse_stale(path: Path, digest: str, force: bool, kind: str, read_digest):
    if not path.exists() or force:
        return
    try:
        existing = read_digest(path)
    except Exception as exc:
        raise RuntimeError(
            f"existing {kind} at {path} is unreadable ({exc}); pass --force to replace"
        ) from exc
    if existing != digest:
        raise RuntimeError(
            f"existing {kind} at {path} belongs to a different config; "
            "pass --force to overwrite"
        )


def _rng_summary(rng: np.random.Generator) -> str:
    return hashlib.sha256(repr(rng.bit_generator.state).encode()).hexdigest()


def run_stage1(cfg: RunConfig, force: bool = False) -> StyleBank:
    """Pretrain the source head, mine the style bank, persist both."""
    cfg.validate()
    digest = config_digest(cfg, scope="stage1")
    bank_path = Path(cfg.paths.style_bank)
    _refuse_stale(bank_path, digest, force, "style bank",
                  lambda p: load_bank(p).config_digest)
    baseline_path = Path(cfg.paths.baseline_checkpoint)
    _refuse_stale(baseline_path, digest, force, "baseline checkpoint",
                  lambda p: load_checkpoint(p).config_digest)

    manifest = artifacts.load_manifest(Path(cfg.paths.dataset_dir))
    if manifest.get("config_digest") != config_digest(cfg, scope="data"):
        raise ValueError(
            f"dataset at {cfg.paths.dataset_dir} was generated under a "
            "different config; rerun make-toy-data"
        )
    dataset = load_source_dataset(cfg.paths.dataset_dir)
    pair = build_encoder(cfg)
    head = train_source_head(pair, dataset, cfg)
    save_checkpoint(Checkpoint(
        config_digest=digest,
        iterations=cfg.head.pretrain_iterations,
        rng_state="",
        rectifier_on=False,
        meta={"feature_dim": cfg.encoder.feature_dim,
              "n_classes": len(cfg.classes),
              "hidden": cfg.head.hidden,
              "upsample": pair.stride,
              "digest_scope": "stage1"},
        arrays=head.state_arrays(),
    ), baseline_path)

    prompt_sets = [build_prompt_set(cfg.classes, d.description, domain_id=d.id)
                   for d in cfg.domains]
    head_before = _head_digest(head)
    mined, logs = mine_styles(pair, dataset, prompt_sets, head, cfg.stage1)
    assert _head_digest(head) == head_before, "stage-1 must not update the head"

    bank = StyleBank(
        feature_dim=cfg.encoder.feature_dim,
        config_digest=digest,
        domains=[d.id for d in cfg.domains],
        entries=[BankEntry(m.domain_id, m.image_id,
                           m.style.mu.numpy(), m.style.sigma.numpy(),
                           m.final_alignment_loss, m.status)
                 for m in mined],
    )
    save_bank(bank, bank_path)
    reporting.write_log(logs, cfg.paths.stage1_log,
                        ["image_id", "step", "total", "hc", "dc", "seg", "scene_mean"])
    return bank


def _head_from_checkpoint(ckpt: Checkpoint) -> SegHead:
    a = ckpt.arrays
    return SegHead(
        w1=torch.as_tensor(a["head_w1"], dtype=DTYPE),
        b1=torch.as_tensor(a["head_b1"], dtype=DTYPE),
        w2=torch.as_tensor(a["head_w2"], dtype=DTYPE),
        b2=torch.as_tensor(a["head_b2"], dtype=DTYPE),
        upsample=int(ckpt.meta["upsample"]),
    )


def _rectifier_from_checkpoint(ckpt: Checkpoint) -> RectifierParams:
    a = ckpt.arrays
    return RectifierParams(
        weight=torch.as_tensor(a["rect_weight"], dtype=DTYPE),
        bias=torch.as_tensor(a["rect_bias"], dtype=DTYPE),
        beta=torch.as_tensor(a["rect_beta"][0], dtype=DTYPE),
    )


def run_stage2(cfg: RunConfig, force: bool = False) -> Checkpoint:
    """Fine-tune the baseline head on bank-stylized features, save a checkpoint."""
    cfg.validate()
    digest = config_digest(cfg)
    stage1_digest = config_digest(cfg, scope="stage1")
    bank = load_bank(cfg.paths.style_bank)
    if bank.config_digest != stage1_digest:
        raise ValueError(
            "style bank was mined under a different config "
            f"({bank.config_digest[:12]}... vs {stage1_digest[:12]}...)"
        )
    entries = bank.ok_entries()
    if not entries:
        raise RuntimeError("style bank has no usable entries")
    ckpt_path = Path(cfg.paths.checkpoint)
    _refuse_stale(ckpt_path, digest, force, "checkpoint",
                  lambda p: load_checkpoint(p).config_digest)

    base = load_checkpoint(cfg.paths.baseline_checkpoint)
    if base.config_digest != stage1_digest:
        raise ValueError("baseline checkpoint belongs to a different config")
    head = _head_from_checkpoint(base).requires_grad_(True)
    dataset = load_source_dataset(cfg.paths.dataset_dir)
    pair = build_encoder(cfg)
    cache = _feature_cache(pair, dataset)
    for e in entries:
        if e.image_id not in cache:
            raise RuntimeError(f"bank entry references unknown image {e.image_id!r}")

    domain_embs = {}
    for d in cfg.domains:
        ps = build_prompt_set(cfg.classes, d.description, domain_id=d.id)
        domain_embs[d.id] = pair.encode_class_text(ps).domain_emb.detach()

    styles = [(torch.as_tensor(e.mu, dtype=DTYPE), torch.as_tensor(e.sigma, dtype=DTYPE),
               e.domain_id, e.image_id) for e in entries]
    bank_before = _bank_digest(bank)

    rect = None
    trained = head.parameters()
    if cfg.stage2.rectifier:
        rect = make_rectifier(cfg.encoder.feature_dim, cfg.encoder.feature_dim,
                              stable_seed(cfg.seed, "rectifier"),
                              cfg.stage2.beta_init)
        rect.requires_grad_(True)
        if cfg.stage2.freeze_beta:
            rect.beta.requires_grad_(False)
            trained = trained + [rect.weight, rect.bias]
        else:
            trained = trained + rect.parameters()
    opt = torch.optim.SGD(trained, lr=cfg.stage2.lr, momentum=cfg.stage2.momentum)
    rng = np.random.default_rng(stable_seed(cfg.seed, "stage2-sampling"))
    eps = cfg.stage1.eps
    logs = []
    for it in range(cfg.stage2.iterations):
        idxs = rng.integers(0, len(styles), size=cfg.stage2.batch_size)
        loss = torch.zeros((), dtype=DTYPE)
        for i in idxs:
            mu, sigma, domain_id, image_id = styles[int(i)]
            feats, labels = cache[image_id]
            x = restylize(feats, mu, sigma, eps=eps)
            if rect is not None:
                mu_t, sigma_t = text_to_stats(domain_embs[domain_id], rect)
                x = rectify(x, mu_t, sigma_t, rect.beta, eps=eps)
            loss = loss + seg_loss(head_forward(x, head), labels)
        loss = loss / cfg.stage2.batch_size
        opt.zero_grad()
        loss.backward()
        opt.step()
        logs.append({"iteration": it, "loss": float(loss.detach()),
                     "beta": float(rect.beta.detach()) if rect is not None else 0.0})

    assert _bank_digest(bank) == bank_before, "stage-2 must not update styles"
    arrays = head.state_arrays()
    if rect is not None:
        arrays.update(rect.state_arrays())
    ckpt = Checkpoint(
        config_digest=digest,
        iterations=cfg.stage2.iterations,
        rng_state=_rng_summary(rng),
        rectifier_on=rect is not None,
        meta={"feature_dim": cfg.encoder.feature_dim,
              "n_classes": len(cfg.classes),
              "hidden": cfg.head.hidden,
              "upsample": pair.stride,
              "digest_scope": "full"},
        arrays=arrays,
    )
    save_checkpoint(ckpt, ckpt_path)
    reporting.write_log(logs, cfg.paths.stage2_log, ["iteration", "loss", "beta"])
    return ckpt


def predict_image(pair: EncoderPair, head: SegHead, image: np.ndarray) -> np.ndarray:
    """Inference for one image. Takes no domain information by construction."""
    return predict(head_forward(pair.encode_image_features(image), head))


def evaluate(cfg: RunConfig, checkpoint_path: str | Path | None = None,
             report_path: str | Path | None = None,
             figures: bool = True, eval_split: EvalSplit | None = None):
    """Score one checkpoint across every eval domain with a single model.

    Returns the MetricsReport; also writes the TSV report (and figures unless
    disabled). Domain ids never reach the forward pass; they only select the
    confusion matrix each image's counts land in.
    """
    cfg.validate()
    ckpt = load_checkpoint(checkpoint_path or cfg.paths.checkpoint)
    scope = str(ckpt.meta.get("digest_scope", "full"))
    if ckpt.config_digest != config_digest(cfg, scope=scope):
        raise ValueError("checkpoint belongs to a different config")
    if int(ckpt.meta["n_classes"]) != len(cfg.classes):
        raise ValueError(
            f"checkpoint has {ckpt.meta['n_classes']} classes, "
            f"config has {len(cfg.classes)}"
        )
    head = _head_from_checkpoint(ckpt).requires_grad_(False)
    pair = build_encoder(cfg)
    if eval_split is None:
        eval_split = load_eval_split(cfg.paths.dataset_dir)
    n = len(cfg.classes)
    confusions = {}
    for domain_id in sorted(eval_split.by_domain):
        acc = np.zeros((n, n), dtype=np.int64)
        for item in eval_split.by_domain[domain_id]:
            pred = predict_image(pair, head, item.image)
            acc = accumulate_confusion(pred, item.labels, acc)
        confusions[domain_id] = acc
    report = compute_metrics(confusions)
    out_path = Path(report_path or cfg.paths.report)
    reporting.write_report(report, out_path, ckpt.config_digest, cfg.classes)
    if figures:
        reporting.render_figures(report, cfg.paths.figures_dir, cfg.classes)
    return report


def run_all(cfg: RunConfig, force: bool = False) -> dict:
    """make-toy-data + stage1 + stage2 + evaluate, returning a summary."""
    t0 = time.time()
    make_toy_data(cfg, force=force)
    run_stage1(cfg, force=force)
    run_stage2(cfg, force=force)
    report = evaluate(cfg)
    baseline = evaluate(cfg, checkpoint_path=cfg.paths.baseline_checkpoint,
                        report_path=str(Path(cfg.paths.report).with_suffix("")) +
                        "_baseline.tsv", figures=False)
    return {
        "adapted_mean_miou": report.mean_miou,
        "baseline_mean_miou": baseline.mean_miou,
        "gain": report.mean_miou - baseline.mean_miou,
        "seconds": time.time() - t0,
    }
