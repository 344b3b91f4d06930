"""Built-in verification suite: one named check per core numeric claim.

Each check recomputes its target through an independent route (hand formula,
brute-force oracle, or central finite differences) and reports the measured
error against its tolerance. `run_selfcheck` prints one line per check and
returns a process exit code; the CLI exposes it as `textshift selfcheck`.

The restylization entry point is injectable (`pin_fn`) so the test suite can
verify the checks actually catch a wrong implementation.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import simulation
from .alignment import (MaskSet, TextEmbeddingSet, hca_loss, label_to_masks,
                        masked_average_pool, pixel_logits, pixel_loss,
                        regional_loss, similarity_matrix)
from .artifacts import BankEntry, StyleBank, save_bank
from .config import EncoderConfig
from .consistency import StackedEmbeddings, dcrl_loss, gram, stack_domains
from .core import DTYPE, LabelMap, SourceDataset, unit
from .encoders import build_prompt_set, build_toy_encoder
from .rectifier import rectify, rectified_closed_form, text_to_stats, make_rectifier
from .segmentation import (accumulate_confusion, compute_metrics, head_forward,
                           make_head, seg_loss)
from .simulation import (StyleParams, channel_stats, restylize,
                         scene_alignment_loss, mine_styles)
from .toyworld import DomainShift, ToySpec, generate_source


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.measured <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return (f"{status}  {self.name:<26} measured={self.measured:.3e} "
                f"tol={self.tolerance:.1e}{extra}")


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _rand(shape, gen, scale=1.0, offset=0.0) -> torch.Tensor:
    t = torch.empty(shape, dtype=DTYPE)
    t.normal_(0.0, 1.0, generator=gen)
    return t * scale + offset


def _rand_unit(dim, gen) -> torch.Tensor:
    return unit(_rand((dim,), gen))


def _rand_labels(h, w, n, rng, p_ignore=0.1) -> LabelMap:
    labels = rng.integers(0, n, size=(h, w))
    labels[rng.random((h, w)) < p_ignore] = 255
    labels.flat[:n] = np.arange(n)  # keep every class present
    return LabelMap(labels.astype(np.int64), n)


def _fd_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar closure over x, in place."""
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _grad_rel_err(loss_fn, leaves: list[torch.Tensor]) -> float:
    """Relative error between autograd and FD over the stacked leaf gradients.

    The norms are taken over the concatenation of all leaves so inputs with
    an exactly-zero gradient component (e.g. sigma through a mean pool of
    standardized features) are compared absolutely against the FD noise floor
    instead of dividing noise by noise.
    """
    for leaf in leaves:
        leaf.requires_grad_(True)
        leaf.grad = None
    loss = loss_fn()
    loss.backward()
    diffs, fds = [], []
    for leaf in leaves:
        analytic = leaf.grad.detach().clone()
        leaf.requires_grad_(False)
        fd = _fd_grad(lambda: loss_fn().detach(), leaf.detach())
        diffs.append((analytic - fd).reshape(-1))
        fds.append(fd.reshape(-1))
    denom = max(float(torch.cat(fds).norm()), 1e-10)
    return float(torch.cat(diffs).norm()) / denom


# ---------------------------------------------------------------- checks


def check_pin_statistics(pin_fn, n_maps: int = 1000) -> list[CheckResult]:
    """Restylized output must carry exactly the requested channel statistics."""
    gen = _gen(101)
    worst_mean, worst_std = 0.0, 0.0
    for _ in range(n_maps):
        f = _rand((6, 5, 4), gen, scale=2.0, offset=0.3)
        mu = _rand((4,), gen)
        sigma = _rand((4,), gen).abs() + 0.1
        out = pin_fn(f, StyleParams(mu, sigma), eps=0.0)
        flat = out.reshape(-1, 4)
        worst_mean = max(worst_mean, float((flat.mean(dim=0) - mu).abs().max()))
        pop_std = flat.var(dim=0, unbiased=False).sqrt()
        worst_std = max(worst_std, float((pop_std - sigma).abs().max()))
    return [
        CheckResult("pin-statistics-mean", worst_mean, 1e-13,
                    f"{n_maps} maps, eps=0"),
        CheckResult("pin-statistics-std", worst_std, 1e-10,
                    f"{n_maps} maps, eps=0"),
    ]


def check_pin_identity(pin_fn) -> CheckResult:
    gen = _gen(102)
    worst = 0.0
    for _ in range(50):
        f = _rand((5, 7, 6), gen, scale=1.5)
        mean, std = channel_stats(f, eps=1e-5)
        out = pin_fn(f, StyleParams(mean, std), eps=1e-5)
        worst = max(worst, float((out - f).abs().max()))
    return CheckResult("pin-identity", worst, 1e-6, "style = own stats")


def check_tdr_closed_form() -> CheckResult:
    gen = _gen(103)
    worst = 0.0
    for _ in range(100):
        f = _rand((4, 6, 5), gen, scale=1.7, offset=-0.2)
        style = StyleParams(_rand((5,), gen), _rand((5,), gen).abs() + 0.2)
        mu_t, sigma_t = _rand((5,), gen), _rand((5,), gen)
        beta = torch.tensor(0.1, dtype=DTYPE)
        via_pipeline = rectify(restylize(f, style.mu, style.sigma, eps=0.0),
                               mu_t, sigma_t, beta, eps=0.0)
        closed = rectified_closed_form(f, style, mu_t, sigma_t, beta)
        worst = max(worst, float((via_pipeline - closed).abs().max()))
    return CheckResult("tdr-closed-form", worst, 1e-10, "100 instances, eps=0")


def check_tdr_degeneracy() -> CheckResult:
    """Shifting sigma by delta equals shifting sigma_t by delta/beta."""
    gen = _gen(104)
    target = _rand_unit(5, gen)
    worst = 0.0
    for _ in range(50):
        f = _rand((4, 4, 5), gen, scale=1.3)
        mu = _rand((5,), gen)
        sigma = _rand((5,), gen).abs() + 0.3
        mu_t, sigma_t = _rand((5,), gen), _rand((5,), gen)
        beta = torch.tensor(0.1, dtype=DTYPE)
        delta = _rand((5,), gen, scale=0.01)

        def loss(sig, sig_t):
            out = rectify(restylize(f, mu, sig, eps=0.0), mu_t, sig_t, beta, eps=0.0)
            pooled = unit(out.reshape(-1, 5).mean(dim=0))
            return float(scene_alignment_loss(pooled, target))

        worst = max(worst, abs(loss(sigma + delta, sigma_t)
                               - loss(sigma, sigma_t + delta / beta)))
    return CheckResult("tdr-degeneracy", worst, 1e-9,
                       "sigma+d vs sigma_t+d/beta")


def check_tdr_beta_zero() -> CheckResult:
    gen = _gen(105)
    f = _rand((6, 6, 4), gen)
    out = rectify(f, _rand((4,), gen), _rand((4,), gen),
                  torch.tensor(0.0, dtype=DTYPE), eps=1e-5)
    return CheckResult("tdr-beta-zero", float((out - f).abs().max()), 0.0,
                       "exact identity")


def check_grad_style_scene() -> CheckResult:
    gen = _gen(106)
    worst = 0.0
    for _ in range(50):
        f = _rand((4, 4, 5), gen, scale=1.2)
        target = _rand_unit(5, gen)
        mu = _rand((5,), gen)
        sigma = _rand((5,), gen).abs() + 0.3

        def loss():
            out = restylize(f, mu, sigma, eps=1e-5)
            return scene_alignment_loss(unit(out.reshape(-1, 5).mean(dim=0)), target)

        worst = max(worst, _grad_rel_err(loss, [mu, sigma]))
    return CheckResult("grad-style-scene", worst, 1e-4, "50 instances, FD step 1e-5")


def check_grad_regional() -> CheckResult:
    gen = _gen(107)
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(50):
        n = 4
        S = _rand((n, n), gen, scale=0.4)
        present = rng.random(n) < 0.8
        present[:2] = True
        worst = max(worst, _grad_rel_err(lambda: regional_loss(S, present, 0.1), [S]))
    return CheckResult("grad-regional", worst, 1e-4, "50 instances")


def check_grad_pixel() -> CheckResult:
    gen = _gen(108)
    rng = np.random.default_rng(108)
    worst = 0.0
    for _ in range(50):
        n, h, w, d = 3, 3, 4, 5
        f = _rand((h, w, d), gen)
        T = TextEmbeddingSet(torch.stack([_rand_unit(d, gen) for _ in range(n)]),
                             _rand_unit(d, gen))
        y = _rand_labels(h, w, n, rng)
        worst = max(worst, _grad_rel_err(
            lambda: pixel_loss(pixel_logits(f, T), y, 0.1), [f]))
    return CheckResult("grad-pixel", worst, 1e-4, "50 instances")


def check_grad_hca() -> CheckResult:
    gen = _gen(109)
    rng = np.random.default_rng(109)
    worst = 0.0
    for _ in range(50):
        n, h, w, d = 3, 3, 3, 4
        f = _rand((h, w, d), gen, offset=0.2)
        T = TextEmbeddingSet(torch.stack([_rand_unit(d, gen) for _ in range(n)]),
                             _rand_unit(d, gen))
        y = _rand_labels(h, w, n, rng)
        masks = label_to_masks(y, n)

        def loss():
            pooled = unit(f.reshape(-1, d).mean(dim=0))
            return hca_loss(f, pooled, T, y, (0.5, 0.5), 0.1, masks=masks)[0]

        worst = max(worst, _grad_rel_err(loss, [f]))
    return CheckResult("grad-hca", worst, 1e-4, "50 instances")


def check_grad_consistency() -> CheckResult:
    gen = _gen(110)
    worst = 0.0
    for _ in range(50):
        m, n, d = 2, 3, 4
        rows = _rand((m * n, d), gen, offset=0.3)
        meta = [(f"d{i}", k, True) for i in range(m) for k in range(n)]
        text_rows = torch.stack([_rand_unit(d, gen) for _ in range(m * n)])
        T = StackedEmbeddings(text_rows, list(meta), "text")

        def loss():
            return dcrl_loss(StackedEmbeddings(rows, list(meta), "prototype"), T)

        worst = max(worst, _grad_rel_err(loss, [rows]))
    return CheckResult("grad-consistency", worst, 1e-4, "50 instances")


def check_grad_segmentation() -> CheckResult:
    gen = _gen(111)
    rng = np.random.default_rng(111)
    worst = 0.0
    for i in range(50):
        n, h, w, d = 3, 3, 3, 4
        f = _rand((h, w, d), gen)
        head = make_head(d, n, 6, 1, 4000 + i)
        y = _rand_labels(h, w, n, rng)
        worst = max(worst, _grad_rel_err(
            lambda: seg_loss(head_forward(f, head), y), [f, head.w1]))
    return CheckResult("grad-segmentation", worst, 1e-4,
                       "50 instances, features + weights")


def check_grad_rectify() -> CheckResult:
    gen = _gen(112)
    worst = 0.0
    for _ in range(50):
        d = 4
        f = _rand((3, 4, d), gen, scale=1.1)
        mu_t, sigma_t = _rand((d,), gen), _rand((d,), gen)
        beta = torch.tensor(0.17, dtype=DTYPE)
        probe = _rand((3, 4, d), gen)

        def loss():
            return (rectify(f, mu_t, sigma_t, beta, eps=1e-5) * probe).sum()

        worst = max(worst, _grad_rel_err(loss, [f, mu_t, sigma_t, beta]))
    return CheckResult("grad-rectify", worst, 1e-4, "50 instances, all inputs")


def check_oracle_masked_pool() -> CheckResult:
    gen = _gen(113)
    rng = np.random.default_rng(113)
    worst = 0.0
    for _ in range(50):
        n, h, w, d = 4, 5, 4, 3
        f = _rand((h, w, d), gen)
        y = _rand_labels(h, w, n, rng)
        got = masked_average_pool(f, label_to_masks(y, n)).protos
        flat_f = f.reshape(-1, d).numpy()
        flat_y = y.flat()
        for k in range(n):
            pix = flat_f[flat_y == k]
            want = pix.mean(axis=0) if len(pix) else np.zeros(d)
            worst = max(worst, float(np.abs(got[k].numpy() - want).max()))
    return CheckResult("oracle-masked-pool", worst, 1e-12, "brute-force mean")


def check_oracle_regional_dense() -> CheckResult:
    gen = _gen(114)
    rng = np.random.default_rng(114)
    worst = 0.0
    for _ in range(50):
        n = 5
        S = _rand((n, n), gen, scale=0.6)
        present = rng.random(n) < 0.7
        present[:2] = True
        got = float(regional_loss(S, present, 0.1))
        idx = np.flatnonzero(present)
        scaled = S.numpy() / 0.1
        want = 0.0
        for i in idx:
            logits = scaled[i, idx]
            m = logits.max()
            want += -(scaled[i, i] - (m + np.log(np.exp(logits - m).sum())))
        worst = max(worst, abs(got - want))
    return CheckResult("oracle-regional-dense", worst, 1e-10, "dense softmax CE")


def check_oracle_metrics() -> CheckResult:
    rng = np.random.default_rng(115)
    worst = 0.0
    for _ in range(30):
        n, h, w = 4, 8, 8
        truth = _rand_labels(h, w, n, rng)
        pred = rng.integers(0, n, size=(h, w))
        conf = accumulate_confusion(pred, truth, n_classes=n)
        report = compute_metrics({"only": conf})
        t, p = truth.labels.reshape(-1), pred.reshape(-1)
        keep = t != 255
        t, p = t[keep], p[keep]
        ious = []
        for k in range(n):
            inter = int(((t == k) & (p == k)).sum())
            union = int(((t == k) | (p == k)).sum())
            if union:
                ious.append(inter / union)
        want = 100.0 * float(np.mean(ious))
        worst = max(worst, abs(report.per_domain["only"].miou - want))
        worst = max(worst, abs(report.mean_miou - want))
    return CheckResult("oracle-metrics-iou", worst, 1e-9, "set-intersection IoU")


def check_oracle_total_loss() -> CheckResult:
    from .pipeline import stage1_total_loss

    gen = _gen(116)
    worst = 0.0
    for _ in range(50):
        comps = [float(x) for x in _rand((3,), gen).abs()]
        weights = [float(x) for x in _rand((3,), gen).abs()]
        got = float(stage1_total_loss(tuple(comps), tuple(weights)))
        want = weights[0] * comps[0] + weights[1] * comps[1] + weights[2] * comps[2]
        worst = max(worst, abs(got - want))
    return CheckResult("oracle-total-loss", worst, 1e-12, "weighted-sum oracle")


def check_scene_loss_range() -> CheckResult:
    gen = _gen(117)
    worst = 0.0
    for _ in range(200):
        a, b = _rand((6,), gen), _rand((6,), gen)
        val = float(scene_alignment_loss(a, b))
        worst = max(worst, max(0.0 - val, val - 2.0, 0.0))
    aligned = float(scene_alignment_loss(torch.ones(4, dtype=DTYPE),
                                         torch.ones(4, dtype=DTYPE)))
    worst = max(worst, abs(aligned))
    return CheckResult("scene-loss-range", worst, 1e-12, "bounds [0, 2]")


def _tiny_world():
    spec = ToySpec(
        n_classes=3, image_size=16, n_train=2, n_eval_per_domain=1,
        domain_shifts={
            "dusk": DomainShift((0.7, 0.7, 0.75), (0.2, 0.15, 0.25), 0.005),
            "glare": DomainShift((1.1, 1.1, 1.0), (-0.3, -0.3, -0.2), 0.005),
        },
        seed=21,
    )
    enc_cfg = EncoderConfig(feature_dim=8, text_dim=8, stride=4,
                            hidden_channels=8, seed=31, calibration_images=4)
    domains = [("dusk", "driving at dusk"), ("glare", "driving into glare")]
    classes = ["road", "building", "car"]
    pair = build_toy_encoder(enc_cfg, spec, domains, classes)
    return spec, pair, domains, classes


class _MiniStage1Cfg:
    steps = 5
    lr = 0.001
    momentum = 0.9
    lambda_hc = 1.0
    lambda_dc = 1.0
    lambda_seg = 0.5
    lambda_r = 0.1
    lambda_p = 0.1
    tau = 0.1
    eps = 1e-5
    sigma_floor = 1e-4


def _mine_tiny():
    spec, pair, domains, classes = _tiny_world()
    dataset = generate_source(spec)
    prompt_sets = [build_prompt_set(classes, desc, domain_id=did)
                   for did, desc in domains]
    head = make_head(8, len(classes), 8, pair.stride, 77)
    return mine_styles(pair, dataset, prompt_sets, head, _MiniStage1Cfg())


def check_determinism_encoders() -> CheckResult:
    spec, pair, domains, classes = _tiny_world()
    pair2 = build_toy_encoder(EncoderConfig(feature_dim=8, text_dim=8, stride=4,
                                            hidden_channels=8, seed=31,
                                            calibration_images=4),
                              spec, domains, classes)
    img = generate_source(spec).items[0].image
    a = pair.encode_image_features(img).data
    b = pair2.encode_image_features(img).data
    ta = pair.encode_text("the car in dusk")
    tb = pair2.encode_text("the car in dusk")
    diff = max(float((a - b).abs().max()), float((ta - tb).abs().max()))
    return CheckResult("determinism-encoders", diff, 0.0, "rebuilt pair, bitwise")


def check_determinism_mining() -> CheckResult:
    blobs = []
    for _ in range(2):
        mined, _ = _mine_tiny()
        bank = StyleBank(8, "selfcheck", ["dusk", "glare"], [
            BankEntry(m.domain_id, m.image_id, m.style.mu.numpy(),
                      m.style.sigma.numpy(), m.final_alignment_loss, m.status)
            for m in mined
        ])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bank.tsb"
            save_bank(bank, path)
            blobs.append(path.read_bytes())
    return CheckResult("determinism-mining", float(blobs[0] != blobs[1]), 0.0,
                       "two runs, byte compare")


def check_mining_monotonic() -> CheckResult:
    mined, _ = _mine_tiny()
    worst = 0.0
    for m in mined:
        if m.status == "ok":
            worst = max(worst, m.final_alignment_loss - m.initial_alignment_loss)
    return CheckResult("mining-monotonic", worst, 1e-9,
                       "scene loss final vs initial")


def collect_checks(pin_fn=None) -> list[CheckResult]:
    pin_fn = pin_fn if pin_fn is not None else simulation.pin
    results = []
    results += check_pin_statistics(pin_fn)
    results.append(check_pin_identity(pin_fn))
    results.append(check_tdr_closed_form())
    results.append(check_tdr_degeneracy())
    results.append(check_tdr_beta_zero())
    results.append(check_grad_style_scene())
    results.append(check_grad_regional())
    results.append(check_grad_pixel())
    results.append(check_grad_hca())
    results.append(check_grad_consistency())
    results.append(check_grad_segmentation())
    results.append(check_grad_rectify())
    results.append(check_oracle_masked_pool())
    results.append(check_oracle_regional_dense())
    results.append(check_oracle_metrics())
    results.append(check_oracle_total_loss())
    results.append(check_scene_loss_range())
    results.append(check_determinism_encoders())
    results.append(check_determinism_mining())
    results.append(check_mining_monotonic())
    return results


def run_selfcheck(pin_fn=None, printer=print) -> int:
    """Run every check, print one line each plus a summary; 0 iff all pass."""
    results = collect_checks(pin_fn)
    for r in results:
        printer(r.line())
    failed = [r for r in results if not r.ok]
    printer(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0
