"""Command-line interface: make-toy-data, stage1, stage2, eval, selfcheck.

Common flags: --config (YAML run config; defaults are used when omitted),
--seed (overrides the config seed), --out (re-roots every artifact path under
a directory), --force (overwrite artifacts from a different config).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import pipeline
from .config import config_digest, default_config, load_config, save_config, with_root
from .selfcheck import run_selfcheck


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.out or "runs/toy")
    if args.out:
        cfg = with_root(cfg, args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _persist_config(cfg, args):
    """Drop the resolved config next to the artifacts for reproducibility."""
    if args.config or not args.out:
        return
    path = Path(args.out) / "config.yaml"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        save_config(cfg, path)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="root directory for all artifacts")
    p.add_argument("--force", action="store_true",
                   help="overwrite artifacts from a different config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textshift",
        description="Text-driven multi-domain feature simulation and "
                    "unified segmentation-head adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="generate the toy dataset directory")
    _add_common(p)

    p = sub.add_parser("stage1", help="pretrain the source head and mine the style bank")
    _add_common(p)

    p = sub.add_parser("stage2", help="fine-tune the unified head on stylized features")
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint across all eval domains")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: adapted head)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("run-all", help="dataset + stage1 + stage2 + eval in one go")
    _add_common(p)

    p = sub.add_parser("selfcheck", help="run the built-in verification suite")

    p = sub.add_parser("write-config", help="write the default config as YAML")
    _add_common(p)
    p.add_argument("path", help="where to write the config file")
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    if args.command == "selfcheck":
        return run_selfcheck()
    try:
        cfg = _resolve_config(args)
        if args.command == "write-config":
            save_config(cfg, args.path)
            print(f"wrote {args.path} (digest {config_digest(cfg)[:12]})")
            return 0
        t0 = time.time()
        if args.command == "make-toy-data":
            _persist_config(cfg, args)
            out = pipeline.make_toy_data(cfg, force=args.force)
            print(f"dataset ready at {out} ({time.time() - t0:.1f}s)")
        elif args.command == "stage1":
            bank = pipeline.run_stage1(cfg, force=args.force)
            ok = len(bank.ok_entries())
            print(f"mined {len(bank.entries)} styles ({ok} ok) -> "
                  f"{cfg.paths.style_bank} ({time.time() - t0:.1f}s)")
        elif args.command == "stage2":
            ckpt = pipeline.run_stage2(cfg, force=args.force)
            print(f"fine-tuned head for {ckpt.iterations} iterations -> "
                  f"{cfg.paths.checkpoint} ({time.time() - t0:.1f}s)")
        elif args.command == "eval":
            report = pipeline.evaluate(cfg, checkpoint_path=args.checkpoint,
                                       figures=not args.no_figures)
            for domain_id in sorted(report.per_domain):
                m = report.per_domain[domain_id]
                print(f"{domain_id:>12}  mIoU {m.miou:6.2f}  mAcc {m.macc:6.2f}")
            print(f"{'mean-mIoU':>12}  {report.mean_miou:6.2f}")
            print(f"report -> {cfg.paths.report} ({time.time() - t0:.1f}s)")
        elif args.command == "run-all":
            _persist_config(cfg, args)
            summary = pipeline.run_all(cfg, force=args.force)
            print(f"baseline mean-mIoU {summary['baseline_mean_miou']:.2f}, "
                  f"adapted {summary['adapted_mean_miou']:.2f} "
                  f"({summary['gain']:+.2f}) in {summary['seconds']:.1f}s")
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
