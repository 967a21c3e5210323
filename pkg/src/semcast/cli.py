"""Command-line experiment runner.

Verbs: ``ingest`` (corpus summary), ``train`` (full pipeline), ``sweep``
(re-evaluate a checkpoint over an SNR grid), ``compare-rx`` (receiver-count
scaling), ``oracle-tests`` (estimator and gradient oracles standalone).
Exits nonzero exactly when a configuration, checkpoint or divergence error
fires.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as ex
from .model import CheckpointError
from .oracles import run_standalone_checks
from .training import TrainingDiverged


def _load_config(args) -> ex.ExperimentConfig:
    cfg = (ex.ExperimentConfig.from_file(args.config)
           if args.config else ex.ExperimentConfig())
    return cfg.with_overrides(seed=args.seed)


def _parse_grid(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    dataset = cfg.load_dataset()
    counts = dataset.counts
    print(f"vocabulary: {len(dataset.vocabulary)} tokens "
          f"(hash {dataset.vocabulary.hash_hex()[:12]})")
    print(f"sentences: {counts.kept} kept / {counts.dropped_short} short / "
          f"{counts.dropped_long} long / {counts.dropped_oov} oov")
    print(f"split: {len(dataset.train)} train / {len(dataset.test)} test")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "vocabulary": dataset.vocabulary.tokens,
            "train": dataset.train,
            "test": dataset.test,
            "counts": vars(counts),
        }
        (out / "dataset.json").write_text(json.dumps(payload))
        print(f"wrote {out / 'dataset.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)

    def progress(cycle, total, reward):
        print(f"cycle {cycle}/{total}: mean reward {reward:.4f}", flush=True)

    report, _ = ex.run_experiment(cfg, args.out, progress=progress,
                                  pretrained_checkpoint=args.pretrained_checkpoint)
    print(f"report: {len(report.rows)} cells -> {Path(args.out) / 'report.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = _parse_grid(args.snr_grid) if args.snr_grid else None
    report = ex.sweep_snr(cfg, args.checkpoint, args.out, snr_grid=grid)
    print(f"swept {len(report.rows)} cells -> {Path(args.out) / 'report.csv'}")
    return 0


def cmd_compare_rx(args) -> int:
    cfg = _load_config(args)
    counts = [int(tok) for tok in args.rx_counts.replace(",", " ").split()]
    summary = ex.compare_rx_counts(cfg, counts, args.out)
    for row in summary:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_oracle_tests(args) -> int:
    results = run_standalone_checks(full=args.full, seed=args.seed or 0)
    failed = 0
    for result in results:
        flag = "PASS" if result["passed"] else "FAIL"
        failed += not result["passed"]
        print(f"[{flag}] {result['name']}: {result['detail']}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcast",
        description="Broadcast text-transmission experiments with "
                    "self-critical alternating training.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=out_required,
                       help="output directory")

    p = sub.add_parser("ingest", help="build and summarize the corpus")
    common(p, out_required=False)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="pre-train, alternate-train, evaluate")
    common(p)
    p.add_argument("--pretrained-checkpoint", type=Path, default=None,
                   help="skip pre-training and start from this checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="evaluate a checkpoint over an SNR grid")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--snr-grid", type=str, default=None,
                   help="comma or space separated dB values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("compare-rx", help="train and compare receiver counts")
    common(p)
    p.add_argument("--rx-counts", type=str, required=True,
                   help="comma separated receiver counts, e.g. 1,3")
    p.set_defaults(fn=cmd_compare_rx)

    p = sub.add_parser("oracle-tests",
                       help="run the estimator and gradient oracles standalone")
    p.add_argument("--full", action="store_true",
                   help="acceptance-scale sample counts")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_oracle_tests)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, CheckpointError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
