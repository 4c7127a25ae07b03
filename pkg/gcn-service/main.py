#!/usr/bin/env python3
"""
AdaptGCN – command-line entry point
===================================
Sub-commands:
  • train              – train one configuration; writes metrics.csv, model.snapshot, manifest.json
  • evaluate           – accuracy of a saved snapshot on a split (full architecture)
  • dataset validate   – parse a dataset directory, print statistics and invariant issues
  • bench              – per-epoch time and sampled nodes for several samplers
  • selftest           – statistical and gradient oracles on toy graphs

Usage:
  python main.py train --dataset data/cora --sampler adaptive --seed 1
  python main.py train --from-manifest runs/cora-adaptive-seed1/manifest.json --deterministic
  python main.py evaluate --snapshot runs/cora-adaptive-seed1/model.snapshot --split test
  python main.py dataset validate data/cora
  python main.py bench --dataset data/pubmed --samplers full,node_wise,iid,adaptive --epochs 10
  python main.py selftest --filter variance

Exit codes: 0 ok, 1 configuration error, 2 dataset error, 3 numeric divergence,
4 self-test failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

# Load environment variables IMMEDIATELY
load_dotenv(os.path.join(os.path.dirname(__file__), '.env'))

from pydantic import ValidationError

from gcn_pipeline import __version__
from gcn_pipeline.config import RunManifest, TrainConfig, build_config, resolve_dataset, runs_dir
from gcn_pipeline.errors import (
    AdaptGcnError,
    BenchmarkCheckError,
    ConfigError,
    DatasetError,
    InputError,
    NumericDivergenceError,
    NumericError,
)
from gcn_pipeline.graph_store import validate_dataset
from gcn_pipeline.samplers import STRATEGIES
from gcn_pipeline.selftest import run_selftest
from gcn_pipeline.training import (
    TrainingData,
    benchmark,
    evaluate,
    layer_wise_is_lighter,
    load_snapshot,
    train_and_save,
    write_bench_csv,
)

logger = logging.getLogger("adaptgcn.cli")

EXIT_OK        = 0
EXIT_CONFIG    = 1
EXIT_DATASET   = 2
EXIT_NUMERIC   = 3
EXIT_SELFTEST  = 4   # also a failed benchmark check

# ── ANSI colours ──────────────────────────────────────────────────────────────
GREEN  = "\033[0;32m"
RED    = "\033[0;31m"
YELLOW = "\033[0;33m"
CYAN   = "\033[0;36m"
BOLD   = "\033[1m"
DIM    = "\033[2m"
RESET  = "\033[0m"


def section(title: str) -> None:
    print(f"\n{CYAN}{'═' * 60}{RESET}")
    print(f"{CYAN}  {title}{RESET}")
    print(f"{CYAN}{'═' * 60}{RESET}")


def pass_fail(ok: bool) -> str:
    return f"{GREEN}✓ PASS{RESET}" if ok else f"{RED}✗ FAIL{RESET}"


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


# ── Config from flags ─────────────────────────────────────────────────────────

def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """TrainConfig fields given on the command line; unset flags stay None."""
    flags = {
        "sampler":         getattr(args, "sampler", None),
        "lam":             getattr(args, "lam", None),
        "seed":            getattr(args, "seed", None),
        "max_epochs":      getattr(args, "epochs", None),
        "batch_size":      getattr(args, "batch_size", None),
        "layer_sizes":     getattr(args, "layer_sizes", None),
        "hidden":          getattr(args, "hidden", None),
        "learning_rate":   getattr(args, "lr", None),
        "node_wise_k":     getattr(args, "node_wise_k", None),
        "node_wise_mode":  getattr(args, "node_wise_mode", None),
        "skip_weighting":  getattr(args, "skip_weighting", None),
        "norm":            getattr(args, "norm", None),
        "variance_layers": getattr(args, "variance_layers", None),
    }
    # store_true flags only override when switched on
    for name in ("skip", "two_hop", "attention", "deterministic"):
        if getattr(args, name, False):
            flags[name] = True
    return flags


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    manifest_path = getattr(args, "from_manifest", None)
    if manifest_path:
        base = RunManifest.read(manifest_path).config
        updates = {k: v for k, v in _overrides(args).items() if v is not None}
        try:
            return TrainConfig(**{**base.model_dump(), **updates})
        except ValidationError as exc:
            raise ConfigError(str(exc.errors()[0]["msg"])) from exc
    if not args.dataset:
        raise ConfigError("--dataset is required (or --from-manifest)")
    return build_config(args.dataset, config_file=args.config, preset=args.preset,
                        overrides=_overrides(args))


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    out = Path(args.out) if args.out else (
        runs_dir() / f"{Path(config.dataset).name}-{config.sampler}-seed{config.seed}")

    print(f"\n{BOLD}AdaptGCN {__version__} – train{RESET}")
    print(f"  Dataset:  {config.dataset}")
    print(f"  Sampler:  {config.sampler}  sizes={config.plan_sizes}  batch={config.batch_size}")
    print(f"  Flags:    skip={config.skip}  two_hop={config.two_hop}  attention={config.attention}  λ={config.lam}")
    print(f"  Output:   {out}")

    result, manifest = train_and_save(config, out)
    best = result.best_record
    if best is None:
        print(f"\n{YELLOW}⚠ No epochs run (max_epochs = 0); initial parameters saved{RESET}")
    else:
        print(f"\n  {GREEN}✅ best epoch {best.epoch}{RESET}: "
              f"val {best.val_acc:.4f}  test {best.test_acc:.4f}  ({len(result.records)} epochs)")
    if result.fallbacks:
        print(f"  {YELLOW}⚠ {result.fallbacks} adaptive layer(s) fell back to q ∝ Σ p{RESET}")
    for name, path in manifest.outputs.items():
        print(f"  {DIM}{name:<9} {path}{RESET}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    params, saved = load_snapshot(args.snapshot)
    if args.dataset:
        config = (saved.model_copy(update={"dataset": args.dataset}) if saved is not None
                  else build_config(args.dataset))
    elif saved is not None:
        config = saved
    else:
        raise ConfigError("snapshot carries no config; pass --dataset")

    data = TrainingData.prepare(config)
    index = data.raw.splits[args.split]
    if index.size == 0:
        raise InputError(f"split '{args.split}' is empty")
    acc = evaluate(params, data.operator, data.features, data.labels, index)
    print(f"\n{BOLD}AdaptGCN – evaluate{RESET}")
    print(f"  Snapshot: {args.snapshot}")
    print(f"  Dataset:  {config.dataset} ({data.operator.operator})")
    print(f"  {GREEN}✅ {args.split} accuracy {acc:.4f}{RESET}  over {index.size} nodes")
    return EXIT_OK


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    path = resolve_dataset(args.path)
    report = validate_dataset(path)
    section(f"Dataset  {path}")
    for key, value in report.stats.items():
        print(f"  {key:<13} {value}")
    if report.ok:
        print(f"\n  {GREEN}✅ all invariants hold{RESET}")
        return EXIT_OK
    for issue in report.issues:
        print(f"  {RED}❌ {issue}{RESET}")
    return EXIT_DATASET


def cmd_bench(args: argparse.Namespace) -> int:
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    unknown = [s for s in samplers if s not in STRATEGIES]
    if unknown or not samplers:
        raise ConfigError(f"unknown sampler '{(unknown or [''])[0]}' (valid: {', '.join(STRATEGIES)})")
    base = _config_from_args(args)

    section(f"Sampler benchmark  {base.dataset}  ({args.epochs} epochs)")
    try:
        rows = benchmark(base, samplers, args.epochs, n_jobs=args.jobs)
        check_failed = None
    except BenchmarkCheckError as exc:
        rows, check_failed = exc.rows, exc
    print(f"  {'sampler':<10} {'s/epoch':>9} {'nodes/batch':>12}  {'layers':<18} {'test acc':>8}")
    for r in rows:
        print(f"  {r.sampler:<10} {r.seconds_per_epoch:>9.3f} {r.nodes_per_batch:>12}  "
              f"{r.layer_counts:<18} {r.test_acc:>8.4f}")
    print(f"\n  layer-wise < node-wise nodes/batch   {pass_fail(layer_wise_is_lighter(rows))}")

    out = Path(args.out) if args.out else runs_dir() / f"bench-{Path(base.dataset).name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out)
    print(f"  {DIM}csv       {out}{RESET}")
    if check_failed is not None:
        logger.error("benchmark check failed: %s", check_failed)
        return EXIT_SELFTEST
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    grad_sign = -1.0 if args.inject_grad_sign_error else 1.0
    report = run_selftest(only=args.filter, seed=args.seed, grad_sign=grad_sign)

    section("Self-test oracles" + (f"  (filter: {args.filter})" if args.filter else ""))
    for r in report.results:
        detail = f"  {DIM}{r.detail}{RESET}" if r.detail else ""
        print(f"  {r.name:<52} {r.value:>11.3e} ≤ {r.limit:<8.1e} {pass_fail(r.passed)}{detail}")
    failed = [r for r in report.results if not r.passed]
    if not report.results:
        print(f"\n  {YELLOW}⚠ no oracle matched '{args.filter}'{RESET}")
        return EXIT_SELFTEST
    if failed:
        print(f"\n  {RED}❌ {len(failed)} of {len(report.results)} checks failed{RESET}")
        return EXIT_SELFTEST
    print(f"\n  {GREEN}✅ all {len(report.results)} checks passed{RESET}")
    return EXIT_OK


# ── Parser ────────────────────────────────────────────────────────────────────

def _add_config_flags(p: argparse.ArgumentParser, dataset_required: bool = False) -> None:
    p.add_argument("--dataset", required=dataset_required, metavar="DIR",
                   help="dataset directory, or a name under $ADAPTGCN_DATA_DIR")
    p.add_argument("--config", metavar="YAML", help="flat key: value file of TrainConfig fields")
    p.add_argument("--preset", choices=["cora", "citeseer", "pubmed", "reddit"],
                   help="defaults to use (default: picked from the dataset name)")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="write 0 seconds so repeated runs give byte-identical metrics")
    p.add_argument("--skip", action="store_true", help="skip connection to the top layer")
    p.add_argument("--two-hop", dest="two_hop", action="store_true", help="propagate with Â + Â²")
    p.add_argument("--attention", action="store_true", help="attention weights in place of Â")
    p.add_argument("--lambda", dest="lam", type=float, metavar="F", help="variance weight λ")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--layer-sizes", dest="layer_sizes", type=_int_list, metavar="N,N",
                   help="sampled nodes per layer, top first")
    p.add_argument("--hidden", type=_int_list, metavar="H", help="hidden dims (depth − 1 values)")
    p.add_argument("--lr", type=float)
    p.add_argument("--node-wise-k", dest="node_wise_k", type=int)
    p.add_argument("--node-wise-mode", dest="node_wise_mode", choices=["uniform", "proportional"])
    p.add_argument("--skip-weighting", dest="skip_weighting", choices=["verbatim", "importance"])
    p.add_argument("--norm", choices=["l2", "l1"])
    p.add_argument("--variance-layers", dest="variance_layers", choices=["top", "all"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptgcn",
        description="AdaptGCN – GCN training with adaptive layer-wise sampling",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")
    parser.add_argument("--version", action="version", version=f"adaptgcn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--sampler", metavar="ID", help=f"one of {', '.join(STRATEGIES)}")
    p.add_argument("--epochs", type=int, metavar="N", help="max epochs")
    p.add_argument("--out", metavar="DIR", help="output directory (default: $ADAPTGCN_RUNS_DIR/...)")
    p.add_argument("--from-manifest", dest="from_manifest", metavar="JSON",
                   help="repeat the run recorded in a manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a snapshot")
    p.add_argument("--snapshot", required=True, metavar="FILE")
    p.add_argument("--dataset", metavar="DIR", help="override the dataset recorded in the snapshot")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    v = dsub.add_parser("validate", help="parse and check a dataset directory")
    v.add_argument("path", metavar="DIR")
    v.set_defaults(func=cmd_dataset_validate)

    p = sub.add_parser("bench", help="time several samplers on one dataset")
    _add_config_flags(p, dataset_required=True)
    p.add_argument("--samplers", default=",".join(STRATEGIES), metavar="A,B")
    p.add_argument("--epochs", type=int, default=10, metavar="N")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes (joblib)")
    p.add_argument("--out", metavar="CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="run the oracle suite")
    p.add_argument("--filter", metavar="NAME", help="oracle name fragment or group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="accepted for symmetry; oracles are seeded")
    p.add_argument("--inject-grad-sign-error", dest="inject_grad_sign_error", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def _configure_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else os.environ.get("ADAPTGCN_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, InputError) as exc:
        print(f"{RED}❌ configuration error: {exc}{RESET}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"{RED}❌ dataset error: {exc}{RESET}", file=sys.stderr)
        return EXIT_DATASET
    except NumericDivergenceError as exc:
        print(f"{RED}❌ {exc}{RESET}", file=sys.stderr)
        if exc.record is not None:
            print(f"{DIM}   last record: {exc.record}{RESET}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"{RED}❌ numeric error: {exc}{RESET}", file=sys.stderr)
        return EXIT_NUMERIC
    except AdaptGcnError as exc:
        print(f"{RED}❌ {exc}{RESET}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
