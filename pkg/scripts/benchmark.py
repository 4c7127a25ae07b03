#!/usr/bin/env python3
"""
AdaptGCN – Sampler Benchmark Suite
==================================
Per-epoch training time and sampled-node counts for the four samplers on one
dataset, plus the node-count accounting checks.

Usage:
  python3 scripts/benchmark.py --dataset data/pubmed
  python3 scripts/benchmark.py --dataset data/cora --epochs 5 --jobs 4
  python3 scripts/benchmark.py --dataset data/cora --samplers adaptive,node_wise --csv runs/bench.csv

Metrics reported:
  1. Nodes per batch         – exact: batch + n + n (layer-wise), batch·(1 + k + k²) (node-wise)
  2. Layer-wise vs node-wise – layer-wise must touch fewer nodes per batch
  3. Seconds per epoch       – informational; expected adaptive < node_wise < full at Pubmed scale
  4. Test accuracy           – after the fixed number of epochs (no early stopping)
"""

import argparse
import os
import sys
from datetime import datetime
from typing import List

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "gcn-service"))

from dotenv import load_dotenv                                   # noqa: E402

load_dotenv(os.path.join(os.path.dirname(__file__), "..", "gcn-service", ".env"))

from gcn_pipeline.config import TrainConfig, build_config        # noqa: E402
from gcn_pipeline.errors import AdaptGcnError, BenchmarkCheckError  # noqa: E402
from gcn_pipeline.samplers import LAYER_WISE, STRATEGIES         # noqa: E402
from gcn_pipeline.training import (                              # noqa: E402
    BenchRow,
    benchmark,
    layer_wise_is_lighter,
    write_bench_csv,
)

# ── Defaults ──────────────────────────────────────────────────────────────────
DEFAULT_EPOCHS = 3

# ── ANSI colours ──────────────────────────────────────────────────────────────
GREEN  = "\033[0;32m"
RED    = "\033[0;31m"
YELLOW = "\033[0;33m"
CYAN   = "\033[0;36m"
BOLD   = "\033[1m"
DIM    = "\033[2m"
RESET  = "\033[0m"


# ── Helpers ───────────────────────────────────────────────────────────────────

def section(title: str) -> None:
    print(f"\n{CYAN}{'═' * 60}{RESET}")
    print(f"{CYAN}  {title}{RESET}")
    print(f"{CYAN}{'═' * 60}{RESET}")


def pass_fail(ok: bool) -> str:
    return f"{GREEN}✓ PASS{RESET}" if ok else f"{RED}✗ FAIL{RESET}"


def fmt_s(seconds: float) -> str:
    return f"{seconds * 1000:.1f}ms" if seconds < 1 else f"{seconds:.2f}s"


def expected_counts(config: TrainConfig, sampler: str) -> List[int]:
    """Slots per layer, top first, for a full batch."""
    batch = config.batch_size
    if sampler in LAYER_WISE:
        return [batch, *config.layer_sizes]
    if sampler == "node_wise":
        counts = [batch]
        for _ in range(config.depth):
            counts.append(counts[-1] * config.node_wise_k)
        return counts
    return []   # full: data dependent


# ── Reports ───────────────────────────────────────────────────────────────────

def report_node_counts(config: TrainConfig, rows: List[BenchRow]) -> None:
    section("1. Nodes per batch  (exact)")
    for r in rows:
        expected = expected_counts(config, r.sampler)
        if not expected:
            print(f"  {r.sampler:<10} {r.layer_counts:<22} {DIM}(data dependent){RESET}")
            continue
        ok = r.layer_counts == "+".join(str(c) for c in expected)
        print(f"  {r.sampler:<10} {r.layer_counts:<22} expected {'+'.join(map(str, expected)):<22} {pass_fail(ok)}")

    section("2. Layer-wise vs node-wise")
    print(f"  layer-wise nodes/batch < node-wise   {pass_fail(layer_wise_is_lighter(rows))}")


def report_timing(rows: List[BenchRow]) -> None:
    section("3. Seconds per epoch  (informational)")
    for r in sorted(rows, key=lambda r: r.seconds_per_epoch):
        print(f"  {r.sampler:<10} {fmt_s(r.seconds_per_epoch):>10}   nodes/epoch {r.nodes_per_epoch}")
    by_name = {r.sampler: r.seconds_per_epoch for r in rows}
    if {"adaptive", "node_wise", "full"} <= by_name.keys():
        ordered = by_name["adaptive"] < by_name["node_wise"] < by_name["full"]
        note = "" if ordered else f"  {DIM}(small graphs often invert this){RESET}"
        print(f"\n  adaptive < node_wise < full          {pass_fail(ordered)}{note}")

    section("4. Test accuracy after the fixed epochs")
    for r in rows:
        print(f"  {r.sampler:<10} {r.test_acc:.4f}")


def main() -> None:
    parser = argparse.ArgumentParser(
        description="AdaptGCN – Sampler Benchmark Suite",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--dataset",  required=True, metavar="DIR")
    parser.add_argument("--samplers", default=",".join(STRATEGIES), metavar="A,B",
                        help=f"comma-separated subset of {', '.join(STRATEGIES)}")
    parser.add_argument("--epochs",   type=int, default=DEFAULT_EPOCHS, metavar="N",
                        help=f"epochs per sampler (default: {DEFAULT_EPOCHS})")
    parser.add_argument("--jobs",     type=int, default=1, metavar="N", help="worker processes")
    parser.add_argument("--seed",     type=int, default=0)
    parser.add_argument("--csv",      default=None, metavar="FILE", help="also write the CSV table")
    args = parser.parse_args()

    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    print(f"\n{BOLD}AdaptGCN – Sampler Benchmark{RESET}")
    print(f"  Dataset:  {args.dataset}")
    print(f"  Samplers: {', '.join(samplers)}")
    print(f"  Epochs:   {args.epochs}   Jobs: {args.jobs}")
    print(f"  Time:     {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    try:
        config = build_config(args.dataset, overrides={"seed": args.seed})
        rows = benchmark(config, samplers, args.epochs, n_jobs=args.jobs)
        failed = False
    except BenchmarkCheckError as exc:
        rows, failed = exc.rows, True
    except AdaptGcnError as exc:
        sys.exit(f"\n{RED}✗ {exc}{RESET}")

    report_node_counts(config, rows)
    report_timing(rows)
    if args.csv:
        path = write_bench_csv(rows, args.csv)
        print(f"\n  {DIM}csv written to {path}{RESET}")
    print()
    if failed:
        sys.exit(4)


if __name__ == "__main__":
    main()
