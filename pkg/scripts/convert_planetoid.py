#!/usr/bin/env python3
"""
AdaptGCN – Planetoid converter
==============================
Turns the pickled Planetoid files (ind.<name>.x / y / tx / ty / allx / ally /
graph / test.index, as distributed with the original GCN code) into the
dataset directory read by ``gcn_pipeline.graph_store.load_dataset``.

Usage:
  python3 scripts/convert_planetoid.py --raw planetoid/ --name cora --out data/cora
  python3 scripts/convert_planetoid.py --raw planetoid/ --name citeseer --out data/citeseer --split public

Splits:
  fastgcn  validation and test indices unchanged, every other labelled node trains (default)
  public   the 20-per-class training set of the original release
"""

import argparse
import os
import pickle
import sys
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "gcn-service"))

from gcn_pipeline.errors import DatasetError          # noqa: E402
from gcn_pipeline.graph_store import make_dataset, save_dataset, validate_dataset  # noqa: E402

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")
VAL_SIZE = 500

# ── ANSI colours ──────────────────────────────────────────────────────────────
GREEN  = "\033[0;32m"
RED    = "\033[0;31m"
YELLOW = "\033[0;33m"
BOLD   = "\033[1m"
DIM    = "\033[2m"
RESET  = "\033[0m"


def _load_part(raw: Path, name: str, part: str):
    path = raw / f"ind.{name}.{part}"
    if not path.exists():
        sys.exit(f"{RED}✗ missing {path}{RESET}")
    with open(path, "rb") as fh:
        # written under Python 2
        return pickle.load(fh, encoding="latin1")


def _dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def citation_count(entries: Sequence[Tuple[int, int]]) -> int:
    """Citation lines behind a symmetric adjacency list.

    Each citation u→v is listed under both u and v, duplicates kept; a
    self-citation is listed once.
    """
    loops = sum(1 for u, v in entries if u == v)
    return (len(entries) + loops) // 2


def convert(raw: Path, name: str, split: str = "fastgcn") -> Dict[str, object]:
    x, y, tx, ty, allx, ally, graph = (_load_part(raw, name, p) for p in PARTS)
    test_idx: List[int] = [int(line) for line in (raw / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_idx)

    if name == "citeseer":
        # isolated test nodes are missing from tx / ty; pad them with zeros
        full_range = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((len(full_range), x.shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full_range), y.shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        ty = ty_ext

    features = sp.vstack((allx, tx)).tolil()
    features[test_idx, :] = features[test_sorted, :]
    onehot = np.vstack((_dense(ally), _dense(ty)))
    onehot[test_idx, :] = onehot[test_sorted, :]

    labels = np.where(onehot.sum(axis=1) > 0, onehot.argmax(axis=1), -1)
    n = features.shape[0]
    edges = [(int(u), int(v)) for u, nbrs in graph.items() for v in nbrs if int(v) < n and int(u) < n]

    val = np.arange(len(y), len(y) + VAL_SIZE)
    test = test_sorted[labels[test_sorted] >= 0]
    if split == "public":
        train = np.arange(len(y))
    else:
        taken = np.zeros(n, dtype=bool)
        taken[val] = taken[test] = True
        train = np.flatnonzero(~taken & (labels >= 0))

    dataset = make_dataset(edges, _dense(features), labels,
                           {"train": train, "val": val, "test": test},
                           name=name, num_classes=onehot.shape[1],
                           raw_edge_count=citation_count(edges))
    return {"dataset": dataset, "summary": dataset.summary()}


def main() -> None:
    parser = argparse.ArgumentParser(
        description="AdaptGCN – Planetoid converter",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--raw",   required=True, metavar="DIR", help="directory with ind.<name>.* files")
    parser.add_argument("--name",  required=True, choices=["cora", "citeseer", "pubmed"])
    parser.add_argument("--out",   required=True, metavar="DIR")
    parser.add_argument("--split", choices=["fastgcn", "public"], default="fastgcn")
    args = parser.parse_args()

    print(f"\n{BOLD}AdaptGCN – Planetoid converter{RESET}")
    print(f"  Source: {args.raw}  ({args.name}, {args.split} split)")
    try:
        result = convert(Path(args.raw), args.name, args.split)
    except DatasetError as exc:
        sys.exit(f"{RED}✗ {exc}{RESET}")

    out = save_dataset(result["dataset"], args.out)
    for key, value in result["summary"].items():
        print(f"  {DIM}{key:<13}{RESET} {value}")

    report = validate_dataset(out)
    if report.ok:
        print(f"\n  {GREEN}✓ written to {out}{RESET}")
    else:
        for issue in report.issues:
            print(f"  {YELLOW}⚠ {issue}{RESET}")
    print()


if __name__ == "__main__":
    main()
