"""
graph_store.py
==============
Dataset loading and the renormalised adjacency Â = D̃^{-1/2}(A + I)D̃^{-1/2}.

On-disk format (one directory per dataset)
------------------------------------------
  edges.tsv      two tab-separated integer columns, one undirected edge per line
  features.csv   N rows of D comma-separated reals ('.' decimal separator)
  labels.txt     N integers (−1 marks an unlabeled node)
  splits.json    {"train": [...], "val": [...], "test": [...]} 0-based indices
  meta.json      optional {"name", "num_nodes", "num_edges", "num_classes",
                 "num_features", "source_edges"}; counts are checked when
                 present. num_edges is the line count of edges.tsv;
                 source_edges is the edge count of the upstream release
                 (e.g. citation lines) and is what |E| reports.

Duplicate edges collapse to one; input self-loops are dropped (the
renormalisation adds its own).

Public API
----------
  raw   = load_dataset("data/cora")
  graph = normalize(raw)
  graph.conditional_prob(v, u)         # p(u|v) = â(v,u) / N(v)
  report = validate_dataset("data/cora")
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import (
    DatasetError,
    DatasetParseError,
    DatasetValidationError,
    InputError,
    MemoryGuardError,
)
from .tensor_core import SparseMatrix

logger = logging.getLogger("adaptgcn.graph_store")

DATASET_FORMAT = "tsv-dir"
SPLIT_NAMES = ("train", "val", "test")

_LINE_RE = re.compile(r"line (\d+)")


# ── Raw dataset ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RawDataset:
    name:           str
    num_nodes:      int
    edges:          np.ndarray             # (E, 2) u < v, unique, no self-loops
    raw_edge_count: int                    # |E| as released upstream; edge lines by default
    features:       np.ndarray             # (N, D) float64
    labels:         np.ndarray             # (N,) int64, −1 = unlabeled
    splits:         Dict[str, np.ndarray]  # train / val / test index arrays
    num_classes:    int

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def train_idx(self) -> np.ndarray:
        return self.splits["train"]

    @property
    def val_idx(self) -> np.ndarray:
        return self.splits["val"]

    @property
    def test_idx(self) -> np.ndarray:
        return self.splits["test"]

    def summary(self) -> Dict[str, object]:
        return {
            "name":         self.name,
            "nodes":        self.num_nodes,
            "edges":        self.raw_edge_count,
            "unique_edges": int(len(self.edges)),
            "classes":      self.num_classes,
            "features":     self.num_features,
            "split_sizes":  {k: int(len(v)) for k, v in self.splits.items()},
            "avg_degree":   round(len(self.edges) / max(self.num_nodes, 1), 3),
        }


def _canonical_edges(pairs: np.ndarray) -> np.ndarray:
    """Sort endpoints, drop self-loops and duplicates."""
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    canon = np.stack([lo[keep], hi[keep]], axis=1)
    if canon.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(canon, axis=0).astype(np.int64)


def make_dataset(
    edges:       Union[np.ndarray, List[Tuple[int, int]]],
    features:    np.ndarray,
    labels:      np.ndarray,
    splits:      Optional[Dict[str, np.ndarray]] = None,
    name:        str = "inline",
    num_classes: Optional[int] = None,
    raw_edge_count: Optional[int] = None,
) -> RawDataset:
    """Build and validate a RawDataset from in-memory arrays.

    ``raw_edge_count`` defaults to the number of input pairs.
    """
    pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = int(features.shape[0])
    if splits is None:
        splits = {"train": np.arange(n), "val": np.zeros(0, dtype=np.int64),
                  "test": np.zeros(0, dtype=np.int64)}
    splits = {k: np.asarray(splits.get(k, []), dtype=np.int64) for k in SPLIT_NAMES}
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    raw = RawDataset(
        name=name,
        num_nodes=n,
        edges=_canonical_edges(pairs),
        raw_edge_count=int(len(pairs) if raw_edge_count is None else raw_edge_count),
        features=features,
        labels=labels,
        splits=splits,
        num_classes=int(num_classes),
    )
    _check_raw(raw, pairs)
    return raw


def _check_raw(raw: RawDataset, pairs: np.ndarray) -> None:
    n = raw.num_nodes
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise DatasetValidationError(f"edge endpoint outside [0, {n})")
    if raw.labels.shape[0] != n:
        raise DatasetValidationError(f"{raw.labels.shape[0]} labels for {n} nodes")
    if not np.all(np.isfinite(raw.features)):
        raise DatasetValidationError("features contain NaN / Inf")
    labeled = raw.labels >= 0
    if np.any(raw.labels < -1) or np.any(raw.labels[labeled] >= raw.num_classes):
        raise DatasetValidationError(f"label outside [0, {raw.num_classes})")

    seen: Dict[int, str] = {}
    for split, idx in raw.splits.items():
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DatasetValidationError(f"split '{split}' has an index outside [0, {n})")
        if np.any(raw.labels[idx] < 0):
            raise DatasetValidationError(f"split '{split}' contains unlabeled nodes")
        for i in np.unique(idx):
            other = seen.get(int(i))
            if other is not None:
                raise DatasetValidationError(f"node {int(i)} is in both '{other}' and '{split}'")
            seen[int(i)] = split


# ── Parsing ───────────────────────────────────────────────────────────────────

def _first_bad_row(frame: pd.DataFrame) -> int:
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    return int(np.argmax(bad)) + 1 if bad.any() else 0


def _read_table(path: Path, sep: str, width: Optional[int], integral: bool) -> np.ndarray:
    """
    Read a headerless numeric table with pandas. On failure, re-read as text
    to pin the offending line number.
    """
    if not path.exists():
        raise DatasetParseError(str(path), None, "file not found")
    if path.stat().st_size == 0:
        return np.zeros((0, width or 0))
    try:
        values = pd.read_csv(path, sep=sep, header=None, dtype=np.float64,
                             skip_blank_lines=False).to_numpy()
    except pd.errors.ParserError as exc:
        match = _LINE_RE.search(str(exc))
        raise DatasetParseError(str(path), int(match.group(1)) if match else None,
                                "inconsistent number of fields") from exc
    except ValueError as exc:
        frame = pd.read_csv(path, sep=sep, header=None, dtype=str,
                            keep_default_na=False, skip_blank_lines=False)
        raise DatasetParseError(str(path), _first_bad_row(frame) or None,
                                "non-numeric value") from exc

    if np.isnan(values).any():
        line = int(np.argmax(np.isnan(values).any(axis=1))) + 1
        raise DatasetParseError(str(path), line, "missing or NaN value")
    if not np.all(np.isfinite(values)):
        line = int(np.argmax(~np.isfinite(values).all(axis=1))) + 1
        raise DatasetParseError(str(path), line, "infinite value")
    if width is not None and values.shape[1] != width:
        raise DatasetParseError(str(path), 1, f"expected {width} column(s), found {values.shape[1]}")
    if integral:
        frac = values != np.floor(values)
        if frac.any():
            raise DatasetParseError(str(path), int(np.argmax(frac.any(axis=1))) + 1, "non-integer value")
    return values


def load_dataset(path: Union[str, Path], format: str = DATASET_FORMAT) -> RawDataset:
    """Load a dataset directory. Raises DatasetParseError / DatasetValidationError."""
    if format != DATASET_FORMAT:
        raise InputError(f"unknown dataset format '{format}' (expected '{DATASET_FORMAT}')")
    root = Path(path)
    if not root.is_dir():
        raise DatasetParseError(str(root), None, "dataset directory not found")

    features = _read_table(root / "features.csv", ",", None, integral=False)
    labels = _read_table(root / "labels.txt", r"\s+", 1, integral=True).astype(np.int64).reshape(-1)
    pairs = _read_table(root / "edges.tsv", "\t", 2, integral=True).astype(np.int64)

    splits_path = root / "splits.json"
    try:
        split_doc = json.loads(splits_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetParseError(str(splits_path), None, "file not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetParseError(str(splits_path), exc.lineno, exc.msg) from exc
    missing = [k for k in SPLIT_NAMES if k not in split_doc]
    if missing:
        raise DatasetParseError(str(splits_path), None, f"missing split(s): {', '.join(missing)}")

    meta: Dict[str, object] = {}
    meta_path = root / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetParseError(str(meta_path), exc.lineno, exc.msg) from exc

    num_classes = meta.get("num_classes")
    source_edges = meta.get("source_edges")
    raw = make_dataset(
        edges=pairs,
        features=features,
        labels=labels,
        splits={k: np.asarray(split_doc[k], dtype=np.int64) for k in SPLIT_NAMES},
        name=str(meta.get("name", root.name)),
        num_classes=int(num_classes) if num_classes is not None else None,
        raw_edge_count=int(source_edges) if source_edges is not None else None,
    )

    expected = {
        "num_nodes":    raw.num_nodes,
        "num_edges":    int(len(pairs)),
        "num_classes":  raw.num_classes,
        "num_features": raw.num_features,
    }
    for key, actual in expected.items():
        if key in meta and int(meta[key]) != actual:
            raise DatasetValidationError(f"meta.json says {key}={meta[key]}, files give {actual}")

    logger.info("Loaded %s: N=%d |E|=%d classes=%d D=%d",
                raw.name, raw.num_nodes, raw.raw_edge_count, raw.num_classes, raw.num_features)
    return raw


def save_dataset(raw: RawDataset, path: Union[str, Path]) -> Path:
    """Write ``raw`` in the directory format; reloading gives identical arrays."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(raw.edges).to_csv(root / "edges.tsv", sep="\t", header=False, index=False)
    pd.DataFrame(raw.features).to_csv(root / "features.csv", header=False, index=False,
                                      float_format="%.17g")
    pd.DataFrame(raw.labels).to_csv(root / "labels.txt", header=False, index=False)
    (root / "splits.json").write_text(json.dumps({k: raw.splits[k].tolist() for k in SPLIT_NAMES}))
    meta = {
        "name":         raw.name,
        "num_nodes":    raw.num_nodes,
        "num_edges":    int(len(raw.edges)),
        "source_edges": raw.raw_edge_count,
        "num_classes":  raw.num_classes,
        "num_features": raw.num_features,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    return root


def dataset_fingerprint(path: Union[str, Path]) -> str:
    """Git-style content hash: sha1 over the sorted (name, blob-sha1) pairs."""
    root = Path(path)
    tree = hashlib.sha1()
    for file in sorted(p for p in root.iterdir() if p.is_file()):
        data = file.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        tree.update(f"{file.name} {blob}\n".encode())
    return tree.hexdigest()


# ── Normalised graph ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NormalizedGraph:
    """
    Propagation operator plus the sampling distribution it induces.

    ``adjacency`` holds the weights used in propagation (Â, Â + Â², or
    attention values); ``transition`` holds p(u|v), each row summing to 1.
    For the plain renormalised graph ``transition = diag(1/N(v)) Â``.
    """
    adjacency:   SparseMatrix
    transition:  SparseMatrix
    row_mass:    np.ndarray          # N(v) = Σ_u adjacency(v, u)
    col_sq_norm: np.ndarray          # ‖op[:, u]‖², the IID importance weights
    operator:    str = "renormalized"
    structural:  Optional[SparseMatrix] = None   # op values before attention reweighting
    meta:        Dict[str, object] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.rows

    @property
    def support(self) -> SparseMatrix:
        """Propagation weights of the unweighted operator; the skip path and
        the aggregation pattern are built from these."""
        return self.structural if self.structural is not None else self.adjacency

    @cached_property
    def degree(self) -> np.ndarray:
        """Neighbour-list length (self-loop included)."""
        return np.diff(self.transition.indptr)

    @cached_property
    def transition_cumsum(self) -> np.ndarray:
        return np.cumsum(self.transition.data)

    def conditional_prob(self, v: int, u: int) -> float:
        self._check_node(v)
        self._check_node(u)
        ids, probs = self.transition.row(v)
        pos = np.searchsorted(ids, u)
        if pos < len(ids) and ids[pos] == u:
            return float(probs[pos])
        return 0.0

    def candidate_block(self, parents: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
        """
        Union of the parents' neighbourhoods and the (parents × candidates)
        block of p(u|v). p is zero outside this union, so sums over all N
        nodes reduce to sums over the candidates exactly.
        """
        rows = self.transition.csr[parents]
        candidates = np.unique(rows.indices)
        return candidates, rows[:, candidates].tocsr()

    def _check_node(self, v: int) -> None:
        if not 0 <= int(v) < self.num_nodes:
            raise InputError(f"node {v} outside [0, {self.num_nodes})")


def conditional_prob(g: NormalizedGraph, v: int, u: int) -> float:
    """p(u|v) = â(v,u) / N(v)."""
    return g.conditional_prob(v, u)


def _col_sq_norm(op: sp.spmatrix) -> np.ndarray:
    return np.asarray(op.multiply(op).sum(axis=0)).reshape(-1)


def _graph_from_operator(op: sp.spmatrix, col_sq_norm: np.ndarray, operator: str,
                         fallback: Optional[SparseMatrix] = None,
                         structural: Optional[SparseMatrix] = None) -> NormalizedGraph:
    adjacency = SparseMatrix(op)
    row_mass = np.asarray(adjacency.csr.sum(axis=1)).reshape(-1)
    if fallback is None:
        transition = SparseMatrix(sp.diags(1.0 / row_mass) @ adjacency.csr)
    else:
        zero = row_mass <= 0
        safe = np.where(zero, 1.0, row_mass)
        scaled = sp.diags(np.where(zero, 0.0, 1.0 / safe)) @ adjacency.csr
        transition = SparseMatrix(scaled + sp.diags(zero.astype(float)) @ fallback.csr)
    return NormalizedGraph(adjacency=adjacency, transition=transition, row_mass=row_mass,
                           col_sq_norm=col_sq_norm, operator=operator, structural=structural)


def normalize(raw: RawDataset) -> NormalizedGraph:
    """Â = D̃^{-1/2}(A + I)D̃^{-1/2}, D̃ the degree matrix of A + I."""
    n = raw.num_nodes
    u, v = raw.edges[:, 0], raw.edges[:, 1]
    rows = np.concatenate([u, v, np.arange(n)])
    cols = np.concatenate([v, u, np.arange(n)])
    a_tilde = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a_tilde.sum_duplicates()
    a_tilde.data[:] = 1.0
    deg = np.asarray(a_tilde.sum(axis=1)).reshape(-1)
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    a_hat = (d_inv_sqrt @ a_tilde @ d_inv_sqrt).tocsr()
    return _graph_from_operator(a_hat, _col_sq_norm(a_hat), "renormalized")


def two_hop_graph(g: NormalizedGraph, max_nodes: int = 25_000) -> NormalizedGraph:
    """Operator Â + Â² (2-order power expansion). Refuses above ``max_nodes``."""
    if g.num_nodes > max_nodes:
        raise MemoryGuardError(f"two-hop operator refused: N={g.num_nodes} > cap {max_nodes}")
    a_hat = g.adjacency.csr
    op = (a_hat + a_hat @ a_hat).tocsr()
    logger.info("Built Â + Â² operator: nnz %d → %d", a_hat.nnz, op.nnz)
    return _graph_from_operator(op, _col_sq_norm(op), "two_hop")


def attention_graph(g: NormalizedGraph, edge_weights: np.ndarray) -> NormalizedGraph:
    """
    Replace Â's values by attention weights on the same support. Rows whose
    attention mass is zero keep Â's p(u|v) for sampling and propagate nothing.
    """
    base = g.support.csr
    weights = np.asarray(edge_weights, dtype=np.float64).reshape(-1)
    if weights.size != base.nnz:
        raise InputError(f"{weights.size} attention weights for {base.nnz} edges")
    op = sp.csr_matrix((weights, base.indices.copy(), base.indptr.copy()), shape=base.shape)
    return _graph_from_operator(op, g.col_sq_norm, "attention",
                                fallback=g.transition, structural=g.support)


def edge_list(g: NormalizedGraph) -> Tuple[np.ndarray, np.ndarray]:
    """(rows, cols) of the structural support in CSR order."""
    csr = g.support.csr
    rows = np.repeat(np.arange(csr.shape[0]), np.diff(csr.indptr))
    return rows, csr.indices.astype(np.int64)


# ── Validation report ─────────────────────────────────────────────────────────

@dataclass
class DatasetReport:
    path:   str
    stats:  Dict[str, object] = field(default_factory=dict)
    issues: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_dataset(path: Union[str, Path], tol: float = 1e-10) -> DatasetReport:
    """Load, normalise and check every invariant; never raises for bad data."""
    report = DatasetReport(path=str(path))
    try:
        raw = load_dataset(path)
    except DatasetError as exc:
        report.issues.append(str(exc))
        return report
    report.stats = raw.summary()

    g = normalize(raw)
    a_hat = g.adjacency.csr
    if a_hat.nnz and abs(a_hat - a_hat.T).max() > tol:
        report.issues.append("Â is not symmetric")
    if np.any(a_hat.data < 0):
        report.issues.append("Â has negative entries")
    if np.any(a_hat.diagonal() <= 0):
        report.issues.append("Â has a non-positive diagonal entry")
    if np.any(g.row_mass <= 0):
        report.issues.append("a node has zero row mass")
    row_sums = np.asarray(g.transition.csr.sum(axis=1)).reshape(-1)
    worst = float(np.max(np.abs(row_sums - 1.0))) if row_sums.size else 0.0
    if worst > tol:
        report.issues.append(f"p(·|v) rows deviate from 1 by {worst:.3e}")
    return report
