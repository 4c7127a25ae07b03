"""
benchmark.py
============
Per-epoch wall time and sampled-node counts for a set of samplers on one
dataset. Every sampler trains for a fixed number of epochs (early stopping
off) from the same seed; the node counts per batch are exact integers taken
from a plan over the first full-size batch.

Configurations are independent, so they may run in separate worker
processes (``n_jobs`` > 1, joblib).
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import ValidationError

from ..config import TrainConfig
from ..errors import BenchmarkCheckError, ConfigError
from ..graph_store import RawDataset
from ..samplers import LAYER_WISE
from .trainer import TrainingData, init_params, plan_batch, train

logger = logging.getLogger("adaptgcn.benchmark")

BENCH_COLUMNS = ["sampler", "epochs", "seconds_per_epoch", "nodes_per_batch",
                 "layer_counts", "nodes_per_epoch", "test_acc"]


@dataclass
class BenchRow:
    sampler:           str
    epochs:            int
    seconds_per_epoch: float
    nodes_per_batch:   int
    layer_counts:      str      # e.g. "256+128+128"
    nodes_per_epoch:   int
    test_acc:          float


def batch_node_counts(config: TrainConfig, raw: Optional[RawDataset] = None) -> List[int]:
    """Slots per layer for one batch of ``batch_size`` training targets."""
    data = TrainingData.prepare(config, raw)
    rng = np.random.default_rng(config.seed)
    params = init_params(config, data.raw, rng)
    batch = rng.permutation(data.raw.train_idx)[: config.batch_size]
    return plan_batch(config, data, params, batch, rng).node_counts


def _bench_one(config: TrainConfig, raw: Optional[RawDataset]) -> BenchRow:
    counts = batch_node_counts(config, raw)
    result = train(config, raw=raw)
    seconds = [r.seconds for r in result.records]
    last = result.records[-1] if result.records else None
    return BenchRow(
        sampler=config.sampler,
        epochs=len(result.records),
        seconds_per_epoch=statistics.mean(seconds) if seconds else 0.0,
        nodes_per_batch=int(sum(counts)),
        layer_counts="+".join(str(c) for c in counts),
        nodes_per_epoch=last.nodes_sampled if last else 0,
        test_acc=last.test_acc if last else 0.0,
    )


def benchmark(base: TrainConfig, samplers: Sequence[str], epochs: int,
              raw: Optional[RawDataset] = None, n_jobs: int = 1,
              require_lighter: bool = True) -> List[BenchRow]:
    """One row per sampler, in the order given.

    Raises BenchmarkCheckError (rows attached) when a layer-wise sampler
    touches at least as many nodes per batch as a node-wise one.
    """
    try:
        configs = [
            TrainConfig(**{**base.model_dump(), "sampler": s, "max_epochs": epochs,
                           "early_stop_window": epochs + 1})
            for s in samplers
        ]
    except ValidationError as exc:
        raise ConfigError(str(exc.errors()[0]["msg"])) from exc
    if n_jobs == 1 or len(configs) == 1:
        rows = [_bench_one(cfg, raw) for cfg in configs]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(_bench_one)(cfg, raw) for cfg in configs)

    if require_lighter and not layer_wise_is_lighter(rows):
        counts = ", ".join(f"{r.sampler}={r.nodes_per_batch}" for r in rows)
        logger.error("layer-wise not lighter than node-wise: %s", counts)
        raise BenchmarkCheckError(
            f"layer-wise sampler touched at least as many nodes per batch as node-wise ({counts})",
            rows=list(rows))
    return rows


def layer_wise_is_lighter(rows: Sequence[BenchRow]) -> bool:
    """Layer-wise rows sample fewer nodes per batch than every node-wise row."""
    node_wise = [r.nodes_per_batch for r in rows if r.sampler == "node_wise"]
    layer_wise = [r.nodes_per_batch for r in rows if r.sampler in LAYER_WISE]
    if not node_wise or not layer_wise:
        return True
    return max(layer_wise) < min(node_wise)


def write_bench_csv(rows: Sequence[BenchRow], path: Union[str, Path]) -> Path:
    frame = pd.DataFrame([asdict(r) for r in rows], columns=BENCH_COLUMNS)
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path
