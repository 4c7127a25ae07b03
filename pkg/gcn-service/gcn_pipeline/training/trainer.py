"""
trainer.py
==========
Minibatch training of the sampled GCN with the hybrid loss, early stopping
on validation accuracy and full-graph evaluation.

Per batch
---------
  attention view (optional) → build_network_plan → sampled_forward
  → hybrid_loss (variance penalty for the adaptive sampler) → backward
  → adam_step on every parameter that received a gradient

Per epoch
---------
  one pass over the shuffled training split, then validation / test
  accuracy with the full architecture. Training stops once validation
  accuracy has not improved for ``early_stop_window`` epochs; the best
  validation snapshot is returned.

Outputs (``train_and_save``)
----------------------------
  metrics.csv      epoch,loss_c,loss_var,loss_total,val_acc,test_acc,seconds,nodes_sampled
  model.snapshot   joblib container {format, version, params, shapes, config, flags}
  manifest.json    RunManifest
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import joblib
import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score

from .. import __version__
from ..config import RunManifest, TrainConfig, resolve_dataset
from ..errors import ConfigError, InputError, NumericDivergenceError, NumericError
from ..estimators import ModelParams, full_forward, sampled_forward
from ..graph_store import (
    NormalizedGraph,
    RawDataset,
    dataset_fingerprint,
    load_dataset,
    normalize,
    two_hop_graph,
)
from ..samplers import FallbackCounter, NetworkPlan, attention_view, build_network_plan
from ..tensor_core import AdamState, adam_step
from ..variance import HybridLossReport, hybrid_loss, variance_penalty

logger = logging.getLogger("adaptgcn.trainer")

METRICS_COLUMNS = ["epoch", "loss_c", "loss_var", "loss_total", "val_acc",
                   "test_acc", "seconds", "nodes_sampled"]
SNAPSHOT_FORMAT = "adaptgcn-snapshot"
SNAPSHOT_VERSION = 1


# ── Records ───────────────────────────────────────────────────────────────────

@dataclass
class EpochRecord:
    epoch:         int
    loss_c:        float
    loss_var:      float
    loss_total:    float
    val_acc:       float
    test_acc:      float
    seconds:       float
    nodes_sampled: int


@dataclass
class TrainResult:
    params:       ModelParams
    records:      List[EpochRecord] = field(default_factory=list)
    best_epoch:   Optional[int] = None
    best_val_acc: Optional[float] = None
    fallbacks:    int = 0

    def __iter__(self) -> Iterator:
        """``params, records = train(config)``"""
        return iter((self.params, self.records))

    @property
    def best_record(self) -> Optional[EpochRecord]:
        if self.best_epoch is None:
            return None
        return next(r for r in self.records if r.epoch == self.best_epoch)


@dataclass
class TrainingData:
    """Everything a run reads but never mutates."""
    raw:      RawDataset
    graph:    NormalizedGraph          # Â
    operator: NormalizedGraph          # Â, or Â + Â² with two_hop

    @property
    def features(self) -> np.ndarray:
        return self.raw.features

    @property
    def labels(self) -> np.ndarray:
        return self.raw.labels

    @classmethod
    def prepare(cls, config: TrainConfig, raw: Optional[RawDataset] = None) -> "TrainingData":
        raw = raw if raw is not None else load_dataset(resolve_dataset(config.dataset))
        if raw.train_idx.size == 0:
            raise ConfigError(f"dataset '{raw.name}' has an empty training split")
        g = normalize(raw)
        op = two_hop_graph(g, max_nodes=config.two_hop_max_nodes) if config.two_hop else g
        return cls(raw=raw, graph=g, operator=op)


# ── Evaluation ────────────────────────────────────────────────────────────────

def evaluate(params: ModelParams, g: NormalizedGraph, features: np.ndarray,
             labels: np.ndarray, index) -> float:
    """Accuracy of argmax(full_forward) over ``index``."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InputError("cannot evaluate on an empty index set")
    logits = full_forward(g, features, params).value
    return float(accuracy_score(labels[idx], logits[idx].argmax(axis=1)))


def epochs_to_reach(records: List[EpochRecord], threshold: float,
                    key: str = "test_acc") -> Optional[int]:
    """First epoch whose ``key`` reaches ``threshold``; None if none does."""
    for record in records:
        if getattr(record, key) >= threshold:
            return record.epoch
    return None


# ── One step ──────────────────────────────────────────────────────────────────

def plan_batch(config: TrainConfig, data: TrainingData, params: ModelParams, batch: np.ndarray,
               rng: np.random.Generator, counter: Optional[FallbackCounter] = None) -> NetworkPlan:
    g = data.operator
    if config.attention and config.sampler != "full":
        g = attention_view(g, params.sampler, data.features, config.resolved_attention_n)
    return build_network_plan(
        g, batch, config.plan_sizes, config.sampler, rng,
        params=params.sampler, features=data.features,
        node_wise_mode=config.node_wise_mode, counter=counter,
    )


def train_step(config: TrainConfig, data: TrainingData, params: ModelParams, batch: np.ndarray,
               rng: np.random.Generator, counter: Optional[FallbackCounter] = None
               ) -> Tuple[HybridLossReport, Dict[str, np.ndarray], NetworkPlan]:
    """Loss report, gradients by parameter name and the plan used."""
    plan = plan_batch(config, data, params, batch, rng, counter)
    acts = sampled_forward(plan, data.features, params,
                           detach_sampler=not config.sampler_grad_from_classification,
                           skip_weighting=config.skip_weighting)
    if config.sampler == "adaptive" and config.lam > 0:
        penalty, per_layer = variance_penalty(plan, acts, params, data.features,
                                              layers=config.variance_layers, norm=config.norm)
    else:
        penalty, per_layer = 0.0, []
    report = hybrid_loss(acts.logits, data.labels[plan.targets], penalty, config.lam, per_layer)
    report.loss.backward()
    grads = {name: t.grad for name, t in params.leaves().items() if t.grad is not None}
    return report, grads, plan


def _apply(adam: AdamState, params: ModelParams, grads: Dict[str, np.ndarray]) -> ModelParams:
    arrays = params.arrays()
    arrays.update(adam_step(adam, {k: arrays[k] for k in grads}, grads))
    return params.with_arrays(arrays)


# ── Training loop ─────────────────────────────────────────────────────────────

def init_params(config: TrainConfig, raw: RawDataset, rng: np.random.Generator) -> ModelParams:
    return ModelParams.init(
        raw.num_features, config.hidden, raw.num_classes, rng,
        skip=config.skip, attention=config.attention,
        attention_n=config.resolved_attention_n,
    )


def train(config: TrainConfig, raw: Optional[RawDataset] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train per ``config``; returns the best-validation snapshot and the epoch records."""
    data = TrainingData.prepare(config, raw)
    rng = np.random.default_rng(config.seed)
    params = init_params(config, data.raw, rng)
    adam = AdamState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    counter = FallbackCounter()
    result = TrainResult(params=params)

    train_idx = data.raw.train_idx
    val_idx, test_idx = data.raw.val_idx, data.raw.test_idx
    best_arrays: Optional[Dict[str, np.ndarray]] = None
    stale = 0

    logger.info("Training on %s: sampler=%s sizes=%s batch=%d λ=%.3g",
                data.raw.name, config.sampler, config.plan_sizes, config.batch_size, config.lam)

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(train_idx)
        totals = np.zeros(3)
        batches = 0
        nodes = 0
        try:
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo: lo + config.batch_size]
                report, grads, plan = train_step(config, data, params, batch, rng, counter)
                if not math.isfinite(report.total):
                    raise NumericError(f"non-finite loss {report.total}")
                totals += (report.classification_loss, report.variance_penalty, report.total)
                batches += 1
                nodes += plan.total_sampled
                params = _apply(adam, params, grads)
            val_acc = evaluate(params, data.operator, data.features, data.labels, val_idx) if val_idx.size else 0.0
            test_acc = evaluate(params, data.operator, data.features, data.labels, test_idx) if test_idx.size else 0.0
        except NumericError as exc:
            record = EpochRecord(epoch, math.nan, math.nan, math.nan, math.nan, math.nan,
                                 time.perf_counter() - started, nodes)
            raise NumericDivergenceError(f"training diverged in epoch {epoch}: {exc}", record) from exc

        means = totals / max(batches, 1)
        seconds = 0.0 if config.deterministic else time.perf_counter() - started
        record = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]),
                             val_acc, test_acc, seconds, int(nodes))
        result.records.append(record)
        if on_epoch is not None:
            on_epoch(record)

        fell_back = counter.drain()
        if fell_back:
            logger.warning("epoch %d: %d adaptive layer(s) fell back to q ∝ Σ p (|g| = 0)", epoch, fell_back)
        logger.info("epoch %3d  loss %.4f (c %.4f, var %.4f)  val %.4f  test %.4f",
                    epoch, record.loss_total, record.loss_c, record.loss_var, val_acc, test_acc)

        if result.best_val_acc is None or val_acc > result.best_val_acc:
            result.best_val_acc, result.best_epoch = val_acc, epoch
            best_arrays = params.arrays()
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_window:
                logger.info("Early stop at epoch %d (best %d, val %.4f)",
                            epoch, result.best_epoch, result.best_val_acc)
                break

    result.params = params.with_arrays(best_arrays) if best_arrays is not None else params
    result.fallbacks = counter.total
    return result


# ── Persistence ───────────────────────────────────────────────────────────────

def save_snapshot(params: ModelParams, path: Union[str, Path],
                  config: Optional[TrainConfig] = None) -> Path:
    arrays = params.arrays()
    payload = {
        "format":  SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "params":  arrays,
        "shapes":  {name: list(a.shape) for name, a in arrays.items()},
        "flags":   {"skip": params.gcn.skip, "attention": params.gcn.attention,
                    "attention_n": params.gcn.attention_n},
        "config":  config.model_dump() if config is not None else None,
    }
    path = Path(path)
    joblib.dump(payload, path)
    return path


def load_snapshot(path: Union[str, Path]) -> Tuple[ModelParams, Optional[TrainConfig]]:
    try:
        payload = joblib.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"snapshot not found: {path}") from exc
    except Exception as exc:  # joblib surfaces pickle / zlib errors of every kind
        raise ConfigError(f"cannot read snapshot {path}: {exc}") from exc

    if not isinstance(payload, dict) or payload.get("format") != SNAPSHOT_FORMAT:
        raise ConfigError(f"{path} is not an {SNAPSHOT_FORMAT} file")
    if payload.get("version") != SNAPSHOT_VERSION:
        raise ConfigError(f"{path}: snapshot version {payload.get('version')} "
                          f"(this build reads {SNAPSHOT_VERSION})")
    arrays = payload["params"]
    for name, shape in payload["shapes"].items():
        if list(np.shape(arrays.get(name))) != list(shape):
            raise ConfigError(f"{path}: parameter '{name}' does not match its recorded shape {shape}")

    flags = payload.get("flags", {})
    params = ModelParams.from_arrays(arrays, skip=flags.get("skip", False),
                                     attention=flags.get("attention", False),
                                     attention_n=flags.get("attention_n", 1.0))
    config = TrainConfig(**payload["config"]) if payload.get("config") else None
    return params, config


def write_metrics(records: List[EpochRecord], path: Union[str, Path]) -> Path:
    """Fixed header, %.6f floats, '\\n' line endings."""
    frame = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
    frame = frame.astype({"epoch": "int64", "nodes_sampled": "int64"})
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def train_and_save(config: TrainConfig, out_dir: Union[str, Path],
                   raw: Optional[RawDataset] = None) -> Tuple[TrainResult, RunManifest]:
    """
    ``train`` plus metrics.csv, model.snapshot and manifest.json in ``out_dir``.
    The directory is created only once the dataset has loaded and training
    finished.
    """
    out = Path(out_dir)
    dataset_path = resolve_dataset(config.dataset)
    if raw is None:
        raw = load_dataset(dataset_path)
    fingerprint = dataset_fingerprint(dataset_path) if dataset_path.is_dir() else "inline"

    result = train(config, raw=raw)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "metrics":  str(write_metrics(result.records, out / "metrics.csv")),
        "snapshot": str(save_snapshot(result.params, out / "model.snapshot", config)),
    }
    best = result.best_record
    manifest = RunManifest(
        config=config,
        dataset_hash=fingerprint,
        seed=config.seed,
        outputs={**outputs, "manifest": str(out / "manifest.json")},
        package_version=__version__,
        best_epoch=result.best_epoch,
        best_val_acc=best.val_acc if best else None,
        test_acc=best.test_acc if best else None,
    )
    manifest.write(out / "manifest.json")
    return result, manifest
