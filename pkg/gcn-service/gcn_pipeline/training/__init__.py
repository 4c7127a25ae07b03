"""Training loop, evaluation, persistence and the sampler benchmark."""

from .trainer import (
    EpochRecord,
    TrainingData,
    TrainResult,
    epochs_to_reach,
    evaluate,
    load_snapshot,
    save_snapshot,
    train,
    train_and_save,
    write_metrics,
)
from .benchmark import BenchRow, benchmark, layer_wise_is_lighter, write_bench_csv

__all__ = [
    "EpochRecord",
    "TrainingData",
    "TrainResult",
    "epochs_to_reach",
    "evaluate",
    "load_snapshot",
    "save_snapshot",
    "train",
    "train_and_save",
    "write_metrics",
    "BenchRow",
    "benchmark",
    "layer_wise_is_lighter",
    "write_bench_csv",
]
