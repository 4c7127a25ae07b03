"""
gcn_pipeline
============
Graph convolutional networks trained with adaptive layer-wise sampling and
explicit variance reduction.

Components:
  • tensor_core   – CSR matrices, reverse-mode tape, Adam.
  • graph_store   – Dataset directories, renormalised Â, p(u|v), Â + Â², attention views.
  • samplers      – Full / node-wise / IID / adaptive LayerPlans, W_g self-dependent scores.
  • estimators    – Full and importance-sampled forward passes, skip connection.
  • variance      – Exact and empirical estimator variance, hybrid loss, gradient checks.
  • training      – Training loop, evaluation, snapshots, sampler benchmark.
  • selftest      – Statistical and gradient oracles on toy graphs.
"""

__version__ = "1.0.0"

from .errors      import AdaptGcnError, ConfigError, DatasetError, NumericError
from .graph_store import NormalizedGraph, RawDataset, load_dataset, normalize
from .samplers    import LayerPlan, NetworkPlan, SamplerParams, build_network_plan
from .estimators  import ModelParams, full_forward, sampled_forward
from .variance    import HybridLossReport, hybrid_loss
from .config      import TrainConfig, build_config

__all__ = [
    "__version__",
    "AdaptGcnError",
    "ConfigError",
    "DatasetError",
    "NumericError",
    "NormalizedGraph",
    "RawDataset",
    "load_dataset",
    "normalize",
    "LayerPlan",
    "NetworkPlan",
    "SamplerParams",
    "build_network_plan",
    "ModelParams",
    "full_forward",
    "sampled_forward",
    "HybridLossReport",
    "hybrid_loss",
    "TrainConfig",
    "build_config",
]
