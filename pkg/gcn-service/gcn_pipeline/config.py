"""
config.py
=========
Training configuration, dataset presets and the run manifest.

Precedence (lowest → highest)
-----------------------------
  1. dataset preset (cora / citeseer / pubmed / reddit, picked from the
     dataset directory name unless ``preset`` is given)
  2. YAML file passed with ``--config`` (flat ``key: value`` mapping)
  3. environment variables ``ADAPTGCN_<KEY>`` (upper-case field name)
  4. CLI flags

Environment knobs that are not TrainConfig fields:
  ADAPTGCN_RUNS_DIR   output root for ``train`` (default ./runs)
  ADAPTGCN_DATA_DIR   where bare dataset ids are resolved (default ./data)
  ADAPTGCN_LOG_LEVEL  logging level (default INFO)
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

ENV_PREFIX = "ADAPTGCN_"

# ── Dataset presets ───────────────────────────────────────────────────────────

_CITATION = {
    "hidden":        [16],
    "layer_sizes":   [128, 128],
    "batch_size":    256,
    "learning_rate": 0.001,
    "weight_decay":  0.0004,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "cora":     dict(_CITATION),
    "citeseer": dict(_CITATION),
    "pubmed":   {**_CITATION, "layer_sizes": [256, 256]},
    "reddit":   {**_CITATION, "hidden": [256], "layer_sizes": [512, 512], "learning_rate": 0.01},
}


# ── TrainConfig ───────────────────────────────────────────────────────────────

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    dataset:         str
    sampler:         str = "adaptive"
    hidden:          List[int] = Field(default_factory=lambda: [16])
    layer_sizes:     List[int] = Field(default_factory=lambda: [128, 128])
    batch_size:      int = 256
    learning_rate:   float = 0.001
    weight_decay:    float = 0.0004
    lam:             float = 0.5
    max_epochs:      int = 200
    early_stop_window: int = 30
    seed:            int = 0
    skip:            bool = False
    two_hop:         bool = False
    attention:       bool = False

    node_wise_k:     int = 5
    node_wise_mode:  str = "uniform"
    skip_weighting:  str = "verbatim"
    norm:            str = "l2"
    variance_layers: str = "top"
    attention_n:     Optional[float] = None
    two_hop_max_nodes: int = 25_000
    sampler_grad_from_classification: bool = False
    deterministic:   bool = False

    @field_validator("sampler")
    @classmethod
    def _sampler(cls, v: str) -> str:
        return _one_of("sampler", v, ("full", "node_wise", "iid", "adaptive"))

    @field_validator("node_wise_mode")
    @classmethod
    def _mode(cls, v: str) -> str:
        return _one_of("node_wise_mode", v, ("uniform", "proportional"))

    @field_validator("skip_weighting")
    @classmethod
    def _weighting(cls, v: str) -> str:
        return _one_of("skip_weighting", v, ("verbatim", "importance"))

    @field_validator("norm")
    @classmethod
    def _norm(cls, v: str) -> str:
        return _one_of("norm", v, ("l2", "l1"))

    @field_validator("variance_layers")
    @classmethod
    def _variance_layers(cls, v: str) -> str:
        return _one_of("variance_layers", v, ("top", "all"))

    @field_validator("lam")
    @classmethod
    def _lam(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lam must be ≥ 0")
        return v

    @field_validator("batch_size", "node_wise_k", "early_stop_window", "two_hop_max_nodes")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be ≥ 1")
        return v

    @field_validator("max_epochs")
    @classmethod
    def _epochs(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be ≥ 0")
        return v

    @field_validator("learning_rate", "attention_n")
    @classmethod
    def _strictly_positive(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v <= 0:
            raise ValueError("must be > 0")
        return v

    @model_validator(mode="after")
    def _shapes(self) -> "TrainConfig":
        if not self.layer_sizes or any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer_sizes must be a non-empty list of positive sizes")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden dims must be positive")
        if len(self.hidden) != len(self.layer_sizes) - 1:
            raise ValueError(f"{len(self.layer_sizes)} layers need {len(self.layer_sizes) - 1} hidden dims, "
                             f"got {len(self.hidden)}")
        if self.skip and self.depth < 2:
            raise ValueError("skip needs depth ≥ 2")
        return self

    # ── Derived ───────────────────────────────────────────────────────────────

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    @property
    def plan_sizes(self) -> List[int]:
        """Per-layer n (layer-wise) or k (node-wise), top first."""
        if self.sampler == "node_wise":
            return [self.node_wise_k] * self.depth
        return list(self.layer_sizes)

    @property
    def resolved_attention_n(self) -> float:
        return float(self.attention_n if self.attention_n is not None else self.layer_sizes[0])


def _one_of(name: str, value: str, allowed) -> str:
    if value not in allowed:
        raise ValueError(f"unknown {name} '{value}' (valid: {', '.join(allowed)})")
    return value


# ── Loading / merging ─────────────────────────────────────────────────────────

def preset_for(dataset: str, preset: Optional[str] = None) -> Dict[str, Any]:
    key = (preset or Path(dataset).name).lower()
    if preset is not None and key not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (valid: {', '.join(PRESETS)})")
    return dict(PRESETS.get(key, {}))


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a key: value mapping")
    return doc


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """``ADAPTGCN_<FIELD>`` values for TrainConfig fields, parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    out: Dict[str, Any] = {}
    for name in TrainConfig.model_fields:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            out[name] = yaml.safe_load(raw)
    return out


def build_config(
    dataset:     str,
    config_file: Optional[Union[str, Path]] = None,
    preset:      Optional[str] = None,
    overrides:   Optional[Mapping[str, Any]] = None,
    environ:     Optional[Mapping[str, str]] = None,
) -> TrainConfig:
    """Merge preset < file < environment < overrides; None overrides are ignored."""
    merged: Dict[str, Any] = preset_for(dataset, preset)
    if config_file is not None:
        merged.update(read_config_file(config_file))
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    merged["dataset"] = dataset
    try:
        return TrainConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(_first_problem(exc)) from exc


def _first_problem(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err["loc"]) or "config"
    return f"{where}: {err['msg']}"


def runs_dir() -> Path:
    return Path(os.environ.get(ENV_PREFIX + "RUNS_DIR", "runs"))


def data_dir() -> Path:
    return Path(os.environ.get(ENV_PREFIX + "DATA_DIR", "data"))


def resolve_dataset(dataset: str) -> Path:
    """A path that exists as given, else ``$ADAPTGCN_DATA_DIR/<dataset>``."""
    path = Path(dataset)
    if path.exists() or path.is_absolute():
        return path
    candidate = data_dir() / dataset
    return candidate if candidate.exists() else path


# ── Run manifest ──────────────────────────────────────────────────────────────

class RunManifest(BaseModel):
    """Written next to a run's outputs; enough to repeat the run."""
    config:          TrainConfig
    dataset_hash:    str
    seed:            int
    outputs:         Dict[str, str]
    package_version: str
    best_epoch:      Optional[int] = None
    best_val_acc:    Optional[float] = None
    test_acc:        Optional[float] = None

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.model_dump_json(indent=2) + "\n")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except (OSError, ValidationError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
