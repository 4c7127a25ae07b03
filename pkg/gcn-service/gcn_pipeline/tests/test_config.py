"""
test_config.py
==============
Unit tests for TrainConfig validation, preset / file / env / flag merging and
the run manifest.

Run with:
  cd gcn-service && python -m pytest gcn_pipeline/tests/test_config.py -v
"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "../.."))

import pytest
from pydantic import ValidationError

from gcn_pipeline.config import (
    RunManifest,
    TrainConfig,
    build_config,
    env_overrides,
    preset_for,
    read_config_file,
    resolve_dataset,
)
from gcn_pipeline.errors import ConfigError


# ── Tests: TrainConfig ──────────────────────────────────────────────────────────

class TestTrainConfig:

    def test_defaults(self):
        cfg = TrainConfig(dataset="toy")
        assert cfg.sampler == "adaptive"
        assert cfg.lam == 0.5
        assert cfg.max_epochs == 200
        assert cfg.early_stop_window == 30
        assert cfg.depth == 2

    def test_plan_sizes(self):
        assert TrainConfig(dataset="toy", layer_sizes=[64, 32], hidden=[8]).plan_sizes == [64, 32]
        node_wise = TrainConfig(dataset="toy", sampler="node_wise", node_wise_k=7)
        assert node_wise.plan_sizes == [7, 7]

    def test_attention_n_defaults_to_top_layer_size(self):
        assert TrainConfig(dataset="toy", layer_sizes=[40, 20], hidden=[4]).resolved_attention_n == 40.0
        assert TrainConfig(dataset="toy", attention_n=3.0).resolved_attention_n == 3.0

    @pytest.mark.parametrize("bad", [
        {"sampler": "bogus"},
        {"lam": -1.0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"layer_sizes": [16, 16, 16]},          # needs two hidden dims
        {"skip": True, "layer_sizes": [8], "hidden": []},
        {"node_wise_mode": "weighted"},
        {"unknown_key": 1},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ValidationError):
            TrainConfig(dataset="toy", **bad)

    def test_skip_combines_with_two_hop(self):
        config = TrainConfig(dataset="toy", skip=True, two_hop=True, layer_sizes=[8, 8], hidden=[4])
        assert config.skip and config.two_hop

    def test_unknown_sampler_message_lists_choices(self):
        with pytest.raises(ConfigError, match="full, node_wise, iid, adaptive"):
            build_config("toy", overrides={"sampler": "bogus"}, environ={})


# ── Tests: merging ──────────────────────────────────────────────────────────────

class TestBuildConfig:

    def test_presets_follow_directory_name(self):
        assert preset_for("data/pubmed")["layer_sizes"] == [256, 256]
        assert preset_for("/x/cora")["layer_sizes"] == [128, 128]
        assert preset_for("data/unknown") == {}

    def test_unknown_explicit_preset(self):
        with pytest.raises(ConfigError):
            preset_for("data/x", preset="imagenet")

    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.yaml"
        cfg_file.write_text("batch_size: 64\nlam: 0.1\nseed: 3\n")
        cfg = build_config(
            "data/pubmed", config_file=cfg_file,
            environ={"ADAPTGCN_LAM": "0.2", "ADAPTGCN_SEED": "4"},
            overrides={"seed": 5, "sampler": None},
        )
        assert cfg.layer_sizes == [256, 256]      # preset
        assert cfg.batch_size == 64               # file
        assert cfg.lam == 0.2                     # env beats file
        assert cfg.seed == 5                      # flag beats env
        assert cfg.sampler == "adaptive"          # None override ignored

    def test_env_values_parse_as_yaml(self):
        env = {"ADAPTGCN_LAYER_SIZES": "[8, 8]", "ADAPTGCN_SKIP": "true", "ADAPTGCN_RUNS_DIR": "x"}
        assert env_overrides(env) == {"layer_sizes": [8, 8], "skip": True}

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "none.yaml")

    def test_config_file_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            read_config_file(path)

    def test_resolve_dataset_uses_data_dir(self, tmp_path, monkeypatch):
        (tmp_path / "resolve-me").mkdir()
        monkeypatch.setenv("ADAPTGCN_DATA_DIR", str(tmp_path))
        assert resolve_dataset("resolve-me") == tmp_path / "resolve-me"


# ── Tests: manifest ─────────────────────────────────────────────────────────────

class TestRunManifest:

    def test_round_trip(self, tmp_path):
        manifest = RunManifest(
            config=TrainConfig(dataset="toy", seed=9),
            dataset_hash="abc", seed=9, outputs={"metrics": "m.csv"},
            package_version="0.1.0", best_epoch=4, best_val_acc=0.75,
        )
        loaded = RunManifest.read(manifest.write(tmp_path / "manifest.json"))
        assert loaded == manifest

    def test_unreadable_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            RunManifest.read(path)
