"""
test_trainer.py
===============
Unit tests for the training loop, evaluation, snapshots and metrics output.
All runs use the eight-node toy graph, so the whole file takes seconds.

Run with:
  cd gcn-service && python -m pytest gcn_pipeline/tests/test_trainer.py -v
"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "../.."))

import joblib
import numpy as np
import pytest

from gcn_pipeline.config import RunManifest, TrainConfig
from gcn_pipeline.errors import (
    BenchmarkCheckError,
    ConfigError,
    DatasetParseError,
    InputError,
    NumericDivergenceError,
)
from gcn_pipeline.estimators import ModelParams, full_forward
from gcn_pipeline.graph_store import make_dataset, normalize
from gcn_pipeline.selftest import toy_dataset
from gcn_pipeline.tensor_core import AdamState, adam_step, cross_entropy
from gcn_pipeline.training import (
    BenchRow,
    EpochRecord,
    benchmark,
    epochs_to_reach,
    evaluate,
    layer_wise_is_lighter,
    load_snapshot,
    save_snapshot,
    train,
    train_and_save,
    write_metrics,
)
from gcn_pipeline.training.trainer import METRICS_COLUMNS


# ── Helpers ─────────────────────────────────────────────────────────────────────

def _config(**kw) -> TrainConfig:
    base = dict(dataset="toy8", hidden=[4], layer_sizes=[4, 4], batch_size=2,
                learning_rate=0.01, max_epochs=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _two_cliques():
    """Two 4-cliques joined by one edge; labels follow the clique."""
    left = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    right = [(i + 4, j + 4) for i, j in left]
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    rng = np.random.default_rng(0)
    features = np.eye(2)[labels] + 0.1 * rng.normal(size=(8, 2))
    return make_dataset(left + right + [(3, 4)], features, labels)


def _record(epoch: int, test_acc: float) -> EpochRecord:
    return EpochRecord(epoch, 1.0, 0.0, 1.0, 0.5, test_acc, 0.0, 10)


# ── Tests: training loop ────────────────────────────────────────────────────────

class TestTrain:

    def test_zero_epochs(self):
        result = train(_config(max_epochs=0), raw=toy_dataset())
        assert result.records == []
        assert result.best_epoch is None

    @pytest.mark.parametrize("sampler", ["full", "node_wise", "iid", "adaptive"])
    def test_every_sampler_runs(self, sampler):
        params, records = train(_config(sampler=sampler, max_epochs=3), raw=toy_dataset())
        assert [r.epoch for r in records] == [1, 2, 3]
        for r in records:
            assert 0.0 <= r.val_acc <= 1.0 and 0.0 <= r.test_acc <= 1.0
            assert np.isfinite(r.loss_total)
            assert r.nodes_sampled > 0
        assert set(params.arrays()) >= {"W0", "W1", "w_g"}

    def test_variance_term_only_for_adaptive(self):
        _, adaptive = train(_config(sampler="adaptive", max_epochs=1), raw=toy_dataset())
        _, iid = train(_config(sampler="iid", max_epochs=1), raw=toy_dataset())
        assert adaptive[0].loss_var > 0
        assert iid[0].loss_var == 0.0
        assert iid[0].loss_total == pytest.approx(iid[0].loss_c)

    def test_layer_wise_nodes_per_epoch(self):
        # four training nodes in two batches of 2: (2 + 4 + 4) per batch
        _, records = train(_config(sampler="iid", max_epochs=1), raw=toy_dataset())
        assert records[0].nodes_sampled == 20

    @pytest.mark.parametrize("flags", [{"skip": True}, {"two_hop": True}, {"attention": True},
                                       {"skip": True, "two_hop": True}])
    def test_architecture_variants(self, flags):
        _, records = train(_config(max_epochs=2, **flags), raw=toy_dataset())
        assert len(records) == 2

    def test_best_validation_snapshot_is_returned(self):
        raw = toy_dataset()
        result = train(_config(max_epochs=8), raw=raw)
        best = max(r.val_acc for r in result.records)
        assert result.best_val_acc == best
        assert result.best_record.val_acc == best
        g = normalize(raw)
        assert evaluate(result.params, g, raw.features, raw.labels, raw.val_idx) == pytest.approx(best)

    def test_early_stopping(self):
        # val accuracy over two nodes can improve at most twice
        result = train(_config(max_epochs=50, early_stop_window=2), raw=toy_dataset())
        assert len(result.records) <= 7

    def test_same_seed_same_losses(self):
        _, a = train(_config(max_epochs=2, deterministic=True), raw=toy_dataset())
        _, b = train(_config(max_epochs=2, deterministic=True), raw=toy_dataset())
        assert a == b
        assert all(r.seconds == 0.0 for r in a)

    def test_huge_learning_rate_diverges(self):
        with pytest.raises(NumericDivergenceError) as info:
            train(_config(sampler="full", learning_rate=1e300, max_epochs=5), raw=toy_dataset())
        assert info.value.record is not None

    def test_empty_training_split(self):
        raw = make_dataset([(0, 1)], np.ones((2, 1)), np.array([0, 1]),
                           {"train": [], "val": [0], "test": [1]})
        with pytest.raises(ConfigError):
            train(_config(), raw=raw)


# ── Tests: evaluation ───────────────────────────────────────────────────────────

class TestEvaluate:

    def test_overfit_two_cliques(self):
        raw = _two_cliques()
        g = normalize(raw)
        params = ModelParams.init(raw.num_features, [8], raw.num_classes, np.random.default_rng(0))
        adam = AdamState(learning_rate=0.05)
        everyone = np.arange(8)
        loss = np.inf
        for _ in range(500):
            out = cross_entropy(full_forward(g, raw.features, params), raw.labels)
            loss = out.item()
            if loss < 1e-3:
                break
            out.backward()
            grads = {n: t.grad for n, t in params.leaves().items() if t.grad is not None}
            arrays = params.arrays()
            arrays.update(adam_step(adam, {k: arrays[k] for k in grads}, grads))
            params = params.with_arrays(arrays)
        assert loss < 0.05
        assert evaluate(params, g, raw.features, raw.labels, everyone) == 1.0

    def test_untrained_params_score_chance(self):
        rng = np.random.default_rng(13)
        nodes, k = 600, 3
        labels = rng.permutation(np.repeat(np.arange(k), nodes // k))
        raw = make_dataset(rng.integers(0, nodes, size=(1200, 2)), rng.normal(size=(nodes, 8)), labels)
        params = ModelParams.init(8, [16], k, rng)
        acc = evaluate(params, normalize(raw), raw.features, raw.labels, np.arange(nodes))
        assert abs(acc - 1 / k) <= 3 * np.sqrt((1 / k) * (1 - 1 / k) / nodes)

    def test_empty_index(self):
        raw = toy_dataset()
        params = ModelParams.init(raw.num_features, [4], raw.num_classes, np.random.default_rng(0))
        with pytest.raises(InputError):
            evaluate(params, normalize(raw), raw.features, raw.labels, [])

    def test_epochs_to_reach(self):
        records = [_record(1, 0.5), _record(2, 0.8), _record(3, 0.9)]
        assert epochs_to_reach(records, 0.8) == 2
        assert epochs_to_reach(records, 0.95) is None


# ── Tests: persistence ──────────────────────────────────────────────────────────

class TestPersistence:

    def test_snapshot_round_trip(self, tmp_path):
        raw = toy_dataset()
        config = _config(skip=True)
        params = ModelParams.init(raw.num_features, [4], raw.num_classes,
                                  np.random.default_rng(1), skip=True)
        loaded, saved_config = load_snapshot(save_snapshot(params, tmp_path / "m.snapshot", config))
        assert saved_config == config
        assert loaded.gcn.skip
        for name, array in params.arrays().items():
            assert np.array_equal(loaded.arrays()[name], array)

    def test_missing_snapshot(self, tmp_path):
        with pytest.raises(ConfigError):
            load_snapshot(tmp_path / "none.snapshot")

    def test_garbage_snapshot(self, tmp_path):
        path = tmp_path / "bad.snapshot"
        path.write_bytes(b"not a snapshot")
        with pytest.raises(ConfigError):
            load_snapshot(path)

    def test_foreign_joblib_file(self, tmp_path):
        path = tmp_path / "other.snapshot"
        joblib.dump({"format": "something-else"}, path)
        with pytest.raises(ConfigError):
            load_snapshot(path)

    def test_metrics_layout(self, tmp_path):
        path = write_metrics([_record(1, 0.25), _record(2, 0.5)], tmp_path / "metrics.csv")
        data = path.read_bytes()
        assert b"\r" not in data
        lines = data.decode().splitlines()
        assert lines[0] == ",".join(METRICS_COLUMNS)
        assert lines[1] == "1,1.000000,0.000000,1.000000,0.500000,0.250000,0.000000,10"
        assert len(lines) == 3

    def test_train_and_save_writes_outputs(self, tmp_path):
        result, manifest = train_and_save(_config(max_epochs=2), tmp_path / "run", raw=toy_dataset())
        for name in ("metrics.csv", "model.snapshot", "manifest.json"):
            assert (tmp_path / "run" / name).is_file()
        assert RunManifest.read(tmp_path / "run" / "manifest.json") == manifest
        assert manifest.best_epoch == result.best_epoch
        assert manifest.dataset_hash == "inline"

    def test_failed_load_leaves_no_output_directory(self, tmp_path):
        config = _config(dataset=str(tmp_path / "absent"))
        with pytest.raises(DatasetParseError):
            train_and_save(config, tmp_path / "run")
        assert not (tmp_path / "run").exists()

    def test_deterministic_runs_are_byte_identical(self, tmp_path):
        config = _config(max_epochs=3, deterministic=True)
        train_and_save(config, tmp_path / "a", raw=toy_dataset())
        train_and_save(config, tmp_path / "b", raw=toy_dataset())
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


# ── Tests: benchmark ────────────────────────────────────────────────────────────

def _row(sampler: str, nodes: int) -> BenchRow:
    return BenchRow(sampler, 1, 0.1, nodes, str(nodes), nodes, 0.5)


class TestBenchmark:

    def test_lighter_check(self):
        assert layer_wise_is_lighter([_row("node_wise", 42), _row("iid", 10), _row("adaptive", 10)])
        assert not layer_wise_is_lighter([_row("node_wise", 10), _row("adaptive", 10)])
        assert layer_wise_is_lighter([_row("full", 99), _row("iid", 10)])

    def test_heavier_layer_wise_raises_with_rows(self):
        config = _config(node_wise_k=1)
        with pytest.raises(BenchmarkCheckError) as info:
            benchmark(config, ["node_wise", "iid"], 1, raw=toy_dataset())
        rows = info.value.rows
        assert [r.sampler for r in rows] == ["node_wise", "iid"]
        assert rows[1].nodes_per_batch == 10
        assert rows[0].nodes_per_batch <= 6

    def test_check_can_be_disabled(self):
        rows = benchmark(_config(node_wise_k=1), ["node_wise", "iid"], 1,
                         raw=toy_dataset(), require_lighter=False)
        assert len(rows) == 2
