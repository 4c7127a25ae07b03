"""
test_samplers.py
================
Unit tests for the alias table, the four plan strategies and network plans.

Run with:
  cd gcn-service && python -m pytest gcn_pipeline/tests/test_samplers.py -v
"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "../.."))

import numpy as np
import pytest

from gcn_pipeline.errors import ConfigError, InputError, SupportError
from gcn_pipeline.graph_store import make_dataset, normalize
from gcn_pipeline.samplers import (
    AliasTable,
    FallbackCounter,
    LayerPlan,
    SamplerParams,
    adaptive_layer_sample,
    attention_values,
    attention_view,
    build_network_plan,
    differentiable_q,
    full_layer,
    iid_layer_sample,
    node_wise_sample,
    self_dependent,
)
from gcn_pipeline.selftest import toy_dataset
from gcn_pipeline.tensor_core import SparseMatrix, sum_all


# ── Helpers ─────────────────────────────────────────────────────────────────────

def _toy():
    raw = toy_dataset(0)
    return raw, normalize(raw)


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _random_graph(n: int = 60, seed: int = 0):
    rng = _rng(seed)
    pairs = rng.integers(0, n, size=(4 * n, 2))
    raw = make_dataset(pairs, rng.normal(size=(n, 5)), np.zeros(n, dtype=int))
    return raw, normalize(raw)


# ── Tests: AliasTable ───────────────────────────────────────────────────────────

class TestAliasTable:

    def test_frequencies_match_weights(self):
        weights = np.array([0.1, 0.2, 0.3, 0.4])
        draws = AliasTable(weights).sample(200_000, _rng(1))
        freq = np.bincount(draws, minlength=4) / len(draws)
        sigma = np.sqrt(weights * (1 - weights) / len(draws))
        assert np.all(np.abs(freq - weights) < 4 * sigma)

    def test_zero_weight_never_drawn(self):
        draws = AliasTable([0.0, 1.0, 0.0, 2.0]).sample(50_000, _rng(2))
        assert set(np.unique(draws)) <= {1, 3}

    def test_invalid_weights(self):
        with pytest.raises(InputError):
            AliasTable([0.0, 0.0])
        with pytest.raises(InputError):
            AliasTable([1.0, -1.0])


# ── Tests: single layers ────────────────────────────────────────────────────────

class TestFullLayer:

    def test_q_uniform_and_aggregation_equals_a_hat(self):
        _, g = _toy()
        parents = np.array([0, 3])
        plan = full_layer(g, parents)
        k = len(plan.candidates)
        assert np.allclose(plan.q, 1.0 / k)
        expected = g.adjacency.densify()[parents][:, plan.sampled_nodes]
        assert np.allclose(plan.aggregation.densify(), expected, atol=1e-15)


class TestNodeWise:

    def test_uniform_q_is_inverse_degree(self):
        _, g = _toy()
        plan = node_wise_sample(g, np.array([0, 5]), 3, _rng())
        assert plan.num_slots == 6
        assert np.allclose(plan.q[:3], 1.0 / g.degree[0])
        assert np.allclose(plan.q[3:], 1.0 / g.degree[5])

    def test_draws_stay_in_neighbourhood(self):
        _, g = _toy()
        plan = node_wise_sample(g, np.array([2]), 50, _rng(), mode="proportional")
        neighbours, _ = g.transition.row(2)
        assert set(plan.sampled_nodes) <= set(neighbours.tolist())
        assert np.allclose(plan.q, [g.conditional_prob(2, u) for u in plan.sampled_nodes])

    def test_proportional_frequencies_match_p(self):
        _, g = _toy()
        draws = 100_000
        plan = node_wise_sample(g, np.array([2]), draws, _rng(11), mode="proportional")
        neighbours, p = g.transition.row(2)
        freq = np.array([np.mean(plan.sampled_nodes == u) for u in neighbours])
        sigma = np.sqrt(p * (1 - p) / draws)
        assert np.all(np.abs(freq - p) <= 3 * sigma)

    def test_each_parent_owns_its_slots(self):
        _, g = _toy()
        plan = node_wise_sample(g, np.array([0, 1]), 2, _rng())
        pattern = (plan.support.densify() != 0).astype(int)
        assert pattern.tolist() == [[1, 1, 0, 0], [0, 0, 1, 1]]

    def test_unknown_mode(self):
        _, g = _toy()
        with pytest.raises(ConfigError):
            node_wise_sample(g, np.array([0]), 2, _rng(), mode="weird")


class TestLayerWise:

    def test_iid_q_follows_column_norms(self):
        _, g = _toy()
        plan = iid_layer_sample(g, np.array([0, 4]), 5, _rng())
        expected = g.col_sq_norm[plan.candidates] / g.col_sq_norm[plan.candidates].sum()
        assert np.allclose(plan.candidate_q, expected)

    def test_iid_frequencies_match_q(self):
        _, g = _toy()
        draws = 100_000
        plan = iid_layer_sample(g, np.array([0, 4]), draws, _rng(12))
        q = plan.candidate_q
        freq = np.bincount(plan.slot_candidate, minlength=len(q)) / draws
        assert np.all(np.abs(freq - q) <= 3 * np.sqrt(q * (1 - q) / draws))

    def test_iid_q_uniform_on_regular_graph(self):
        ring = make_dataset([(i, (i + 1) % 6) for i in range(6)], _rng().normal(size=(6, 3)),
                            np.zeros(6, dtype=int))
        plan = iid_layer_sample(normalize(ring), np.array([0, 3]), 4, _rng())
        assert np.allclose(plan.candidate_q, 1.0 / len(plan.candidates))

    def test_iid_star_center_outweighs_leaf(self):
        star = make_dataset([(0, leaf) for leaf in range(1, 5)], _rng().normal(size=(5, 3)),
                            np.zeros(5, dtype=int))
        plan = iid_layer_sample(normalize(star), np.array([1, 2]), 4, _rng())
        q = dict(zip(plan.candidates.tolist(), plan.candidate_q))
        assert q[0] > q[1] and q[0] > q[2]

    def test_adaptive_q_proportional_to_mass_times_score(self):
        raw, g = _toy()
        params = SamplerParams.init(raw.num_features, _rng(3))
        plan = adaptive_layer_sample(g, np.array([0, 4]), params, raw.features, 6, _rng())
        scores = np.abs(raw.features[plan.candidates] @ params.w_g.value.reshape(-1))
        weights = plan.candidate_mass * scores
        assert np.allclose(plan.candidate_q, weights / weights.sum())
        assert plan.num_slots == 6
        assert not plan.fallback

    def test_zero_scores_fall_back_to_mass(self):
        raw, g = _toy()
        params = SamplerParams.from_arrays(np.zeros(raw.num_features))
        counter = FallbackCounter()
        plan = adaptive_layer_sample(g, np.array([1]), params, raw.features, 4, _rng(), counter)
        assert plan.fallback
        assert counter.drain() == 1 and counter.count == 0 and counter.total == 1
        assert np.allclose(plan.candidate_q, plan.candidate_mass / plan.candidate_mass.sum())

    def test_differentiable_q_matches_recorded_q(self):
        raw, g = _toy()
        params = SamplerParams.init(raw.num_features, _rng(4))
        plan = adaptive_layer_sample(g, np.array([2, 6]), params, raw.features, 5, _rng())
        q = differentiable_q(plan, params, raw.features)
        assert q.shape == (1, 5)
        assert np.allclose(q.value.reshape(-1), plan.q)

    def test_shared_slots_between_parents(self):
        _, g = _random_graph()
        parents = np.arange(20)
        plan = iid_layer_sample(g, parents, 10, _rng())
        assert plan.num_slots == 10
        assert plan.support.shape == (20, 10)

    def test_zero_q_rejected(self):
        block = SparseMatrix(np.ones((1, 2)))
        with pytest.raises(SupportError):
            LayerPlan(strategy="iid", parent_nodes=np.array([0]), sampled_nodes=np.array([0, 1]),
                      q=np.array([0.5, 0.0]), sub_adj=block, support=block, importance_scale=block,
                      row_mass=np.ones(1), draws_per_parent=np.array([2.0]))


class TestAttentionView:

    def test_rows_of_p_sum_to_one(self):
        raw, g = _toy()
        params = SamplerParams.init(raw.num_features, _rng(5))
        view = attention_view(g, params, raw.features, n=4.0)
        assert np.allclose(view.transition.densify().sum(axis=1), 1.0)
        assert view.support is g.adjacency

    def test_self_dependent_is_linear_in_w_g(self):
        raw, _ = _toy()
        params = SamplerParams.init(raw.num_features, _rng(6))
        g_x = self_dependent(params, raw.features)
        assert g_x.shape == (raw.num_nodes, 1)
        assert np.allclose(g_x.value[:, 0], raw.features @ params.w_g.value[0])
        sum_all(g_x).backward()
        assert np.allclose(params.w_g.grad[0], raw.features.sum(axis=0))

    def test_attention_values_clip_and_scale(self):
        params = SamplerParams.from_arrays(np.array([1.0, 0.0]), w1=2.0, w2=-1.0)
        x_v = np.array([[1.0, 5.0], [1.0, 0.0]])
        x_u = np.array([[0.5, 0.0], [4.0, 9.0]])
        att = attention_values(params, x_v, x_u, n=4.0).value[:, 0]
        assert np.allclose(att, [(2.0 - 0.5) / 4.0, 0.0])


# ── Tests: network plans ────────────────────────────────────────────────────────

class TestNetworkPlan:

    def test_node_wise_counts_grow_geometrically(self):
        _, g = _random_graph()
        plan = build_network_plan(g, np.arange(8), [5, 5], "node_wise", _rng())
        assert plan.node_counts == [8, 40, 200]

    def test_layer_wise_counts_grow_linearly(self):
        raw, g = _random_graph()
        params = SamplerParams.init(raw.num_features, _rng())
        plan = build_network_plan(g, np.arange(8), [16, 16], "adaptive", _rng(),
                                  params=params, features=raw.features)
        assert plan.node_counts == [8, 16, 16]
        assert plan.total_sampled == 40

    def test_layers_chain(self):
        _, g = _random_graph()
        plan = build_network_plan(g, np.arange(5), [7, 9], "iid", _rng())
        assert np.array_equal(plan.layers[1].parent_nodes, plan.layers[0].sampled_nodes)
        assert np.array_equal(plan.input_nodes, plan.layers[1].sampled_nodes)
        assert np.array_equal(plan.targets, np.arange(5))

    def test_unknown_sampler_lists_valid_ids(self):
        _, g = _toy()
        with pytest.raises(ConfigError, match="full, node_wise, iid, adaptive"):
            build_network_plan(g, np.arange(2), [2, 2], "bogus", _rng())

    def test_adaptive_needs_params(self):
        _, g = _toy()
        with pytest.raises(ConfigError):
            build_network_plan(g, np.arange(2), [2, 2], "adaptive", _rng())

    def test_empty_minibatch(self):
        _, g = _toy()
        with pytest.raises(InputError):
            build_network_plan(g, np.array([], dtype=int), [2], "iid", _rng())

    def test_same_seed_same_plan(self):
        _, g = _random_graph()
        a = build_network_plan(g, np.arange(6), [4, 4], "iid", _rng(9))
        b = build_network_plan(g, np.arange(6), [4, 4], "iid", _rng(9))
        assert all(np.array_equal(x.sampled_nodes, y.sampled_nodes) for x, y in zip(a.layers, b.layers))
