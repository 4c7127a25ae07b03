"""
samplers.py
===========
Top-down construction of the sampled network, one LayerPlan per layer.

Strategies
----------
  full       every candidate exactly once with q = 1/K (exact Σ_j â h)
  node_wise  k draws per parent, uniform over neighbours or from p(·|v)
  iid        n shared draws, q(u) ∝ ‖op[:, u]‖² over the candidates
  adaptive   n shared draws, q(u) ∝ Σ_i p(u|v_i)·|g(x(u))|, g(x) = W_g·x

The candidate set of a layer is the union of the parents' neighbourhoods.
p(u|v_i) is zero outside it, so normalising q over the candidates instead
of all N nodes changes nothing.

Each slot of a plan is one draw: duplicates stay distinct and carry their
own q. The aggregation coefficient of (parent i, slot j) is
    â(v_i, û_j) / (c_i · q_j)
with c_i the number of draws parent i averages over (n for layer-wise
plans, k for node-wise, K for full).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InputError, SupportError
from .graph_store import NormalizedGraph, attention_graph, edge_list
from .tensor_core import (
    SparseMatrix,
    Tensor,
    abs_,
    div,
    gather_rows,
    glorot_uniform,
    matmul,
    mul,
    relu,
    sum_all,
    transpose,
)

logger = logging.getLogger("adaptgcn.samplers")

STRATEGIES = ("full", "node_wise", "iid", "adaptive")
LAYER_WISE = ("iid", "adaptive")
NODE_WISE_MODES = ("uniform", "proportional")


# ── Alias table ───────────────────────────────────────────────────────────────

class AliasTable:
    """Vose alias table: O(K) build, O(1) per draw, vectorised sampling."""

    def __init__(self, weights: Sequence[float]):
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.size == 0:
            raise InputError("alias table needs at least one outcome")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InputError("alias weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise InputError("alias weights sum to zero")

        k = w.size
        self.probs = w / total
        self.accept = np.ones(k)
        self.alias = np.arange(k, dtype=np.int64)

        scaled = self.probs * k
        small = [i for i in range(k) if scaled[i] < 1.0]
        large = [i for i in range(k) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            self.accept[s] = scaled[s]
            self.alias[s] = l
            scaled[l] = (scaled[l] + scaled[s]) - 1.0
            (small if scaled[l] < 1.0 else large).append(l)

        # rounding leftovers keep accept = 1; zero-weight outcomes must never come up
        dead = self.probs == 0
        self.accept[dead] = 0.0
        self.alias[dead] = int(np.argmax(self.probs))

    def __len__(self) -> int:
        return int(self.probs.size)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, len(self), size=n)
        keep = rng.random(n) < self.accept[idx]
        return np.where(keep, idx, self.alias[idx])


# ── Parameters / bookkeeping ──────────────────────────────────────────────────

@dataclass
class SamplerParams:
    """W_g (1 × D) of the self-dependent function and the attention scalars."""
    w_g: Tensor
    w1:  Tensor
    w2:  Tensor

    @classmethod
    def init(cls, num_features: int, rng: np.random.Generator) -> "SamplerParams":
        return cls.from_arrays(glorot_uniform(1, num_features, rng))

    @classmethod
    def from_arrays(cls, w_g: np.ndarray, w1: float = 1.0, w2: float = 1.0) -> "SamplerParams":
        return cls(
            w_g=Tensor(np.asarray(w_g, dtype=np.float64).reshape(1, -1), requires_grad=True, name="w_g"),
            w1=Tensor(np.asarray(w1, dtype=np.float64).reshape(1, 1), requires_grad=True, name="w1"),
            w2=Tensor(np.asarray(w2, dtype=np.float64).reshape(1, 1), requires_grad=True, name="w2"),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w_g": self.w_g.value, "att_w1": self.w1.value, "att_w2": self.w2.value}


@dataclass
class FallbackCounter:
    """Counts adaptive layers that fell back to q ∝ Σ_i p(u|v_i)."""
    count: int = 0
    total: int = 0

    def hit(self) -> None:
        self.count += 1
        self.total += 1

    def drain(self) -> int:
        n, self.count = self.count, 0
        return n


@dataclass(frozen=True, eq=False)
class LayerPlan:
    """
    One sampled layer: parents {v_i} (rows) and draw slots {û_j} (columns).

    ``sub_adj`` holds p(û_j|v_i), ``support`` the propagation weight
    â(v_i, û_j) and ``importance_scale`` p(û_j|v_i) / q_j, all on the same
    (parents × slots) pattern.
    """
    strategy:         str
    parent_nodes:     np.ndarray
    sampled_nodes:    np.ndarray
    q:                np.ndarray              # draw probability per slot
    sub_adj:          SparseMatrix
    support:          SparseMatrix
    importance_scale: SparseMatrix
    row_mass:         np.ndarray              # N(v_i) per parent
    draws_per_parent: np.ndarray              # c_i
    candidates:       Optional[np.ndarray] = None
    candidate_mass:   Optional[np.ndarray] = None   # Σ_i p(u|v_i) per candidate
    candidate_q:      Optional[np.ndarray] = None
    slot_candidate:   Optional[np.ndarray] = None   # slot → candidate position
    fallback:         bool = False

    def __post_init__(self):
        if len(self.q) != len(self.sampled_nodes):
            raise InputError(f"{len(self.q)} q values for {len(self.sampled_nodes)} slots")
        if len(self.q) and not np.all(self.q > 0):
            raise SupportError(f"{self.strategy}: a drawn node has q = 0")
        expected = (len(self.parent_nodes), len(self.sampled_nodes))
        for name in ("sub_adj", "support", "importance_scale"):
            shape = getattr(self, name).shape
            if shape != expected:
                raise InputError(f"{name} has shape {shape}, expected {expected}")

    @property
    def num_parents(self) -> int:
        return int(len(self.parent_nodes))

    @property
    def num_slots(self) -> int:
        return int(len(self.sampled_nodes))

    @cached_property
    def edges(self):
        """(parent row, slot column, â) of the support pattern in CSR order."""
        csr = self.support.csr
        rows = np.repeat(np.arange(csr.shape[0]), np.diff(csr.indptr))
        return rows, csr.indices.astype(np.int64), csr.data

    @cached_property
    def aggregation(self) -> SparseMatrix:
        """â(v_i, û_j) / (c_i q_j): h_next = aggregation @ (h W)."""
        csr = self.support.csr
        scaled = sp.diags(1.0 / self.draws_per_parent) @ csr @ sp.diags(1.0 / self.q)
        return SparseMatrix(scaled)


@dataclass
class NetworkPlan:
    """LayerPlans from the minibatch (top) down to the input layer."""
    layers:   List[LayerPlan]
    strategy: str
    graph:    Optional[NormalizedGraph] = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def targets(self) -> np.ndarray:
        return self.layers[0].parent_nodes

    @property
    def input_nodes(self) -> np.ndarray:
        return self.layers[-1].sampled_nodes

    @property
    def node_counts(self) -> List[int]:
        return [self.layers[0].num_parents] + [layer.num_slots for layer in self.layers]

    @property
    def total_sampled(self) -> int:
        return int(sum(self.node_counts))


# ── Self-dependent function / attention ───────────────────────────────────────

def self_dependent(params: SamplerParams, x: np.ndarray) -> Tensor:
    """g(x) = W_g·x for every row of ``x`` → (rows × 1), differentiable in W_g."""
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return matmul(Tensor(rows), transpose(params.w_g))


def node_scores(params: SamplerParams, x: np.ndarray) -> np.ndarray:
    """|g(x)| per row, off the tape."""
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if rows.shape[1] != params.w_g.shape[1]:
        raise InputError(f"features have D={rows.shape[1]}, W_g expects {params.w_g.shape[1]}")
    return np.abs(rows @ params.w_g.value.reshape(-1))


def attention_from_scores(params: SamplerParams, g_v: Tensor, g_u: Tensor, n: float) -> Tensor:
    """(1/n)·ReLU(W₁ g_v + W₂ g_u), row-aligned."""
    return mul(relu(mul(g_v, params.w1) + mul(g_u, params.w2)), 1.0 / n)


def attention_values(params: SamplerParams, x_v: np.ndarray, x_u: np.ndarray, n: float) -> Tensor:
    """Attention between row-aligned feature rows x_v[e] and x_u[e] → (E × 1)."""
    return attention_from_scores(params, self_dependent(params, x_v), self_dependent(params, x_u), n)


def attention_view(g: NormalizedGraph, params: SamplerParams, features: np.ndarray,
                   n: float) -> NormalizedGraph:
    """``g`` with attention weights on its support and the re-normalised p."""
    scores = features @ params.w_g.value.reshape(-1)
    rows, cols = edge_list(g)
    w1 = float(params.w1.value[0, 0])
    w2 = float(params.w2.value[0, 0])
    weights = np.maximum(w1 * scores[rows] + w2 * scores[cols], 0.0) / n
    dead = int(np.sum(np.bincount(rows, weights=weights, minlength=g.num_nodes) <= 0))
    if dead:
        logger.debug("attention view: %d rows with zero mass keep the structural p", dead)
    return attention_graph(g, weights)


# ── Plan assembly ─────────────────────────────────────────────────────────────

def _as_nodes(g: NormalizedGraph, nodes) -> np.ndarray:
    ids = np.asarray(nodes, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise InputError("parent list is empty")
    if ids.min() < 0 or ids.max() >= g.num_nodes:
        raise InputError(f"parent id outside [0, {g.num_nodes})")
    return ids


def _layer_from_candidates(
    strategy:       str,
    g:              NormalizedGraph,
    parents:        np.ndarray,
    candidates:     np.ndarray,
    block:          sp.csr_matrix,
    mass:           np.ndarray,
    candidate_q:    np.ndarray,
    slot_candidate: np.ndarray,
    draws:          int,
    fallback:       bool = False,
) -> LayerPlan:
    sampled = candidates[slot_candidate]
    q = candidate_q[slot_candidate]
    p = block[:, slot_candidate].tocsr()
    support = g.support.csr[parents][:, sampled]
    return LayerPlan(
        strategy=strategy,
        parent_nodes=parents,
        sampled_nodes=sampled,
        q=q,
        sub_adj=SparseMatrix(p),
        support=SparseMatrix(support),
        importance_scale=SparseMatrix(p @ sp.diags(1.0 / q)),
        row_mass=g.row_mass[parents],
        draws_per_parent=np.full(len(parents), float(draws)),
        candidates=candidates,
        candidate_mass=mass,
        candidate_q=candidate_q,
        slot_candidate=slot_candidate,
        fallback=fallback,
    )


def _column_mass(block: sp.csr_matrix) -> np.ndarray:
    return np.asarray(block.sum(axis=0)).reshape(-1)


def full_layer(g: NormalizedGraph, parents) -> LayerPlan:
    """Enumerate every candidate once; the aggregation reduces to Σ_j â h."""
    parents = _as_nodes(g, parents)
    candidates, block = g.candidate_block(parents)
    k = len(candidates)
    return _layer_from_candidates(
        "full", g, parents, candidates, block, _column_mass(block),
        np.full(k, 1.0 / k), np.arange(k), draws=k,
    )


def node_wise_sample(g: NormalizedGraph, parents, k: int, rng: np.random.Generator,
                     mode: str = "uniform") -> LayerPlan:
    """
    k independent draws per parent, with replacement. ``uniform`` draws over
    the neighbour list (r = 1/deg); ``proportional`` draws from p(·|v) (r = p).
    """
    if k < 1:
        raise InputError(f"node-wise sample size must be ≥ 1, got {k}")
    if mode not in NODE_WISE_MODES:
        raise ConfigError(f"unknown node-wise mode '{mode}' (valid: {', '.join(NODE_WISE_MODES)})")
    parents = _as_nodes(g, parents)
    m = len(parents)
    trans = g.transition
    start = np.repeat(trans.indptr[parents].astype(np.int64), k)
    deg = np.repeat(g.degree[parents].astype(np.int64), k)
    u = rng.random(m * k)

    if mode == "uniform":
        pos = start + np.minimum((u * deg).astype(np.int64), deg - 1)
        q = 1.0 / deg
    else:
        cumsum = g.transition_cumsum
        lo = np.where(start > 0, cumsum[start - 1], 0.0)
        hi = cumsum[start + deg - 1]
        pos = np.searchsorted(cumsum, lo + u * (hi - lo), side="right")
        pos = np.clip(pos, start, start + deg - 1)
        q = trans.data[pos].copy()

    p = trans.data[pos]
    sampled = trans.indices[pos].astype(np.int64)
    rows = np.repeat(np.arange(m), k)
    cols = np.arange(m * k)
    shape = (m, m * k)
    a_hat = np.asarray(g.support.csr[parents[rows], sampled]).reshape(-1)
    return LayerPlan(
        strategy="node_wise",
        parent_nodes=parents,
        sampled_nodes=sampled,
        q=q,
        sub_adj=SparseMatrix.from_coo(rows, cols, p, shape),
        support=SparseMatrix.from_coo(rows, cols, a_hat, shape),
        importance_scale=SparseMatrix.from_coo(rows, cols, p / q, shape),
        row_mass=g.row_mass[parents],
        draws_per_parent=np.full(m, float(k)),
    )


def adaptive_layer_sample(g: NormalizedGraph, parents, params: SamplerParams,
                          features: np.ndarray, n: int, rng: np.random.Generator,
                          counter: Optional[FallbackCounter] = None) -> LayerPlan:
    """n shared draws from q(u) ∝ Σ_i p(u|v_i)·|g(x(u))| over the candidates."""
    if n < 1:
        raise InputError(f"layer sample size must be ≥ 1, got {n}")
    parents = _as_nodes(g, parents)
    candidates, block = g.candidate_block(parents)
    mass = _column_mass(block)
    weights = mass * node_scores(params, features[candidates])

    fallback = not np.any(weights > 0)
    if fallback:
        weights = mass
        if counter is not None:
            counter.hit()
        logger.debug("adaptive sampler: |g| = 0 on all %d candidates, using Σ p", len(candidates))

    candidate_q = weights / weights.sum()
    slot_candidate = AliasTable(candidate_q).sample(n, rng)
    return _layer_from_candidates("adaptive", g, parents, candidates, block, mass,
                                  candidate_q, slot_candidate, draws=n, fallback=fallback)


def iid_layer_sample(g: NormalizedGraph, parents, n: int, rng: np.random.Generator) -> LayerPlan:
    """n shared draws from q(u) ∝ ‖op[:, u]‖², restricted to the candidates."""
    if n < 1:
        raise InputError(f"layer sample size must be ≥ 1, got {n}")
    parents = _as_nodes(g, parents)
    candidates, block = g.candidate_block(parents)
    weights = g.col_sq_norm[candidates]
    candidate_q = weights / weights.sum()
    slot_candidate = AliasTable(candidate_q).sample(n, rng)
    return _layer_from_candidates("iid", g, parents, candidates, block, _column_mass(block),
                                  candidate_q, slot_candidate, draws=n)


def differentiable_q(plan: LayerPlan, params: SamplerParams, features: np.ndarray) -> Tensor:
    """
    The plan's slot probabilities as a (1 × slots) tensor. For adaptive plans
    q is recomputed from W_g with the draws held fixed; other strategies give
    a constant.
    """
    if plan.strategy != "adaptive" or plan.fallback:
        return Tensor(plan.q.reshape(1, -1))
    scores = abs_(self_dependent(params, features[plan.candidates]))
    weights = mul(scores, plan.candidate_mass.reshape(-1, 1))
    candidate_q = div(weights, sum_all(weights))
    return transpose(gather_rows(candidate_q, plan.slot_candidate))


# ── Network ───────────────────────────────────────────────────────────────────

def build_network_plan(
    g:               NormalizedGraph,
    minibatch,
    sizes:           Sequence[int],
    strategy:        str,
    rng:             np.random.Generator,
    params:          Optional[SamplerParams] = None,
    features:        Optional[np.ndarray] = None,
    node_wise_mode:  str = "uniform",
    counter:         Optional[FallbackCounter] = None,
) -> NetworkPlan:
    """
    Sample top-down: layer ℓ's draw slots become layer ℓ+1's parents,
    duplicates included. ``sizes`` lists n (layer-wise) or k (node-wise)
    per layer from the top; its length is the depth. ``full`` ignores the
    values.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown sampler '{strategy}' (valid: {', '.join(STRATEGIES)})")
    if len(sizes) < 1:
        raise ConfigError("depth must be ≥ 1")
    if any(int(s) < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {list(sizes)}")
    if strategy == "adaptive" and (params is None or features is None):
        raise ConfigError("the adaptive sampler needs sampler params and features")

    parents = _as_nodes(g, minibatch)
    layers: List[LayerPlan] = []
    for size in sizes:
        if strategy == "full":
            plan = full_layer(g, parents)
        elif strategy == "node_wise":
            plan = node_wise_sample(g, parents, int(size), rng, mode=node_wise_mode)
        elif strategy == "iid":
            plan = iid_layer_sample(g, parents, int(size), rng)
        else:
            plan = adaptive_layer_sample(g, parents, params, features, int(size), rng, counter)
        layers.append(plan)
        parents = plan.sampled_nodes
    return NetworkPlan(layers=layers, strategy=strategy, graph=g)
