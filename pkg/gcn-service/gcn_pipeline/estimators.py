"""
estimators.py
=============
Bottom-up forward passes: the full GCN, the sampled (importance-weighted)
network over a NetworkPlan, the skip connection and the Â + Â² baseline.

Row-vector convention: a layer maps h (nodes × D_in) to
    σ(Σ_j coef_ij · h_j W),   W of shape D_in × D_out
with ReLU on hidden layers and raw logits on top (softmax lives in the loss).

Usage
-----
  params = ModelParams.init(D, [16], C, rng)
  logits = full_forward(graph, X, params)
  acts   = sampled_forward(plan, X, params)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, NumericError
from .graph_store import NormalizedGraph, edge_list, two_hop_graph
from .samplers import (
    LayerPlan,
    NetworkPlan,
    SamplerParams,
    attention_from_scores,
    differentiable_q,
    self_dependent,
)
from .tensor_core import (
    SparseMatrix,
    Tensor,
    div,
    edge_spmm,
    gather_rows,
    glorot_uniform,
    matmul,
    mul,
    relu,
    spmm,
    transpose,
)

logger = logging.getLogger("adaptgcn.estimators")

SKIP_WEIGHTINGS = ("verbatim", "importance")


# ── Parameters ────────────────────────────────────────────────────────────────

@dataclass
class GcnParams:
    """Filters W⁽⁰⁾…W⁽ᵈ⁻¹⁾. The skip filter is always the product W⁽ᵈ⁻²⁾W⁽ᵈ⁻¹⁾."""
    filters:     List[Tensor]
    skip:        bool = False
    attention:   bool = False
    attention_n: float = 1.0

    def __post_init__(self):
        for lower, upper in zip(self.filters, self.filters[1:]):
            if lower.shape[1] != upper.shape[0]:
                raise DimensionError(f"filter chain breaks: {lower.shape} → {upper.shape}")
        if self.skip and len(self.filters) < 2:
            raise ConfigError("the skip connection needs at least two layers")
        if self.attention_n <= 0:
            raise ConfigError(f"attention_n must be positive, got {self.attention_n}")

    @property
    def depth(self) -> int:
        return len(self.filters)


@dataclass
class ModelParams:
    gcn:     GcnParams
    sampler: SamplerParams

    @classmethod
    def init(
        cls,
        num_features: int,
        hidden:       Sequence[int],
        num_classes:  int,
        rng:          np.random.Generator,
        skip:         bool = False,
        attention:    bool = False,
        attention_n:  float = 1.0,
    ) -> "ModelParams":
        """Glorot-uniform filters and W_g; W₁ = W₂ = 1."""
        dims = [num_features, *hidden, num_classes]
        filters = [
            Tensor(glorot_uniform(d_in, d_out, rng), requires_grad=True, name=f"W{i}")
            for i, (d_in, d_out) in enumerate(zip(dims, dims[1:]))
        ]
        return cls(
            gcn=GcnParams(filters, skip=skip, attention=attention, attention_n=attention_n),
            sampler=SamplerParams.init(num_features, rng),
        )

    def leaves(self) -> Dict[str, Tensor]:
        out = {t.name or f"W{i}": t for i, t in enumerate(self.gcn.filters)}
        out.update({"w_g": self.sampler.w_g, "att_w1": self.sampler.w1, "att_w2": self.sampler.w2})
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.leaves().items()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        """Fresh leaves holding ``arrays``; flags carried over."""
        return ModelParams.from_arrays(arrays, skip=self.gcn.skip, attention=self.gcn.attention,
                                       attention_n=self.gcn.attention_n)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], skip: bool = False,
                    attention: bool = False, attention_n: float = 1.0) -> "ModelParams":
        depth = sum(1 for k in arrays if k.startswith("W"))
        filters = [Tensor(np.array(arrays[f"W{i}"], dtype=np.float64), requires_grad=True, name=f"W{i}")
                   for i in range(depth)]
        sampler = SamplerParams.from_arrays(arrays["w_g"], arrays.get("att_w1", 1.0), arrays.get("att_w2", 1.0))
        return cls(GcnParams(filters, skip=skip, attention=attention, attention_n=attention_n), sampler)


@dataclass
class Activations:
    """
    ``layer_inputs[ℓ]`` is h at the draw slots of plan layer ℓ (what that
    layer aggregates); ``hidden`` holds each layer's output bottom-up; the
    last entry is the logits of the targets.
    """
    layer_inputs: List[Tensor]
    hidden:       List[Tensor] = field(default_factory=list)

    @property
    def logits(self) -> Tensor:
        return self.hidden[-1]


# ── Helpers ───────────────────────────────────────────────────────────────────

def _guard(layer: str, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(str(exc), layer=layer) from exc


def _attention_edge_weights(params: ModelParams, features: np.ndarray, v_nodes: np.ndarray,
                            u_nodes: np.ndarray) -> Tensor:
    """Tensor (E × 1) of attention values between v_nodes[e] and u_nodes[e]."""
    uniq, inverse = np.unique(np.concatenate([v_nodes, u_nodes]), return_inverse=True)
    scores = self_dependent(params.sampler, features[uniq])
    g_v = gather_rows(scores, inverse[: len(v_nodes)])
    g_u = gather_rows(scores, inverse[len(v_nodes):])
    return attention_from_scores(params.sampler, g_v, g_u, params.gcn.attention_n)


def monte_carlo_mean(layer: LayerPlan, h: np.ndarray) -> np.ndarray:
    """μ̂_q(v_i) = (1/c_i) Σ_j p(û_j|v_i)/q_j · h(û_j), off the tape."""
    scaled = sp.diags(1.0 / layer.draws_per_parent) @ layer.importance_scale.csr
    return np.asarray(scaled @ h)


def exact_mean(g: NormalizedGraph, parents: np.ndarray, h: np.ndarray) -> np.ndarray:
    """μ_p(v_i) = Σ_u p(u|v_i) h(u)."""
    return np.asarray(g.transition.csr[parents] @ h)


def aggregate(layer: LayerPlan, hw: Tensor, params: ModelParams, features: np.ndarray,
              detach_sampler: bool = False) -> Tensor:
    """Σ_j w_ij / (c_i q_j) · (hW)_j, w = â or the attention value."""
    attention = params.gcn.attention
    sampler_grad = (not detach_sampler and layer.strategy == "adaptive" and not layer.fallback)
    if not attention and not sampler_grad:
        return spmm(layer.aggregation, hw)

    rows, cols, a_hat = layer.edges
    if attention:
        weight = _attention_edge_weights(params, features, layer.parent_nodes[rows],
                                         layer.sampled_nodes[cols])
    else:
        weight = Tensor(a_hat.reshape(-1, 1))
    inv_c = (1.0 / layer.draws_per_parent[rows]).reshape(-1, 1)

    if sampler_grad:
        q = differentiable_q(layer, params.sampler, features)
        values = div(mul(weight, inv_c), gather_rows(transpose(q), cols))
    else:
        values = mul(weight, inv_c / layer.q[cols].reshape(-1, 1))
    return edge_spmm(rows, cols, transpose(values), layer.support.shape, hw)


# ── Forward passes ────────────────────────────────────────────────────────────

def _propagate_full(g: NormalizedGraph, hw: Tensor, params: ModelParams,
                    features: np.ndarray) -> Tensor:
    if not params.gcn.attention:
        return spmm(g.adjacency, hw)
    rows, cols = edge_list(g)
    weight = _attention_edge_weights(params, features, rows, cols)
    return edge_spmm(rows, cols, transpose(weight), g.support.shape, hw)


def full_forward(g: NormalizedGraph, features: np.ndarray, params: ModelParams) -> Tensor:
    """Exact propagation through the whole graph → logits for every node."""
    if features.shape[0] != g.num_nodes:
        raise DimensionError(f"features have {features.shape[0]} rows for {g.num_nodes} nodes")
    filters = params.gcn.filters
    d = len(filters)
    h = Tensor(features)
    skip_source: Optional[Tensor] = None
    for k, w in enumerate(filters):
        if params.gcn.skip and k == d - 2:
            skip_source = h
        z = _guard(f"full/{k}", lambda: _propagate_full(g, matmul(h, w), params, features))
        if k == d - 1 and skip_source is not None:
            s = g.support
            skip = _guard("full/skip", lambda: spmm(s, spmm(s, matmul(skip_source, matmul(filters[-2], w)))))
            z = z + skip
        h = z if k == d - 1 else relu(z)
    return h


def two_hop_forward(g: NormalizedGraph, features: np.ndarray, params: ModelParams,
                    max_nodes: int = 25_000) -> Tensor:
    """full_forward with Â replaced by Â + Â²."""
    return full_forward(two_hop_graph(g, max_nodes=max_nodes), features, params)


def skip_weights(top: LayerPlan, middle: LayerPlan, weighting: str = "verbatim") -> SparseMatrix:
    """
    â_skip(v_i, s_j) ≈ Σ_k â(v_i, u_k) â(u_k, s_j) over the middle slots u_k.
    ``importance`` divides each middle term by c_i q_k, making the estimate
    unbiased for the Â² entry.
    """
    if weighting not in SKIP_WEIGHTINGS:
        raise ConfigError(f"unknown skip weighting '{weighting}' (valid: {', '.join(SKIP_WEIGHTINGS)})")
    if top.num_slots != middle.num_parents:
        raise DimensionError("skip: middle layer does not chain onto the top layer")
    left = top.support.csr if weighting == "verbatim" else top.aggregation.csr
    return SparseMatrix(left @ middle.support.csr)


def skip_forward(plan: NetworkPlan, source: Tensor, params: ModelParams,
                 weighting: str = "verbatim") -> Tensor:
    """Σ_j â_skip(v_i, s_j) · h(s_j) W⁽ᵈ⁻²⁾W⁽ᵈ⁻¹⁾ for the targets of ``plan``."""
    if plan.depth < 2:
        raise ConfigError("the skip connection needs a plan with at least two layers")
    a_skip = skip_weights(plan.layers[0], plan.layers[1], weighting)
    w_skip = matmul(params.gcn.filters[-2], params.gcn.filters[-1])
    return spmm(a_skip, matmul(source, w_skip))


def sampled_forward(plan: NetworkPlan, features: np.ndarray, params: ModelParams,
                    detach_sampler: bool = False, skip_weighting: str = "verbatim") -> Activations:
    """
    Evaluate the plan bottom-up. Layer ℓ of the plan uses filter W⁽ᵈ⁻¹⁻ℓ⁾.
    Adaptive layers recompute q from W_g with the draws fixed, so the output
    is differentiable in W_g. ``detach_sampler=True`` treats the recorded q
    as constants; the trainer does that unless sampler_grad_from_classification
    is set, leaving W_g to the variance term.
    """
    d = plan.depth
    if params.gcn.depth != d:
        raise DimensionError(f"plan has {d} layers, model has {params.gcn.depth} filters")

    h = Tensor(features[plan.input_nodes])
    acts = Activations(layer_inputs=[None] * d)  # type: ignore[list-item]
    for ell in reversed(range(d)):
        layer = plan.layers[ell]
        w = params.gcn.filters[d - 1 - ell]
        acts.layer_inputs[ell] = h
        label = f"{plan.strategy}/{d - 1 - ell}"
        z = _guard(label, lambda: aggregate(layer, matmul(h, w), params, features, detach_sampler))
        if ell == 0 and params.gcn.skip:
            skip = _guard(f"{plan.strategy}/skip",
                          lambda: skip_forward(plan, acts.layer_inputs[1], params, skip_weighting))
            z = z + skip
        h = z if ell == 0 else relu(z)
        acts.hidden.append(h)
    return acts
