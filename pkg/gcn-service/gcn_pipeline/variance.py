"""
variance.py
===========
Variance of the layer-wise estimator, the hybrid loss and the sampler
gradient checks.

For a parent v with draws û_1…û_n from q, write a(u) = p(u|v)·|h(u)| and
Y_j = a(û_j) / q(û_j). Then

  exact     Var = (1/n) Σ_u (a(u) − μ q(u))² / q(u),   μ = Σ_u a(u)
  empirical V̂   = (1/n²) Σ_j (Y_j − μ̂)²,              μ̂ = (1/n) Σ_j Y_j
  gradient  ∂V̂/∂q_j = −(2/n²) · a_j (a_j − μ̂ q_j) / q_j³

E[V̂] = (n − 1)/n · Var. The exact variance vanishes at q* ∝ p·|h|.
|h| is the Euclidean (or L1) norm of the hidden row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, SupportError
from .estimators import ModelParams
from .graph_store import NormalizedGraph
from .samplers import (
    LayerPlan,
    NetworkPlan,
    SamplerParams,
    adaptive_layer_sample,
    differentiable_q,
)
from .tensor_core import (
    SparseMatrix,
    Tensor,
    add,
    as_tensor,
    cross_entropy,
    div,
    finite_difference_grad,
    gather_rows,
    log,
    matmul,
    mean_all,
    mul,
    relative_error,
    row_norm,
    spmm,
    square,
    sub,
    sum_all,
    transpose,
)

logger = logging.getLogger("adaptgcn.variance")

VARIANCE_LAYERS = ("top", "all")


# ── Hybrid loss ───────────────────────────────────────────────────────────────

@dataclass
class HybridLossReport:
    classification_loss: float
    variance_penalty:    float
    lam:                 float
    total:               float
    loss:                Tensor = field(repr=False)     # on the tape, for backward()
    layer_penalties:     List[float] = field(default_factory=list)


def hybrid_loss(logits: Tensor, labels, variance_penalty: Union[Tensor, float],
                lam: float = 0.5, layer_penalties: Optional[List[float]] = None) -> HybridLossReport:
    """mean cross-entropy + λ · variance penalty."""
    if lam < 0:
        raise ConfigError(f"λ must be ≥ 0, got {lam}")
    l_c = cross_entropy(logits, labels)
    penalty = as_tensor(variance_penalty)
    total = add(l_c, mul(penalty, lam))
    return HybridLossReport(
        classification_loss=l_c.item(),
        variance_penalty=penalty.item(),
        lam=lam,
        total=total.item(),
        loss=total,
        layer_penalties=list(layer_penalties or []),
    )


# ── Exact variance (toy graphs) ───────────────────────────────────────────────

def _magnitudes(h: np.ndarray, norm: str) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        return np.abs(h)
    if norm == "l2":
        return np.sqrt((h ** 2).sum(axis=1))
    if norm == "l1":
        return np.abs(h).sum(axis=1)
    raise ConfigError(f"unknown norm '{norm}' (expected l2 | l1)")


def _target_terms(g: NormalizedGraph, q: np.ndarray, v: int, h: np.ndarray, norm: str):
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != g.num_nodes:
        raise SupportError(f"q has {q.size} entries for {g.num_nodes} nodes")
    p = np.asarray(g.transition.csr[v].todense()).reshape(-1)
    if np.any((p > 0) & (q <= 0)):
        raise SupportError(f"q vanishes where p(·|{v}) is positive")
    a = p * _magnitudes(h, norm)
    return a, q, float(a.sum())


def variance_exact(g: NormalizedGraph, q: np.ndarray, v: int, h: np.ndarray,
                   n: int = 1, norm: str = "l2") -> float:
    """(1/n) Σ_u (p|h| − μ q)² / q over the nodes with q > 0."""
    a, q, mu = _target_terms(g, q, v, h, norm)
    live = q > 0
    return float(np.sum((a[live] - mu * q[live]) ** 2 / q[live]) / n)


def variance_exact_grad(g: NormalizedGraph, q: np.ndarray, v: int, h: np.ndarray,
                        n: int = 1, norm: str = "l2") -> np.ndarray:
    """∂Var/∂q(u) = (μ² − a(u)²/q(u)²) / n; zero where q = 0."""
    a, q, mu = _target_terms(g, q, v, h, norm)
    live = q > 0
    grad = np.zeros_like(q)
    grad[live] = (mu ** 2 - (a[live] / q[live]) ** 2) / n
    return grad


def optimal_q(g: NormalizedGraph, v: int, h: np.ndarray, norm: str = "l2") -> np.ndarray:
    """q*(u) ∝ p(u|v)·|h(u)|."""
    p = np.asarray(g.transition.csr[v].todense()).reshape(-1)
    a = p * _magnitudes(h, norm)
    return a / a.sum()


# ── Empirical variance (closed form, off the tape) ────────────────────────────

def empirical_variance(a: np.ndarray, q: np.ndarray, n: Optional[int] = None) -> float:
    """V̂ over the draws of one parent; ``a`` is p·|h| per draw."""
    a, q = np.asarray(a, dtype=np.float64), np.asarray(q, dtype=np.float64)
    n = n or a.size
    y = a / q
    mu = y.sum() / n
    return float(((y - mu) ** 2).sum() / n ** 2)


def empirical_variance_grad(a: np.ndarray, q: np.ndarray, n: Optional[int] = None,
                            sign: float = 1.0) -> np.ndarray:
    """∂V̂/∂q_j. ``sign`` exists only for the self-test's negative control."""
    a, q = np.asarray(a, dtype=np.float64), np.asarray(q, dtype=np.float64)
    n = n or a.size
    mu = (a / q).sum() / n
    return sign * -(2.0 / n ** 2) * a * (a - mu * q) / q ** 3


# ── Empirical variance on the tape ────────────────────────────────────────────

def variance_empirical(layer: LayerPlan, h: Tensor, mu_hat: Optional[Tensor] = None,
                       q: Optional[Tensor] = None, norm: str = "l2") -> Tensor:
    """
    V̂ per parent → (parents × 1). ``h`` holds the hidden rows at the draw
    slots; ``q`` (1 × slots) defaults to the recorded, constant q. Slots with
    p(û_j|v_i) = 0 contribute μ̂_i² each.
    """
    csr = layer.sub_adj.csr
    m = csr.shape[0]
    counts = np.diff(csr.indptr)
    rows = np.repeat(np.arange(m), counts)
    cols = csr.indices.astype(np.int64)
    nnz = len(cols)
    c = layer.draws_per_parent.reshape(-1, 1)

    q_col = transpose(q) if q is not None else Tensor(layer.q.reshape(-1, 1))
    magnitude = row_norm(h, norm)
    y = mul(div(gather_rows(magnitude, cols), gather_rows(q_col, cols)), csr.data.reshape(-1, 1))

    segments = SparseMatrix.from_coo(rows, np.arange(nnz), np.ones(nnz), (m, nnz))
    mu = mu_hat if mu_hat is not None else mul(spmm(segments, y), 1.0 / c)
    spread = spmm(segments, square(sub(y, gather_rows(mu, rows))))
    empty = (c - counts.reshape(-1, 1))
    return mul(add(spread, mul(square(mu), empty)), 1.0 / c ** 2)


def variance_penalty(plan: NetworkPlan, acts, params: ModelParams, features: np.ndarray,
                     layers: str = "top", norm: str = "l2") -> Tuple[Tensor, List[float]]:
    """
    Mean V̂ over the parents of the penalised layers. ``top`` penalises the
    output layer only; ``all`` adds every sampled layer. Returns the tensor
    and the per-layer values.
    """
    if layers not in VARIANCE_LAYERS:
        raise ConfigError(f"unknown variance_layers '{layers}' (valid: {', '.join(VARIANCE_LAYERS)})")
    chosen = [0] if layers == "top" else list(range(plan.depth))
    total: Optional[Tensor] = None
    per_layer: List[float] = []
    for ell in chosen:
        layer = plan.layers[ell]
        q = differentiable_q(layer, params.sampler, features)
        term = mean_all(variance_empirical(layer, acts.layer_inputs[ell], q=q, norm=norm))
        per_layer.append(term.item())
        total = term if total is None else add(total, term)
    return total, per_layer


# ── Gradient checks ───────────────────────────────────────────────────────────

@dataclass
class CheckResult:
    name:   str
    passed: bool
    value:  float
    limit:  float
    detail: str = ""


@dataclass
class GradientCheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def add(self, name: str, value: float, limit: float, detail: str = "") -> CheckResult:
        result = CheckResult(name, bool(value <= limit), float(value), limit, detail)
        self.results.append(result)
        return result

    def by_name(self) -> Dict[str, CheckResult]:
        return {r.name: r for r in self.results}


def _random_positive_simplex(k: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(0.05, 1.0, size=k)
    return w / w.sum()


def check_expectation_invariance(g: NormalizedGraph, h: np.ndarray, v: int,
                                 rng: np.random.Generator, trials: int = 5) -> float:
    """Max deviation of Σ_u q(u)·(p(u|v)/q(u))·h(u) across random positive q."""
    p = np.asarray(g.transition.csr[v].todense()).reshape(-1)
    support = np.flatnonzero(p)
    reference = p[support] @ h[support]
    worst = 0.0
    for _ in range(trials):
        q = _random_positive_simplex(len(support), rng)
        value = (q * (p[support] / q)) @ h[support]
        worst = max(worst, float(np.max(np.abs(value - reference))))
    return worst


def check_variance_grad_closed_form(rng: np.random.Generator, n: int = 6, sign: float = 1.0) -> float:
    """Relative error between the closed-form ∂V̂/∂q and central differences."""
    a = rng.uniform(0.1, 2.0, size=n)
    q = rng.uniform(0.05, 0.5, size=n)
    analytic = empirical_variance_grad(a, q, n, sign=sign)
    numeric = finite_difference_grad(lambda: empirical_variance(a, q, n), q, h=1e-6)
    return relative_error(analytic, numeric)


def check_tape_against_closed_form(rng: np.random.Generator, n: int = 5) -> float:
    """variance_empirical's q-gradient vs the closed form on a one-parent plan."""
    p = rng.uniform(0.1, 1.0, size=n)
    q = rng.uniform(0.05, 0.5, size=n)
    h = rng.normal(size=(n, 3))
    rows, cols = np.zeros(n, dtype=np.int64), np.arange(n)
    block = SparseMatrix.from_coo(rows, cols, p, (1, n))
    plan = LayerPlan(
        strategy="adaptive", parent_nodes=np.zeros(1, dtype=np.int64),
        sampled_nodes=np.arange(n), q=q, sub_adj=block, support=block,
        importance_scale=SparseMatrix.from_coo(rows, cols, p / q, (1, n)),
        row_mass=np.ones(1), draws_per_parent=np.full(1, float(n)),
    )
    q_leaf = Tensor(q.reshape(1, -1), requires_grad=True)
    v_hat = variance_empirical(plan, Tensor(h), q=q_leaf)
    v_hat.backward()
    a = p * np.sqrt((h ** 2).sum(axis=1))
    return relative_error(q_leaf.grad.reshape(-1), empirical_variance_grad(a, q, n))


def check_wg_chain_rule(g: NormalizedGraph, features: np.ndarray, parents: np.ndarray,
                        rng: np.random.Generator, n: int = 4) -> float:
    """∂(mean V̂)/∂W_g through q, draws fixed, vs finite differences."""
    params = SamplerParams.init(features.shape[1], rng)
    layer = adaptive_layer_sample(g, parents, params, features, n, rng)
    h = Tensor(rng.normal(size=(n, 3)))

    def penalty() -> Tensor:
        return mean_all(variance_empirical(layer, h, q=differentiable_q(layer, params, features)))

    penalty().backward()
    analytic = params.w_g.grad.copy()
    numeric = finite_difference_grad(lambda: penalty().item(), params.w_g.value)
    return relative_error(analytic, numeric)


def check_projected_grad_at_optimum(g: NormalizedGraph, h: np.ndarray, v: int, n: int = 3) -> float:
    """‖grad − mean(grad)‖∞ over the support, evaluated at q*."""
    q_star = optimal_q(g, v, h)
    support = q_star > 0
    grad = variance_exact_grad(g, q_star, v, h, n)[support]
    return float(np.max(np.abs(grad - grad.mean())))


def _grad_or_zero(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.value)


def score_function_gradient(g: NormalizedGraph, features: np.ndarray, h: np.ndarray,
                            v: int, readout: np.ndarray, params, n: int,
                            rng: np.random.Generator) -> np.ndarray:
    """
    One sample of the pathwise + score-function gradient of r·μ̂(v) w.r.t.
    W_g. Its expectation is the gradient of r·μ(v), which does not depend on
    the sampler, so samples average to zero.
    """
    layer = adaptive_layer_sample(g, np.array([v]), params, features, n, rng)
    q = differentiable_q(layer, params, features)
    q_col = transpose(q)
    weights = mul(div(Tensor(layer.sub_adj.densify().reshape(-1, 1)), q_col), 1.0 / n)
    mu_hat = sum_all(mul(weights, Tensor(h[layer.sampled_nodes] @ readout.reshape(-1, 1))))
    mu_hat.backward()
    pathwise = _grad_or_zero(params.w_g).copy()

    sum_all(log(q_col)).backward()
    return pathwise + mu_hat.item() * _grad_or_zero(params.w_g)


def classification_readout(g: NormalizedGraph, h: np.ndarray, v: int,
                           w_out: np.ndarray, label: int) -> np.ndarray:
    """
    ∂L/∂μ(v) for L = hybrid_loss(μ(v)·W_out, label) at the exact aggregation
    μ(v), with λ = 0. Contracting μ̂(v) with it gives the classification
    loss to first order around the exact forward pass.
    """
    mu = Tensor(np.asarray(g.transition.csr[v] @ h).reshape(1, -1), requires_grad=True)
    report = hybrid_loss(matmul(mu, Tensor(w_out)), [label], 0.0, lam=0.0)
    report.loss.backward()
    return mu.grad.reshape(-1).copy()


def check_zero_mean_sampler_gradient(g: NormalizedGraph, features: np.ndarray,
                                     rng: np.random.Generator, v: int = 0,
                                     samples: int = 10_000, n: int = 3, sigmas: float = 3.0) -> float:
    """
    Largest |mean| / (sigmas·stderr) over the W_g components of the
    classification-loss gradient; ≤ 1 passes. The loss is linearised at the
    exact aggregation: the second-order term of E[L(μ̂)] scales with the
    estimator variance and does depend on q.
    """
    params = SamplerParams.init(features.shape[1], rng)
    h = rng.normal(size=(g.num_nodes, 3))
    w_out = rng.normal(size=(3, 2))
    readout = classification_readout(g, h, v, w_out, int(rng.integers(2)))
    draws = np.stack([
        score_function_gradient(g, features, h, v, readout, params, n, rng).reshape(-1)
        for _ in range(samples)
    ])
    mean = draws.mean(axis=0)
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(samples)
    return float(np.max(np.abs(mean) / np.maximum(sigmas * stderr, 1e-12)))


def sampler_gradient_checks(g: NormalizedGraph, features: np.ndarray, seed: int = 0,
                            grad_sign: float = 1.0) -> GradientCheckReport:
    """Run every sampler-gradient check on a toy graph (≤ 10 nodes)."""
    rng = np.random.default_rng(seed)
    report = GradientCheckReport()
    h = rng.normal(size=(g.num_nodes, 3))
    v = int(np.argmax(g.degree))

    report.add("expectation_invariant_in_q", check_expectation_invariance(g, h, v, rng), 1e-10)
    report.add("variance_grad_vs_finite_diff", check_variance_grad_closed_form(rng, sign=grad_sign), 1e-5)
    report.add("tape_q_grad_vs_closed_form", check_tape_against_closed_form(rng), 1e-10)
    report.add("w_g_chain_rule", check_wg_chain_rule(g, features, np.array([v, (v + 1) % g.num_nodes]), rng), 1e-4)
    report.add("projected_grad_at_optimum", check_projected_grad_at_optimum(g, h, v), 1e-6)
    report.add("sampler_grad_zero_mean", check_zero_mean_sampler_gradient(g, features, rng, v=v), 1.0,
               detail="|mean| / 3σ, 10⁴ plans")
    for r in report.results:
        logger.debug("%s: %.3e (limit %.1e) %s", r.name, r.value, r.limit, "ok" if r.passed else "FAIL")
    return report
