"""
selftest.py
===========
Statistical and gradient oracles on built-in toy graphs (≤ 10 nodes).

Oracles
-------
  op_gradients         every tape op vs central differences (≤ 1e-4)
  end_to_end_gradients hybrid loss over a fixed plan vs central differences
  optimal_sampler_grid q* beats a 1035-point interior simplex grid
  empirical_variance   Monte-Carlo mean of V̂ vs (n − 1)/n · exact variance
  sampler_gradients    closed-form ∂V̂/∂q, W_g chain rule and zero-mean checks
  mean_unbiased        mean of μ̂ over 10⁵ plans per sampler vs the exact mean (3σ)
  full_support         full plans reproduce full_forward (plain, skip, attention)
  skip_exact           skip weights over a full middle layer equal Â²

``run_selftest(only="variance")`` keeps the oracles whose name or group
matches. ``grad_sign=-1`` flips the closed-form ∂V̂/∂q as a negative control.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .estimators import (
    ModelParams,
    exact_mean,
    full_forward,
    monte_carlo_mean,
    sampled_forward,
    skip_weights,
)
from .graph_store import NormalizedGraph, RawDataset, make_dataset, normalize
from .samplers import (
    AliasTable,
    LayerPlan,
    SamplerParams,
    adaptive_layer_sample,
    attention_view,
    build_network_plan,
    iid_layer_sample,
    node_wise_sample,
)
from .tensor_core import (
    SparseMatrix,
    Tensor,
    abs_,
    cross_entropy,
    div,
    edge_spmm,
    finite_difference_grad,
    gather_rows,
    log,
    matmul,
    mul,
    power,
    relative_error,
    relu,
    row_norm,
    softmax_rows,
    spmm,
    sum_all,
    sum_cols,
    sum_rows,
    transpose,
)
from .variance import (
    GradientCheckReport,
    empirical_variance,
    hybrid_loss,
    optimal_q,
    sampler_gradient_checks,
    variance_exact,
    variance_penalty,
)

logger = logging.getLogger("adaptgcn.selftest")

GRID_RESOLUTION = 47          # interior points i + j + k = 47, i, j, k ≥ 1 → 1035
MC_REPEATS = 100_000


# ── Toy graphs ────────────────────────────────────────────────────────────────

def toy_dataset(seed: int = 0, num_features: int = 4) -> RawDataset:
    """Eight nodes, two classes, a ring with three chords."""
    rng = np.random.default_rng(seed)
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 0),
             (0, 4), (1, 5), (2, 6)]
    labels = np.array([0, 0, 0, 1, 1, 1, 0, 1])
    features = rng.normal(size=(8, num_features)) + labels.reshape(-1, 1)
    splits = {"train": np.array([0, 1, 3, 4]), "val": np.array([2, 5]), "test": np.array([6, 7])}
    return make_dataset(edges, features, labels, splits, name="toy8")


def path_dataset(seed: int = 0) -> RawDataset:
    """Five-node path 0–1–2–3–4; node 2 has three candidates (itself included)."""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(5, 3))
    return make_dataset([(0, 1), (1, 2), (2, 3), (3, 4)], features, np.array([0, 1, 0, 1, 0]),
                        name="path5")


def six_dataset(seed: int = 0, num_features: int = 4) -> RawDataset:
    """Six-node ring with the chord 0–3."""
    rng = np.random.default_rng(seed)
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)]
    labels = np.array([0, 0, 0, 1, 1, 1])
    features = rng.normal(size=(6, num_features)) + labels.reshape(-1, 1)
    return make_dataset(edges, features, labels, name="ring6")


def _neighbourhood(g: NormalizedGraph, v: int) -> Tuple[np.ndarray, np.ndarray]:
    ids, p = g.transition.row(v)
    return ids.astype(np.int64), p


def _slot_block_means(layer: LayerPlan, h: np.ndarray, n: int) -> np.ndarray:
    """
    Cut a layer-wise plan with plans·n i.i.d. slots into consecutive blocks
    of n; each block is an independent n-draw plan → (plans × parents × dims).
    """
    contrib = layer.importance_scale.csr.toarray()[:, :, None] * h[layer.sampled_nodes][None, :, :]
    m, slots, d = contrib.shape
    return contrib.reshape(m, slots // n, n, d).mean(axis=2).transpose(1, 0, 2)


# ── Registry ──────────────────────────────────────────────────────────────────

OracleFn = Callable[[GradientCheckReport, np.random.Generator, float], None]


@dataclass(frozen=True)
class Oracle:
    name:  str
    group: str
    run:   OracleFn


_ORACLES: List[Oracle] = []


def oracle(name: str, group: str):
    def register(fn: OracleFn) -> OracleFn:
        _ORACLES.append(Oracle(name, group, fn))
        return fn
    return register


def oracles(only: Optional[str] = None) -> List[Oracle]:
    if not only:
        return list(_ORACLES)
    return [o for o in _ORACLES if only == o.group or only in o.name]


# ── Gradient oracles ──────────────────────────────────────────────────────────

def _tape_vs_fd(build: Callable[[], Tensor], leaves: Sequence[Tensor]) -> float:
    """Worst relative error between backward() and central differences."""
    build().backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.value)
                for leaf in leaves]
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        numeric = finite_difference_grad(lambda: build().item(), leaf.value)
        worst = max(worst, relative_error(grad, numeric))
    return worst


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.normal(size=shape)
    return x + 0.2 * np.sign(x)


@oracle("op_gradients", "tensor")
def _op_gradients(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    a = Tensor(_away_from_zero(rng, (4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    d = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    s = SparseMatrix(sp.random(5, 4, density=0.5, random_state=np.random.RandomState(7)))
    rows = np.array([0, 0, 1, 2, 2])
    cols = np.array([1, 3, 0, 2, 3])
    values = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    w43 = rng.normal(size=(4, 3))
    w42 = rng.normal(size=(4, 2))

    cases: Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]] = {
        "matmul":        (lambda: sum_all(mul(matmul(a, b), w42)), [a, b]),
        "spmm":          (lambda: sum_all(spmm(s, d)), [d]),
        "edge_spmm":     (lambda: sum_all(mul(edge_spmm(rows, cols, values, (3, 4), d),
                                              w42[:3])), [values, d]),
        "div":           (lambda: sum_all(mul(div(a, pos), w43)), [a, pos]),
        "log":           (lambda: sum_all(mul(log(pos), w43)), [pos]),
        "power":         (lambda: sum_all(mul(power(pos, 1.5), w43)), [pos]),
        "abs":           (lambda: sum_all(mul(abs_(a), w43)), [a]),
        "relu":          (lambda: sum_all(mul(relu(a), w43)), [a]),
        "transpose":     (lambda: sum_all(mul(transpose(a), w43.T)), [a]),
        "gather_rows":   (lambda: sum_all(mul(gather_rows(a, np.array([2, 0, 2, 3])), w43)), [a]),
        "sum_rows":      (lambda: sum_all(mul(sum_rows(a), w43[:, :1])), [a]),
        "sum_cols":      (lambda: sum_all(mul(sum_cols(a), w43[:1])), [a]),
        "row_norm_l2":   (lambda: sum_all(mul(row_norm(a, "l2"), w43[:, :1])), [a]),
        "row_norm_l1":   (lambda: sum_all(mul(row_norm(a, "l1"), w43[:, :1])), [a]),
        "softmax_rows":  (lambda: sum_all(mul(softmax_rows(a), w43)), [a]),
        "cross_entropy": (lambda: cross_entropy(a, np.array([0, 2, 1, 2])), [a]),
    }
    for op, (build, leaves) in cases.items():
        report.add(f"op_gradients/{op}", _tape_vs_fd(build, leaves), 1e-4)


@oracle("end_to_end_gradients", "variance")
def _end_to_end(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    raw = toy_dataset(int(rng.integers(1 << 16)))
    g = normalize(raw)
    x, y = raw.features, raw.labels
    targets = raw.train_idx[:3]

    variants = {
        "adaptive":            dict(strategy="adaptive", skip=False, attention=False),
        "adaptive_skip":       dict(strategy="adaptive", skip=True, attention=False),
        "node_wise_attention": dict(strategy="node_wise", skip=False, attention=True),
    }
    for label, v in variants.items():
        params = ModelParams.init(raw.num_features, [3], raw.num_classes, rng,
                                  skip=v["skip"], attention=v["attention"], attention_n=4.0)
        view = attention_view(g, params.sampler, x, 4.0) if v["attention"] else g
        sizes = [2, 2] if v["strategy"] == "node_wise" else [4, 4]
        plan = build_network_plan(view, targets, sizes, v["strategy"], rng,
                                  params=params.sampler, features=x)

        def loss() -> Tensor:
            acts = sampled_forward(plan, x, params, detach_sampler=False)
            penalty, _ = (variance_penalty(plan, acts, params, x, layers="all")
                          if v["strategy"] == "adaptive" else (0.0, []))
            return hybrid_loss(acts.logits, y[plan.targets], penalty, 0.5).loss

        leaves = params.leaves()
        used = [leaves[k] for k in leaves if k.startswith("W")]
        if v["strategy"] == "adaptive":
            used.append(leaves["w_g"])
        if v["attention"]:
            used += [leaves["w_g"], leaves["att_w1"], leaves["att_w2"]]
        report.add(f"end_to_end_gradients/{label}", _tape_vs_fd(loss, used), 1e-4)


@oracle("sampler_gradients", "variance")
def _sampler_gradients(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    raw = toy_dataset(int(rng.integers(1 << 16)))
    sub = sampler_gradient_checks(normalize(raw), raw.features,
                                  seed=int(rng.integers(1 << 16)), grad_sign=grad_sign)
    for r in sub.results:
        report.add(f"sampler_gradients/{r.name}", r.value, r.limit, r.detail)


# ── Variance oracles ──────────────────────────────────────────────────────────

def simplex_grid(k: int, r: int) -> np.ndarray:
    """Interior grid points of the (k−1)-simplex with denominator r (k = 3 only)."""
    if k != 3:
        raise ValueError("simplex_grid supports k = 3")
    pts = [(i, j, r - i - j) for i in range(1, r) for j in range(1, r - i)]
    return np.asarray(pts, dtype=np.float64) / r


@oracle("optimal_sampler_grid", "variance")
def _optimal_sampler(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    g = normalize(path_dataset(int(rng.integers(1 << 16))))
    v, n = 2, 3
    h = rng.normal(size=(g.num_nodes, 3))
    support, _ = _neighbourhood(g, v)
    q_star = optimal_q(g, v, h)
    best = variance_exact(g, q_star, v, h, n)

    grid = simplex_grid(len(support), GRID_RESOLUTION)
    values = np.empty(len(grid))
    for i, point in enumerate(grid):
        q = np.zeros(g.num_nodes)
        q[support] = point
        values[i] = variance_exact(g, q, v, h, n)

    report.add("optimal_sampler_grid/margin", max(0.0, best - float(values.min())), 1e-12,
               detail=f"{len(grid)} grid points")
    tied = values <= best + 1e-12
    far = np.max(np.abs(grid - q_star[support]), axis=1) > 1e-9
    report.add("optimal_sampler_grid/ties_away_from_q*", float(np.sum(tied & far)), 0.0)


@oracle("empirical_variance", "variance")
def _empirical_variance(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    g = normalize(toy_dataset(int(rng.integers(1 << 16))))
    v = int(np.argmax(g.degree))
    n = 4
    h = rng.normal(size=(g.num_nodes, 3))
    nb, p = _neighbourhood(g, v)
    a = p * np.sqrt((h[nb] ** 2).sum(axis=1))
    q_local = rng.uniform(0.2, 1.0, size=len(nb))
    q_local /= q_local.sum()
    q = np.zeros(g.num_nodes)
    q[nb] = q_local

    draws = AliasTable(q_local).sample(MC_REPEATS * n, rng).reshape(MC_REPEATS, n)
    y = a[draws] / q_local[draws]
    v_hat = ((y - y.mean(axis=1, keepdims=True)) ** 2).sum(axis=1) / n ** 2
    expected = (n - 1) / n * variance_exact(g, q, v, h, n)
    stderr = v_hat.std(ddof=1) / np.sqrt(MC_REPEATS)
    report.add("empirical_variance/mc_within_3se", abs(v_hat.mean() - expected) / (3.0 * stderr), 1.0,
               detail=f"{MC_REPEATS} repeats, n={n}")

    first = empirical_variance(a[draws[0]], q_local[draws[0]], n)
    report.add("empirical_variance/vectorised_vs_closed_form", abs(first - v_hat[0]), 1e-12)


# ── Estimator oracles ─────────────────────────────────────────────────────────

@oracle("mean_unbiased", "samplers")
def _mean_unbiased(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    """Mean of μ̂ over 10⁵ independent plans within 3 standard errors of μ, per component."""
    raw = six_dataset(int(rng.integers(1 << 16)))
    g = normalize(raw)
    params = SamplerParams.init(raw.num_features, rng)
    h = rng.normal(size=(g.num_nodes, 2))
    parents = np.array([0, 4])
    exact = exact_mean(g, parents, h)
    plans, n, k = MC_REPEATS, 3, 2

    def node_wise(mode: str) -> np.ndarray:
        layer = node_wise_sample(g, np.tile(parents, plans), k, rng, mode=mode)
        return monte_carlo_mean(layer, h[layer.sampled_nodes]).reshape(plans, len(parents), -1)

    estimates = {
        "iid":      _slot_block_means(iid_layer_sample(g, parents, n * plans, rng), h, n),
        "adaptive": _slot_block_means(
            adaptive_layer_sample(g, parents, params, raw.features, n * plans, rng), h, n),
        "node_wise":              node_wise("uniform"),
        "node_wise_proportional": node_wise("proportional"),
    }
    for label, est in estimates.items():
        stderr = est.std(axis=0, ddof=1) / np.sqrt(plans)
        score = np.abs(est.mean(axis=0) - exact) / np.maximum(3.0 * stderr, 1e-12)
        report.add(f"mean_unbiased/{label}", float(score.max()), 1.0,
                   detail=f"|bias| / 3σ, {plans} plans")


@oracle("full_support", "estimators")
def _full_support(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    raw = toy_dataset(int(rng.integers(1 << 16)))
    g = normalize(raw)
    targets = np.arange(g.num_nodes)
    for label, skip, attention in (("plain", False, False), ("skip", True, False),
                                   ("attention", False, True)):
        params = ModelParams.init(raw.num_features, [5], raw.num_classes, rng,
                                  skip=skip, attention=attention, attention_n=4.0)
        plan = build_network_plan(g, targets, [1, 1], "full", rng)
        sampled = sampled_forward(plan, raw.features, params).logits.value
        full = full_forward(g, raw.features, params).value[targets]
        report.add(f"full_support/{label}", float(np.max(np.abs(sampled - full))), 1e-10)


@oracle("skip_exact", "estimators")
def _skip_exact(report: GradientCheckReport, rng: np.random.Generator, grad_sign: float) -> None:
    g = normalize(toy_dataset(int(rng.integers(1 << 16))))
    targets = np.array([0, 3, 5])
    plan = build_network_plan(g, targets, [1, 1], "full", rng)
    top, middle = plan.layers
    a_hat = g.adjacency.csr
    dense = (a_hat @ a_hat).toarray()[targets][:, middle.sampled_nodes]
    for weighting in ("verbatim", "importance"):
        estimate = skip_weights(top, middle, weighting).densify()
        report.add(f"skip_exact/{weighting}", float(np.max(np.abs(estimate - dense))), 1e-12)


# ── Runner ────────────────────────────────────────────────────────────────────

def run_selftest(only: Optional[str] = None, seed: int = 0, grad_sign: float = 1.0) -> GradientCheckReport:
    """Run the selected oracles, each from its own seeded generator."""
    report = GradientCheckReport()
    chosen = oracles(only)
    if not chosen:
        logger.warning("no oracle matches filter '%s'", only)
    for i, o in enumerate(chosen):
        logger.info("oracle %s (%s)", o.name, o.group)
        o.run(report, np.random.default_rng([seed, i]), grad_sign)
    return report
