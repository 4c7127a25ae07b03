"""
tensor_core.py
==============
Minimal dense / sparse linear algebra with reverse-mode differentiation and
an Adam optimiser: enough to express the GCN forward pass, the sampler, the
attention values and the variance penalty, and to train them.

Building blocks
---------------
  • SparseMatrix  – immutable CSR wrapper (sorted columns, no explicit zeros).
  • Tensor        – 2-D float64 value on a tape; ``backward()`` walks the tape
                    in reverse topological order and accumulates ``grad``.
  • AdamState     – per-parameter moments + step counter; ``adam_step`` applies
                    one update with L2 weight decay folded into the gradient.

Every op checks its output for NaN / Inf and raises ``NumericError``.

Usage
-----
>>> w = Tensor(np.ones((3, 2)), requires_grad=True)
>>> loss = sum_all(relu(matmul(x, w)))
>>> loss.backward()
>>> w.grad.shape
(3, 2)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, InputError, NumericError

DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


# ── Sparse matrices ───────────────────────────────────────────────────────────

class SparseMatrix:
    """
    Row-compressed sparse matrix.

    Invariants: column indices strictly increasing within each row, no stored
    zeros, every index < cols. Instances are never mutated after construction.
    """

    __slots__ = ("_csr",)

    def __init__(self, matrix: Union[sp.spmatrix, np.ndarray]):
        csr = sp.csr_matrix(matrix, dtype=DTYPE, copy=True)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        csr.data.setflags(write=False)
        csr.indices.setflags(write=False)
        csr.indptr.setflags(write=False)
        self._csr = csr

    @classmethod
    def from_coo(cls, rows: np.ndarray, cols: np.ndarray, values: np.ndarray,
                 shape: Tuple[int, int]) -> "SparseMatrix":
        return cls(sp.coo_matrix((values, (rows, cols)), shape=shape))

    @property
    def shape(self) -> Tuple[int, int]:
        return self._csr.shape

    @property
    def rows(self) -> int:
        return self._csr.shape[0]

    @property
    def cols(self) -> int:
        return self._csr.shape[1]

    @property
    def indptr(self) -> np.ndarray:
        return self._csr.indptr

    @property
    def indices(self) -> np.ndarray:
        return self._csr.indices

    @property
    def data(self) -> np.ndarray:
        return self._csr.data

    @property
    def nnz(self) -> int:
        return int(self._csr.nnz)

    @property
    def csr(self) -> sp.csr_matrix:
        """The underlying scipy matrix (read-only arrays)."""
        return self._csr

    def row(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self._csr.indptr[i], self._csr.indptr[i + 1]
        return self._csr.indices[lo:hi], self._csr.data[lo:hi]

    def densify(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self._csr.T)

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


# ── Tape ──────────────────────────────────────────────────────────────────────

class Tensor:
    """A 2-D value on the reverse-mode tape."""

    __slots__ = ("value", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        value: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _op: str = "leaf",
    ):
        arr = np.asarray(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise DimensionError(f"Tensor supports matrices only, got ndim={arr.ndim}")
        self.value: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # ── Introspection ──────────────────────────────────────────────────────────

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1×1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ── Backward ───────────────────────────────────────────────────────────────

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable tensor."""
        if seed is None:
            if self.value.size != 1:
                raise DimensionError("backward() without a seed needs a 1×1 output")
            seed = np.ones_like(self.value)

        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = self.grad + np.asarray(seed, dtype=DTYPE).reshape(self.value.shape)

        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # ── Operator sugar ─────────────────────────────────────────────────────────

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return mul(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value: np.ndarray, parents: Tuple[Tensor, ...], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")
    needs_grad = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs_grad, _parents=parents if needs_grad else (), _op=op)
    if needs_grad:
        out._backward = backward
    return out


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ── Elementwise arithmetic ────────────────────────────────────────────────────

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), "add", _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), "sub", _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), "mul", _bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    if np.any(b.value == 0):
        raise NumericError("division by zero in div")
    out_value = a.value / b.value

    def _bw(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * out_value / b.value, b.shape))

    return _make(out_value, (a, b), "div", _bw)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, g * exponent * a.value ** (exponent - 1))

    return _make(a.value ** exponent, (a,), f"pow{exponent}", _bw)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log of a non-positive value")

    def _bw(g):
        _accumulate(a, g / a.value)

    return _make(np.log(a.value), (a,), "log", _bw)


def abs_(a: Tensor) -> Tensor:
    """|a|; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, g * np.sign(a.value))

    return _make(np.abs(a.value), (a,), "abs", _bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def _bw(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), "relu", _bw)


# ── Shape / indexing ──────────────────────────────────────────────────────────

def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, g.T)

    return _make(a.value.T.copy(), (a,), "transpose", _bw)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """a[index]; duplicates allowed, gradients are scatter-added."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise InputError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def _bw(g):
        if a.requires_grad:
            np.add.at(a.grad, index, g)

    return _make(a.value[index], (a,), "gather_rows", _bw)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.array([[a.value.sum()]]), (a,), "sum", _bw)


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.value.size)


def sum_rows(a: Tensor) -> Tensor:
    """Row sums → (rows × 1)."""
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(a.value.sum(axis=1, keepdims=True), (a,), "sum_rows", _bw)


def sum_cols(a: Tensor) -> Tensor:
    """Column sums → (1 × cols)."""
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(a.value.sum(axis=0, keepdims=True), (a,), "sum_cols", _bw)


def row_norm(a: Tensor, kind: str = "l2") -> Tensor:
    """Per-row norm → (rows × 1). Zero rows get a zero subgradient."""
    a = as_tensor(a)
    if kind == "l2":
        norms = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True))
        safe = np.where(norms > 0, norms, 1.0)

        def _bw(g):
            _accumulate(a, g * np.where(norms > 0, a.value / safe, 0.0))
    elif kind == "l1":
        norms = np.abs(a.value).sum(axis=1, keepdims=True)

        def _bw(g):
            _accumulate(a, g * np.sign(a.value))
    else:
        raise InputError(f"unknown norm '{kind}' (expected l2 | l1)")

    return _make(norms, (a,), f"row_norm_{kind}", _bw)


# ── Products ──────────────────────────────────────────────────────────────────

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} × {b.shape}")

    def _bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), "matmul", _bw)


def spmm(s: SparseMatrix, d) -> Tensor:
    """Sparse (constant) × dense tensor, row-major ascending-column summation."""
    d = as_tensor(d)
    if s.cols != d.shape[0]:
        raise DimensionError(f"spmm: {s.shape} × {d.shape}")
    csr = s.csr

    def _bw(g):
        _accumulate(d, csr.T @ g)

    return _make(np.asarray(csr @ d.value), (d,), "spmm", _bw)


def edge_spmm(rows: np.ndarray, cols: np.ndarray, values, shape: Tuple[int, int], d) -> Tensor:
    """
    Sparse matrix whose stored values are themselves a tensor (1 × nnz) times
    a dense tensor. Used where attention weights replace Â's entries.
    """
    values, d = as_tensor(values), as_tensor(d)
    if values.value.size != len(rows):
        raise DimensionError(f"edge_spmm: {values.value.size} values for {len(rows)} edges")
    if shape[1] != d.shape[0]:
        raise DimensionError(f"edge_spmm: {shape} × {d.shape}")
    flat = values.value.reshape(-1)
    csr = sp.csr_matrix((flat, (rows, cols)), shape=shape)

    def _bw(g):
        _accumulate(d, csr.T @ g)
        if values.requires_grad:
            per_edge = np.einsum("ij,ij->i", g[rows], d.value[cols])
            values.grad += per_edge.reshape(values.shape)

    return _make(np.asarray(csr @ d.value), (values, d), "edge_spmm", _bw)


# ── Softmax / loss ────────────────────────────────────────────────────────────

def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _stable_softmax(a.value)

    def _bw(g):
        _accumulate(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _make(s, (a,), "softmax_rows", _bw)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy over rows → 1×1."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows, classes = logits.shape
    if labels.size != rows:
        raise DimensionError(f"cross_entropy: {labels.size} labels for {rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"cross_entropy: label outside [0, {classes})")

    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(rows), labels]
    loss = -picked.mean() if rows else 0.0

    def _bw(g):
        if logits.requires_grad and rows:
            probs = np.exp(log_probs)
            probs[np.arange(rows), labels] -= 1.0
            logits.grad += g[0, 0] * probs / rows

    return _make(np.array([[loss]]), (logits,), "cross_entropy", _bw)


# ── Adam ──────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    """Moments, step counter and hyper-parameters of one Adam optimiser."""
    learning_rate: float = 0.001
    beta1:         float = 0.9
    beta2:         float = 0.999
    eps:           float = 1e-8
    weight_decay:  float = 0.0
    step:          int   = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    One Adam update. ``weight_decay · param`` is added to each gradient before
    the moment updates. Returns new parameter arrays; ``state`` is advanced.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t

    updated: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise DimensionError(f"adam_step: grad {grad.shape} vs param {param.shape} for '{name}'")
        g = grad + state.weight_decay * param

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        elif m.shape != param.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} vs param {param.shape} for '{name}'")

        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v

        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


# ── Initialisation ────────────────────────────────────────────────────────────

def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """(fan_in × fan_out) draws from U(−r, r), r = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ── Finite differences ────────────────────────────────────────────────────────

def finite_difference_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central differences of a scalar ``fn`` w.r.t. every entry of ``array``,
    which is perturbed in place and restored.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + h
        up = fn()
        array[idx] = original - h
        down = fn()
        array[idx] = original
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max|a − n| / max(max|a| + max|n|, floor), in the max norm."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if not analytic.size:
        return 0.0
    denom = max(float(np.max(np.abs(analytic)) + np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / denom
