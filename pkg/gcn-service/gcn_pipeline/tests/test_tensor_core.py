"""
test_tensor_core.py
===================
Unit tests for the CSR wrapper, the reverse-mode tape and Adam.

Run with:
  cd gcn-service && python -m pytest gcn_pipeline/tests/test_tensor_core.py -v
"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "../.."))

import numpy as np
import pytest

from gcn_pipeline.errors import DimensionError, InputError, NumericError
from gcn_pipeline.tensor_core import (
    AdamState,
    SparseMatrix,
    Tensor,
    adam_step,
    cross_entropy,
    div,
    edge_spmm,
    finite_difference_grad,
    gather_rows,
    glorot_uniform,
    log,
    matmul,
    mul,
    relative_error,
    relu,
    spmm,
    sum_all,
)


# ── Helpers ─────────────────────────────────────────────────────────────────────

def _leaf(shape, seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def _fd_error(build, leaf: Tensor) -> float:
    build().backward()
    analytic = leaf.grad.copy()
    numeric = finite_difference_grad(lambda: build().item(), leaf.value)
    return relative_error(analytic, numeric)


# ── Tests: SparseMatrix ─────────────────────────────────────────────────────────

class TestSparseMatrix:

    def test_duplicates_are_summed_and_zeros_dropped(self):
        s = SparseMatrix.from_coo(np.array([0, 0, 1, 1]), np.array([2, 2, 0, 1]),
                                  np.array([1.0, 2.0, 0.0, 4.0]), (2, 3))
        assert s.nnz == 2
        assert s.densify().tolist() == [[0.0, 0.0, 3.0], [0.0, 4.0, 0.0]]

    def test_columns_sorted_within_rows(self):
        s = SparseMatrix.from_coo(np.array([0, 0, 0]), np.array([3, 0, 1]), np.ones(3), (1, 4))
        ids, _ = s.row(0)
        assert ids.tolist() == [0, 1, 3]

    def test_arrays_are_read_only(self):
        s = SparseMatrix(np.eye(3))
        with pytest.raises(ValueError):
            s.data[0] = 5.0

    def test_transpose(self):
        dense = np.array([[0.0, 1.0], [2.0, 0.0], [0.0, 3.0]])
        assert np.array_equal(SparseMatrix(dense).transpose().densify(), dense.T)


# ── Tests: tape ─────────────────────────────────────────────────────────────────

class TestTape:

    def test_matmul_gradient_matches_finite_differences(self):
        a, b = _leaf((3, 4), 1), _leaf((4, 2), 2)
        assert _fd_error(lambda: sum_all(relu(matmul(a, b)) * 1.5), a) < 1e-6

    def test_spmm_equals_dense_product(self):
        dense = np.array([[0.5, 0.0, 0.25], [0.0, 1.0, 0.0]])
        d = _leaf((3, 2))
        out = spmm(SparseMatrix(dense), d)
        assert np.allclose(out.value, dense @ d.value, atol=1e-15)

    def test_spmm_gradient(self):
        s = SparseMatrix(np.array([[0.5, 0.0, 0.25], [0.0, 1.0, 2.0]]))
        d = _leaf((3, 2))
        assert _fd_error(lambda: sum_all(mul(spmm(s, d), spmm(s, d))), d) < 1e-6

    def test_edge_spmm_value_gradient(self):
        rows, cols = np.array([0, 1, 1]), np.array([1, 0, 2])
        values = _leaf((1, 3), 3)
        d = Tensor(np.random.default_rng(4).normal(size=(3, 2)))
        build = lambda: sum_all(mul(edge_spmm(rows, cols, values, (2, 3), d), np.array([[1.0, -2.0]])))
        assert _fd_error(build, values) < 1e-6

    def test_backward_twice_does_not_accumulate(self):
        a = _leaf((2, 2))
        sum_all(mul(a, a)).backward()
        first = a.grad.copy()
        sum_all(mul(a, a)).backward()
        assert np.allclose(a.grad, first)

    def test_gather_rows_scatter_adds_duplicates(self):
        a = _leaf((3, 2))
        sum_all(gather_rows(a, np.array([0, 0, 2]))).backward()
        assert a.grad[:, 0].tolist() == [2.0, 0.0, 1.0]

    def test_cross_entropy_of_uniform_logits_is_log_c(self):
        loss = cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
        assert loss.item() == pytest.approx(np.log(5.0))

    def test_cross_entropy_gradient(self):
        logits = _leaf((4, 3))
        assert _fd_error(lambda: cross_entropy(logits, [0, 2, 1, 1]), logits) < 1e-6

    def test_leaves_without_requires_grad_get_no_gradient(self):
        a, b = Tensor(np.ones((2, 2))), _leaf((2, 2))
        sum_all(matmul(a, b)).backward()
        assert a.grad is None
        assert b.grad is not None


# ── Tests: errors ───────────────────────────────────────────────────────────────

class TestTapeErrors:

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_division_by_zero(self):
        with pytest.raises(NumericError):
            div(Tensor(np.ones((1, 2))), Tensor(np.array([[1.0, 0.0]])))

    def test_log_of_non_positive(self):
        with pytest.raises(NumericError):
            log(Tensor(np.array([[1.0, 0.0]])))

    def test_overflow_is_reported(self):
        with pytest.raises(NumericError):
            mul(Tensor(np.array([[1e308]])), 10.0)

    def test_backward_needs_scalar_without_seed(self):
        with pytest.raises(DimensionError):
            _leaf((2, 2)).backward()

    def test_gather_out_of_range(self):
        with pytest.raises(InputError):
            gather_rows(_leaf((2, 2)), np.array([2]))

    def test_three_dimensional_values_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 2, 2)))


# ── Tests: Adam / init ──────────────────────────────────────────────────────────

class TestAdam:

    def test_first_step_moves_by_learning_rate_against_gradient(self):
        state = AdamState(learning_rate=0.01)
        params = {"w": np.array([[1.0, -1.0]])}
        grads = {"w": np.array([[3.0, -0.5]])}
        updated = adam_step(state, params, grads)
        assert np.allclose(updated["w"], [[0.99, -0.99]], atol=1e-6)
        assert state.step == 1

    def test_weight_decay_pulls_towards_zero(self):
        state = AdamState(learning_rate=0.1, weight_decay=0.5)
        updated = adam_step(state, {"w": np.array([[2.0]])}, {"w": np.array([[0.0]])})
        assert updated["w"][0, 0] < 2.0

    def test_input_arrays_untouched(self):
        params = {"w": np.ones((2, 2))}
        adam_step(AdamState(), params, {"w": np.ones((2, 2))})
        assert np.array_equal(params["w"], np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step(AdamState(), {"w": np.ones((2, 2))}, {"w": np.ones((1, 2))})

    def test_glorot_bounds(self):
        w = glorot_uniform(30, 20, np.random.default_rng(0))
        assert w.shape == (30, 20)
        assert np.abs(w).max() <= np.sqrt(6.0 / 50)


class TestRelativeError:

    def test_identical_arrays(self):
        assert relative_error(np.ones(3), np.ones(3)) == 0.0

    def test_scale_free(self):
        assert relative_error(np.array([1e-6, 2e-6]), np.array([1.1e-6, 2e-6])) == pytest.approx(0.1e-6 / 4e-6)
