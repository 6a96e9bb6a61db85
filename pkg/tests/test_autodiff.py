"""Tests for the reverse-mode autodiff kernel."""

import numpy as np
import pytest

from simpool import autodiff as ad


def scalarize(t):
    return ad.sum_all(t)


class TestForwardValues:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        m = ad.constant(rng.normal(size=(3, 3)))
        eye = ad.constant(np.eye(3))
        np.testing.assert_array_equal(ad.matmul(eye, m).values, m.values)

    def test_row_softmax_uniform(self):
        for n in (2, 5, 9):
            x = ad.constant(np.full((1, n), 3.7))
            np.testing.assert_allclose(ad.row_softmax(x).values, np.full((1, n), 1.0 / n))

    def test_tanh_gradient_at_zero(self):
        x = ad.parameter(np.zeros((2, 3)))
        with ad.Tape() as tape:
            y = ad.sum_all(ad.tanh(x))
            tape.backward(y)
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_concat_columns(self):
        a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        b = ad.constant([[5.0], [6.0]])
        out = ad.concat_columns([a, b])
        np.testing.assert_array_equal(out.values, [[1, 2, 5], [3, 4, 6]])

    def test_masked_fill(self):
        x = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        mask = np.array([[True, False], [False, True]])
        out = ad.masked_fill(x, mask, -1.0)
        np.testing.assert_array_equal(out.values, [[-1, 2], [3, -1]])

    def test_shape_mismatch_raises(self):
        a = ad.constant(np.ones((2, 3)))
        b = ad.constant(np.ones((2, 3)))
        with pytest.raises(ValueError):
            ad.matmul(a, b)
        with pytest.raises(ValueError):
            ad.add(a, ad.constant(np.ones((3, 2))))

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ad.NumericError):
            ad.log(ad.constant([[0.0]]))
        with pytest.raises(ad.NumericError):
            ad.log(ad.constant([[-1.0]]))

    def test_gather_bounds(self):
        a = ad.constant(np.ones((2, 2)))
        with pytest.raises(IndexError):
            ad.gather(a, np.array([[2]]), np.array([[0]]))


def _run_primitive_case(name, builder, rng):
    """Finite-difference check for one randomized primitive application."""
    x = ad.parameter(rng.uniform(-2.0, 2.0, size=(4, 3)))
    err = ad.grad_check(builder, x, epsilon=1e-5)
    assert err < 1e-4, f"{name}: relative error {err:.3e}"


PRIMITIVE_CASES = {
    "matmul_left": lambda x: scalarize(ad.matmul(x, ad.constant(np.arange(12.0).reshape(3, 4)))),
    "matmul_right": lambda x: scalarize(ad.matmul(ad.constant(np.arange(8.0).reshape(2, 4)), x)),
    "transpose": lambda x: scalarize(ad.multiply(ad.transpose(x), ad.constant(np.arange(12.0).reshape(3, 4)))),
    "add": lambda x: scalarize(ad.add(x, ad.constant(np.ones((4, 3))))),
    "add_row_broadcast": lambda x: scalarize(ad.tanh(ad.add(x, ad.constant(np.array([[0.3, -0.4, 0.1]]))))),
    "add_col_broadcast": lambda x: scalarize(ad.tanh(ad.add(x, ad.constant(np.full((4, 1), 0.25))))),
    "subtract": lambda x: scalarize(ad.subtract(ad.constant(np.ones((4, 3))), x)),
    "multiply": lambda x: scalarize(ad.multiply(x, ad.constant(np.arange(12.0).reshape(4, 3) - 5.0))),
    "multiply_col_broadcast": lambda x: scalarize(ad.multiply(x, ad.constant(np.array([[1.0], [-2.0], [0.5], [3.0]])))),
    "scalar_multiply": lambda x: scalarize(ad.scalar_multiply(x, -1.7)),
    "concat_columns": lambda x: scalarize(
        ad.tanh(ad.concat_columns([x, ad.scalar_multiply(x, 2.0)]))
    ),
    "gather": lambda x: scalarize(
        ad.gather(x, np.array([[0, 1], [3, 3]]), np.array([[2, 0], [1, 1]]))
    ),
    "row_softmax": lambda x: scalarize(
        ad.multiply(ad.row_softmax(x), ad.constant(np.arange(12.0).reshape(4, 3)))
    ),
    "tanh": lambda x: scalarize(ad.tanh(x)),
    "relu": lambda x: scalarize(ad.relu(ad.add(x, ad.constant(np.full((4, 3), 0.01))))),
    "log": lambda x: scalarize(ad.log(ad.add(ad.multiply(x, x), ad.constant(np.full((4, 3), 0.5))))),
    "sqrt": lambda x: scalarize(ad.sqrt(ad.add(ad.multiply(x, x), ad.constant(np.full((4, 3), 0.5))))),
    "reciprocal": lambda x: scalarize(ad.reciprocal(ad.add(ad.multiply(x, x), ad.constant(np.full((4, 3), 1.0))))),
    "clamp_min": lambda x: scalarize(ad.clamp_min(x, 0.35)),
    "sum_all": lambda x: ad.sum_all(x),
    "row_sum": lambda x: scalarize(ad.multiply(ad.row_sum(x), ad.constant(np.array([[1.0], [2.0], [3.0], [4.0]])))),
    "col_sum": lambda x: scalarize(ad.multiply(ad.col_sum(x), ad.constant(np.array([[1.0, -2.0, 3.0]])))),
    "mean_all": lambda x: ad.mean_all(ad.tanh(x)),
    "l2_norm_rows": lambda x: scalarize(ad.multiply(ad.l2_norm_rows(x), ad.constant(np.array([[1.0], [2.0], [-1.0], [0.5]])))),
    "masked_fill": lambda x: scalarize(
        ad.masked_fill(x, np.arange(12).reshape(4, 3) % 3 == 0, 0.0)
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    """Every primitive matches central differences on randomized inputs."""
    builder = PRIMITIVE_CASES[name]
    for trial in range(50):
        rng = np.random.default_rng(1000 + trial)
        _run_primitive_case(name, builder, rng)


class TestGradCheck:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(7)
        x = ad.parameter(rng.normal(size=(3, 4)))
        err = ad.grad_check(lambda t: ad.sum_all(ad.multiply(t, t)), x, epsilon=1e-5)
        assert err < 1e-6
        # closed-form oracle: d/dx sum(x^2) = 2x
        x.zero_grad()
        with ad.Tape() as tape:
            tape.backward(ad.sum_all(ad.multiply(x, x)))
        np.testing.assert_allclose(x.grad, 2.0 * x.values, rtol=1e-12)

    def test_softmax_dot(self):
        rng = np.random.default_rng(8)
        c = ad.constant(rng.normal(size=(5, 4)))
        x = ad.parameter(rng.normal(size=(5, 4)))
        err = ad.grad_check(lambda t: ad.sum_all(ad.multiply(ad.row_softmax(t), c)), x)
        assert err < 1e-4

    def test_constant_function(self):
        x = ad.parameter(np.ones((2, 2)))
        err = ad.grad_check(lambda t: ad.constant([[4.0]]), x)
        assert err == 0.0

    def test_epsilon_range_enforced(self):
        x = ad.parameter(np.ones((1, 1)))
        with pytest.raises(ValueError):
            ad.grad_check(lambda t: ad.sum_all(t), x, epsilon=1e-2)


class TestTapeSemantics:
    def test_backward_deterministic(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(6, 6))
        grads = []
        for _ in range(2):
            x = ad.parameter(base.copy())
            with ad.Tape() as tape:
                y = ad.sum_all(ad.row_softmax(ad.matmul(x, ad.tanh(x))))
                tape.backward(y)
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_grad_accumulates_over_reuse(self):
        x = ad.parameter(np.array([[2.0]]))
        with ad.Tape() as tape:
            y = ad.add(ad.multiply(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
            tape.backward(ad.sum_all(y))
        np.testing.assert_allclose(x.grad, [[5.0]])

    def test_no_grad_suppresses_recording(self):
        x = ad.parameter(np.ones((2, 2)))
        with ad.Tape() as tape:
            with ad.no_grad():
                y = ad.tanh(x)
            assert len(tape) == 0
            assert not y.requires_grad

    def test_gather_index_channel_carries_no_gradient(self):
        # perturbing source entries that were never selected must leave the
        # output untouched, and their gradient must be exactly zero
        rng = np.random.default_rng(11)
        x = ad.parameter(rng.normal(size=(4, 4)))
        rows = np.array([[0, 1], [2, 3]])
        cols = np.array([[1, 2], [3, 0]])
        with ad.Tape() as tape:
            out = ad.gather(x, rows, cols)
            tape.backward(ad.sum_all(out))
        selected = np.zeros((4, 4), dtype=bool)
        selected[rows, cols] = True
        assert np.all(x.grad[~selected] == 0.0)
        assert np.all(x.grad[selected] == 1.0)

    def test_fault_injection_breaks_gradients(self):
        ad.inject_backward_fault("tanh")
        try:
            x = ad.parameter(np.full((2, 2), 0.3))
            err = ad.grad_check(lambda t: ad.sum_all(ad.tanh(t)), x)
            assert err > 1e-4
        finally:
            ad.clear_backward_fault()
