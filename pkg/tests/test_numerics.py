import mpmath
import numpy as np
import pytest

from namrank import numerics as nx
from namrank.numerics import (AdamState, ContractError, DimensionError, FiniteDifferenceError, Tape,
                              Tensor, adam_step, backward, finite_diff_grad, relative_error)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_by_column(self):
        assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_zero_row(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_logits_do_not_overflow(self):
        out = nx.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_extended_precision_oracle(self):
        mpmath.mp.dps = 50
        exps = [mpmath.exp(x) for x in (1, 2, 3)]
        ref = [float(e / sum(exps)) for e in exps]
        out = nx.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_mask_excludes_positions(self):
        mask = np.array([[0.0, -np.inf, 0.0]])
        out = nx.softmax(Tensor([[5.0, 100.0, 5.0]]), additive_mask=mask).data
        np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])

    def test_fully_masked_row_is_rejected(self):
        with pytest.raises(ContractError):
            nx.softmax(Tensor([[1.0, 2.0]]), additive_mask=np.full((1, 2), -np.inf))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = nx.softmax(Tensor(rng.normal(scale=30, size=(4, 6, 9)))).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


class TestSilu:
    @pytest.mark.parametrize("x, expected", [(0.0, 0.0), (1.0, 0.731058), (-1.0, -0.268941)])
    def test_values(self, x, expected):
        assert nx.silu(Tensor([x])).data[0] == pytest.approx(expected, abs=1e-6)

    def test_extreme_inputs_stay_finite(self):
        out = nx.silu(Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        assert out[1] == 1e4


class TestBackward:
    def test_sum_gives_ones(self):
        tape = Tape()
        p = tape.variable(np.arange(6.0).reshape(2, 3), "p")
        grads = backward(tape, nx.sum_(p))
        np.testing.assert_array_equal(grads["p"], np.ones((2, 3)))

    def test_half_squared_norm_gives_p(self):
        tape = Tape()
        value = np.array([1.5, -2.0, 0.25])
        p = tape.variable(value, "p")
        grads = backward(tape, nx.mul(0.5, nx.sum_(nx.mul(p, p))))
        np.testing.assert_allclose(grads["p"], value)

    def test_unused_variable_gets_zeros(self):
        tape = Tape()
        p = tape.variable(np.ones(2), "p")
        tape.variable(np.ones(3), "unused")
        grads = backward(tape, nx.sum_(p))
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        p = tape.variable(np.ones(2), "p")
        with pytest.raises(ContractError):
            backward(tape, nx.mul(p, 2.0))

    def test_identical_passes_record_identical_tapes(self):
        def record():
            tape = Tape()
            p = tape.variable(np.linspace(-1, 1, 6).reshape(2, 3), "p")
            nx.sum_(nx.softmax(nx.silu(p)))
            return tape.signature()
        assert record() == record()

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 2, size=5).astype(float)
        params = {"W1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6),
                  "W2": rng.normal(size=(6, 1)), "b2": rng.normal(size=1)}

        def loss(P, tape=None):
            T = {k: tape.variable(v, k) if tape is not None else Tensor(v) for k, v in P.items()}
            h = nx.silu(nx.add(nx.matmul(x, T["W1"]), T["b1"]))
            p = nx.sigmoid(nx.reshape(nx.add(nx.matmul(h, T["W2"]), T["b2"]), (5,)))
            ll = nx.add(nx.mul(y, nx.log(p)), nx.mul(1 - y, nx.log(nx.sub(1.0, p))))
            return nx.neg(nx.mean(ll))

        tape = Tape()
        analytic = backward(tape, loss(params, tape))
        numeric = finite_diff_grad(lambda P: float(loss(P).data), params)
        for name in params:
            assert relative_error(analytic[name], numeric[name]) <= 1e-4, name

    def test_gather_accumulates_repeated_rows(self):
        tape = Tape()
        table = tape.variable(np.zeros((3, 2)), "t")
        grads = backward(tape, nx.sum_(nx.take_rows(table, np.array([0, 2, 2]))))
        np.testing.assert_array_equal(grads["t"], [[1, 1], [0, 0], [2, 2]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            nx.take_rows(Tensor(np.zeros((3, 2))), np.array([3]))


class TestFiniteDifferences:
    def test_square(self):
        g = finite_diff_grad(lambda P: float(P["t"][0] ** 2), {"t": np.array([3.0])}, epsilon=1e-5)
        assert g["t"][0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        g = finite_diff_grad(lambda P: 4.2, {"a": np.ones((2, 2)), "b": np.ones(3)})
        assert all(np.all(v == 0) for v in g.values())

    def test_non_finite_is_reported(self):
        with pytest.raises(FiniteDifferenceError):
            finite_diff_grad(lambda P: float(np.sqrt(P["x"][0]) if P["x"][0] >= 0 else np.inf), {"x": np.array([0.0])})

    def test_params_are_not_modified(self):
        params = {"x": np.array([1.0, 2.0])}
        finite_diff_grad(lambda P: float(P["x"].sum()), params)
        np.testing.assert_array_equal(params["x"], [1.0, 2.0])


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_against_gradient(self):
        params = {"w": np.zeros(4)}
        g = np.array([3.0, -0.5, 1e-3, -20.0])
        adam_step(params, {"w": g}, AdamState(learning_rate=0.01))
        np.testing.assert_array_equal(np.sign(params["w"]), -np.sign(g))
        np.testing.assert_allclose(np.abs(params["w"]), 0.01, rtol=1e-4)

    def test_moments_match_parameter_shapes(self):
        params = {"a": np.ones((2, 3)), "b": np.ones(4)}
        state = AdamState()
        adam_step(params, {k: np.ones_like(v) for k, v in params.items()}, state)
        assert {k: v.shape for k, v in state.m.items()} == {k: v.shape for k, v in params.items()}
        assert {k: v.shape for k, v in state.v.items()} == {k: v.shape for k, v in params.items()}

    def test_converges_on_quadratic(self):
        params = {"t": np.array([0.0])}
        state = AdamState(learning_rate=0.1)
        for _ in range(100):
            adam_step(params, {"t": 2.0 * (params["t"] - 5.0)}, state)
        assert abs(params["t"][0] - 5.0) < 0.5
        assert state.step == 100
