import math

import numpy as np
import pytest

from mgfc import tensor as T
from mgfc.errors import ContractError, NumericError, ShapeError


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision(64):
        yield


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_arithmetic(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        assert np.array_equal(T.matmul(a, b).data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        # element-by-element triple-loop oracle
        want = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for t in range(7):
                    want[i, j] += a[i, t] * b[t, j]
        assert np.abs(got - want).max() < 1e-6

    def test_dim_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


class TestSoftmaxRows:
    def test_uniform_on_zeros(self):
        out = T.softmax_rows(T.Tensor(np.zeros((1, 4))))
        assert np.allclose(out.data, 0.25)

    def test_single_column_is_ones(self):
        out = T.softmax_rows(T.Tensor(np.array([[3.0], [-7.0]])))
        assert np.array_equal(out.data, np.ones((2, 1)))

    def test_closed_form(self):
        out = T.softmax_rows(T.Tensor([[0.0, math.log(2.0)]]))
        assert np.abs(out.data - [1 / 3, 2 / 3]).max() < 1e-7

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_rows(T.Tensor([[0.0, float("nan")]]))

    def test_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = T.Tensor(rng.normal(0, 10, (6, 5)))
            s = T.softmax_rows(x).data
            assert (s >= 0).all()
            assert np.abs(s.sum(axis=1) - 1).max() < 1e-6


class TestBackward:
    def test_sum_gradient(self):
        x = T.Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        T.tsum(x).backward()
        assert np.array_equal(x.grad, [[1.0, 1.0, 1.0]])

    def test_square_gradient(self):
        x = T.Tensor([[1.0, 2.0]], requires_grad=True)
        T.tsum(x * x).backward()
        assert np.array_equal(x.grad, [[2.0, 4.0]])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_off_path_tensor_keeps_zero_grad(self):
        x = T.Tensor([[1.0, 2.0]], requires_grad=True)
        y = T.Tensor([[5.0, 6.0]], requires_grad=True)
        T.tsum(x * x).backward()
        assert y.grad is None

    def test_grad_accumulates_across_sweeps(self):
        x = T.Tensor([[3.0]], requires_grad=True)
        T.tsum(x).backward()
        T.tsum(x).backward()
        assert x.grad[0, 0] == 2.0

    def test_diamond_graph_accumulation(self):
        x = T.Tensor([[2.0]], requires_grad=True)
        y = x * x + x * T.Tensor([[3.0]])
        T.tsum(y).backward()
        assert np.isclose(x.grad[0, 0], 2 * 2.0 + 3.0)


class TestForwardDeterminism:
    def test_replay_bit_identical(self):
        rng = np.random.default_rng(2)
        a = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 4)))

        def run():
            return T.tsum(T.softmax_rows(T.matmul(a, b)) * b).data.copy()
        assert np.array_equal(run(), run())


class TestAdamW:
    def _param(self, value):
        return T.Tensor(np.array([[value]]), requires_grad=True)

    def test_zero_grad_zero_decay_is_identity(self):
        p = self._param(1.5)
        opt = T.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.zeros_like(p.data)
        opt.step()
        assert p.data[0, 0] == 1.5

    def test_first_step_is_lr_sized(self):
        # bias correction makes the first update exactly lr * g/|g| up to eps
        p = self._param(1.0)
        opt = T.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.ones_like(p.data)
        opt.step()
        assert abs(p.data[0, 0] - 0.9) < 1e-7

    def test_decay_only(self):
        p = self._param(1.0)
        opt = T.AdamW({"p": p}, lr=1e-4, weight_decay=0.05)
        p.grad = np.zeros_like(p.data)
        opt.step()
        assert np.isclose(p.data[0, 0], 1.0 - 5e-6)

    def test_missing_grad_raises(self):
        p = self._param(1.0)
        opt = T.AdamW({"p": p})
        with pytest.raises(ContractError, match="'p'"):
            opt.step()

    def test_step_counter_increases(self):
        p = self._param(1.0)
        opt = T.AdamW({"p": p})
        for expected in (1, 2, 3):
            p.grad = np.ones_like(p.data)
            opt.step()
            assert opt.step_count == expected


class TestFiniteDiffCheck:
    def test_matmul_sum(self):
        rng = np.random.default_rng(3)
        inputs = {"a": T.Tensor(rng.normal(size=(3, 3)), requires_grad=True),
                  "b": T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)}
        report = T.finite_diff_check(
            lambda a, b: T.tsum(T.matmul(a, b)), inputs, tol=1e-6)
        assert report.passed
        assert report.max_error < 1e-6

    def test_softmax_sum_is_constant(self):
        rng = np.random.default_rng(4)
        inputs = {"x": T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)}
        report = T.finite_diff_check(
            lambda x: T.tsum(T.softmax_rows(x)), inputs, tol=1e-8)
        assert report.passed
        assert report.max_error < 1e-8

    def test_nondeterministic_f_rejected(self):
        state = {"calls": 0}

        def f(x):
            state["calls"] += 1
            return T.tsum(x * T.Tensor(float(state["calls"])))
        with pytest.raises(ContractError, match="deterministic"):
            T.finite_diff_check(
                f, {"x": T.Tensor([[1.0]], requires_grad=True)})

    def test_bad_h_rejected(self):
        with pytest.raises(ContractError):
            T.finite_diff_check(
                T.tsum, {"x": T.Tensor([[1.0]], requires_grad=True)}, h=0.1)


class TestPrimitiveGradients:
    """Every differentiable primitive against central differences, random
    shapes <= 8 per dim, 5 seeds."""

    @pytest.mark.parametrize("seed", range(5))
    def test_all_primitives(self, seed):
        from mgfc.gradchecks import build_checks
        for name, (f, inputs) in build_checks(seed).items():
            report = T.finite_diff_check(f, inputs, tol=1e-4)
            assert report.passed, f"{name}: {report}"


class TestBroadcastRules:
    def test_unsupported_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))

    def test_scalar_broadcast(self):
        out = T.Tensor(np.ones((2, 2))) * T.Tensor(3.0)
        assert np.array_equal(out.data, np.full((2, 2), 3.0))
