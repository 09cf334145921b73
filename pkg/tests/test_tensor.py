"""Tensor kernel tests: forward values against independent oracles, gradients
against central differences, and graph determinism."""

import math

import mpmath
import numpy as np
import pytest

import hmoe.tensor as T
from hmoe.errors import ContractError, DimensionError
from hmoe.tensor import Tensor, backward, finite_diff_check


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_orthogonal_selection(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
        assert out.data.shape == (1, 1) and out.data[0, 0] == 0.0

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_matches_per_batch(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(5, 4, 2))
        got = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(5):
            assert np.max(np.abs(got[i] - naive_matmul(a[i], b[i]))) < 1e-12


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        assert out.data == pytest.approx([1 / 3, 1 / 3, 1 / 3])

    def test_no_overflow_at_large_magnitude(self):
        out = T.softmax(Tensor([1000.0, 0.0, 0.0]), axis=0).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_against_extended_precision_oracle(self):
        x = [1.0, 2.0, 3.0]
        with mpmath.workdps(50):
            exps = [mpmath.exp(v) for v in x]
            total = sum(exps)
            expected = np.array([float(e / total) for e in exps])
        got = T.softmax(Tensor(x), axis=0).data
        assert np.max(np.abs(got - expected)) < 1e-12

    @pytest.mark.parametrize("scale", [1.0, 10.0, 1e3])
    def test_rows_sum_to_one(self, scale):
        rng = np.random.default_rng(7)
        x = rng.uniform(-scale, scale, size=(20, 9))
        sums = T.softmax(Tensor(x), axis=1).data.sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-12


class TestSilu:
    def test_zero(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0

    def test_large_negative_underflows_quietly(self):
        out = T.silu(Tensor([-1e4])).data
        assert out[0] == pytest.approx(0.0, abs=1e-300)

    def test_scalar_value(self):
        with mpmath.workdps(50):
            expected = float(mpmath.mpf(1) / (1 + mpmath.exp(-1)))
        assert T.silu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-15)
        assert T.silu(Tensor([1.0])).data[0] == pytest.approx(0.7310585786300049, abs=1e-12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 4)))
        assert T.cross_entropy(logits, [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct(self):
        logits = np.zeros((2, 5))
        logits[0, 2] = 50.0
        logits[1, 4] = 50.0
        assert T.cross_entropy(Tensor(logits), [2, 4]).item() == pytest.approx(0.0, abs=1e-12)

    def test_against_direct_formula(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(2, 5))
        targets = [3, 0]
        expected = 0.0
        for row, t in zip(logits, targets):
            probs = np.exp(row) / np.exp(row).sum()
            expected += -np.log(probs[t])
        expected /= 2
        got = T.cross_entropy(Tensor(logits), targets).item()
        assert abs(got - expected) < 1e-10

    def test_out_of_range_target(self):
        with pytest.raises(IndexError, match="7"):
            T.cross_entropy(Tensor(np.zeros((1, 5))), [7])


class TestBackward:
    def test_linear_case_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(w.sum())
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_dead_branch_gives_zero(self):
        w = Tensor(np.arange(4.0), requires_grad=True)
        loss = T.mul_const(T.silu(w).sum(), 0.0)
        backward(loss)
        assert np.array_equal(w.grad, np.zeros(4))

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(3, 4)))

        def f(w):
            return T.silu(T.matmul(x, w)).sum()

        assert finite_diff_check(f, Tensor(rng.normal(size=(4, 2)))) < 1e-7

    def test_non_scalar_rejected(self):
        w = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(w + 1.0)

    def test_unreachable_tensor_keeps_no_grad(self):
        w = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones(3), requires_grad=True)
        backward(w.sum())
        assert other.grad is None

    def test_bit_identical_across_runs(self):
        rng = np.random.default_rng(17)
        w_data = rng.normal(size=(4, 4))
        x = rng.normal(size=(5, 4))
        grads = []
        for _ in range(2):
            w = Tensor(w_data.copy(), requires_grad=True)
            loss = T.cross_entropy(T.matmul(T.silu(T.matmul(Tensor(x), w)), w), [0, 1, 2, 3, 0])
            backward(loss)
            grads.append(w.grad.copy())
        assert np.array_equal(grads[0], grads[1])


class TestFiniteDiffCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(19)
        a = Tensor(rng.normal(size=(4, 4)))

        def f(x):
            y = T.matmul(T.matmul(T.reshape(x, (1, 4)), a), T.reshape(x, (4, 1)))
            return y.sum()

        assert finite_diff_check(f, Tensor(rng.normal(size=4))) < 1e-7

    def test_cross_entropy_of_projected_input(self):
        rng = np.random.default_rng(23)
        x = Tensor(rng.normal(size=(3, 4)))

        def f(w):
            return T.cross_entropy(T.matmul(x, w), [1, 0, 4])

        assert finite_diff_check(f, Tensor(rng.normal(size=(4, 5)))) < 1e-4

    def test_constant_function(self):
        def f(_):
            return Tensor(5.0)

        assert finite_diff_check(f, Tensor(np.ones(3))) == 0.0

    def test_rejects_non_scalar(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda x: x, Tensor(np.ones(3)))


def _scalarize(out: Tensor, rng: np.random.Generator) -> Tensor:
    weights = rng.normal(size=out.shape)
    return T.mul_const(out, weights).sum()


OP_CASES = {
    "add": lambda x, rng: T.add(x, Tensor(rng.normal(size=x.shape))),
    "add_bias": lambda x, rng: T.add(x, Tensor(rng.normal(size=x.shape[-1]))),
    "mul": lambda x, rng: T.mul(x, Tensor(rng.normal(size=x.shape))),
    "mul_const": lambda x, rng: T.mul_const(x, 1.7),
    "matmul_left": lambda x, rng: T.matmul(x, Tensor(rng.normal(size=(x.shape[-1], 3)))),
    "matmul_right": lambda x, rng: T.matmul(Tensor(rng.normal(size=(3, x.shape[0]))), x),
    "silu": lambda x, rng: T.silu(x),
    "softmax": lambda x, rng: T.softmax(x, axis=-1),
    "rms_norm": lambda x, rng: T.rms_norm(x, Tensor(rng.normal(size=x.shape[-1]))),
    "row_scale": lambda x, rng: T.row_scale(x, Tensor(rng.normal(size=x.shape[:-1]))),
    "sum_axis": lambda x, rng: T.sum_axis(x, 0),
    "transpose": lambda x, rng: T.transpose(x, (1, 0)),
    "reshape": lambda x, rng: T.reshape(x, (x.size,)),
    "entropy_mean": lambda x, rng: T.softmax(x, axis=-1),  # entropy applied below
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradient_under_1e_4(name, seed):
    rng = np.random.default_rng(1000 + seed)
    x0 = Tensor(rng.uniform(-2.0, 2.0, size=(4, 5)))

    def f(x):
        out = OP_CASES[name](x, np.random.default_rng(77))
        if name == "entropy_mean":
            return T.entropy_mean(out)
        return _scalarize(out, np.random.default_rng(88))

    assert finite_diff_check(f, x0) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gather_scatter_gradients(seed):
    rng = np.random.default_rng(2000 + seed)
    idx = rng.integers(0, 6, size=4)
    uniq = np.array([4, 1, 3])

    def f_embed(table):
        return _scalarize(T.embedding(table, idx.reshape(2, 2)), np.random.default_rng(5))

    def f_index(x):
        return _scalarize(T.index_rows(x, idx), np.random.default_rng(6))

    def f_scatter(rows):
        return _scalarize(T.scatter_rows(rows, uniq, 6), np.random.default_rng(7))

    def f_column(x):
        return _scalarize(T.column(x, 2), np.random.default_rng(8))

    assert finite_diff_check(f_embed, Tensor(rng.normal(size=(6, 3)))) < 1e-4
    assert finite_diff_check(f_index, Tensor(rng.normal(size=(6, 3)))) < 1e-4
    assert finite_diff_check(f_scatter, Tensor(rng.normal(size=(3, 4)))) < 1e-4
    assert finite_diff_check(f_column, Tensor(rng.normal(size=(6, 4)))) < 1e-4


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        out = T.silu(w)
    assert out._parents == () and not out.requires_grad


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(31)
    x = Tensor(rng.uniform(-1e3, 1e3, size=(8, 8)))
    for out in [T.silu(x), T.softmax(x, axis=1), T.rms_norm(x, Tensor(np.ones(8)))]:
        assert np.all(np.isfinite(out.data))
