import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dformer.errors import ContractError, DimensionError, NumericError, ParameterError
from dformer.losses import class_softmax, combined_loss
from dformer.tensor import (FlopCounter, Tensor, backward, concat, current_tape, depthwise_conv3d,
                            div, exp, finite_diff_oracle, gelu, index_select, layer_norm, linear,
                            log, matmul, mul, no_grad, permute, relative_error, reshape,
                            softmax_lastdim, tsum)

from helpers import rand_tensor


def naive_conv(x, k):
    c, d, h, w = x.shape
    _, kd, kh, kw = k.shape
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(d):
            for j in range(h):
                for m in range(w):
                    for a in range(kd):
                        for b in range(kh):
                            for e in range(kw):
                                ii, jj, mm = i + a - kd // 2, j + b - kh // 2, m + e - kw // 2
                                if 0 <= ii < d and 0 <= jj < h and 0 <= mm < w:
                                    out[ch, i, j, m] += k[ch, a, b, e] * x[ch, ii, jj, mm]
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[5, 6], [7, 8]])

    def test_dot(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        assert np.abs(matmul(Tensor(a), Tensor(b)).data - ref).max() < 1e-12

    def test_shape_error_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batch_extents_must_match(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 4))))

    @pytest.mark.parametrize("m,k,n,batch", [(1, 1, 1, ()), (3, 5, 2, ()), (2, 3, 4, (5,)), (2, 2, 2, (3, 2))])
    def test_flop_count(self, m, k, n, batch):
        with FlopCounter() as fc:
            matmul(Tensor(np.ones((*batch, m, k))), Tensor(np.ones((*batch, k, n))))
        assert fc.multiplies == m * k * n * int(np.prod(batch))

    def test_disabled_counter(self):
        with FlopCounter(enabled=False) as fc:
            matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert fc.multiplies == 0

    def test_linear_counts_rows(self):
        with FlopCounter() as fc:
            linear(Tensor(np.ones((4, 5, 3))), Tensor(np.ones((3, 2))), Tensor(np.zeros(2)))
        assert fc.multiplies == 4 * 5 * 3 * 2


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0)

    def test_ln2(self):
        out = softmax_lastdim(Tensor([math.log(2), 0.0])).data
        assert np.abs(out - [2 / 3, 1 / 3]).max() < 1e-15

    def test_no_overflow(self):
        assert np.array_equal(softmax_lastdim(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, row, shift):
        x = np.array(row)
        y = softmax_lastdim(Tensor(x)).data
        assert abs(y.sum() - 1) < 1e-12 and np.all(y >= 0)
        assert np.abs(softmax_lastdim(Tensor(x + shift)).data - y).max() < 1e-10


class TestLayerNorm:
    def test_constant_slice(self):
        out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, [0.0, 0.0, 0.0])

    def test_already_normalised(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
        assert np.abs(out.data - [1, -1]).max() < 1e-12

    def test_two_pass_oracle(self, rng):
        x = rng.standard_normal((3, 6))
        g, b = rng.standard_normal(6), rng.standard_normal(6)
        ref = np.empty_like(x)
        for i, row in enumerate(x):
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            ref[i] = [(v - mu) / math.sqrt(var + 1e-5) * gg + bb for v, gg, bb in zip(row, g, b)]
        out = layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
        assert np.abs(out - ref).max() < 1e-10

    @pytest.mark.parametrize("eps", [0.0, -1e-5])
    def test_bad_eps(self, eps):
        with pytest.raises(ParameterError):
            layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps)


class TestDepthwiseConv:
    def test_impulse_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        k = np.zeros((2, 3, 3, 3))
        k[:, 1, 1, 1] = 1
        assert np.array_equal(depthwise_conv3d(Tensor(x), Tensor(k)).data, x)

    def test_ones_counts_neighbours(self):
        out = depthwise_conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 3, 3, 3))), (1, 1, 1)).data
        assert out[0, 1, 1, 1] == 27 and out[0, 0, 0, 0] == 8

    def test_naive_loop_oracle(self, rng):
        x, k = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 3, 3, 3))
        assert np.abs(depthwise_conv3d(Tensor(x), Tensor(k)).data - naive_conv(x, k)).max() < 1e-12

    def test_anisotropic_kernel(self, rng):
        x, k = rng.standard_normal((1, 3, 4, 5)), rng.standard_normal((1, 1, 3, 5))
        assert np.abs(depthwise_conv3d(Tensor(x), Tensor(k)).data - naive_conv(x, k)).max() < 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(ParameterError):
            depthwise_conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 2, 3, 3))))

    def test_flop_count(self):
        with FlopCounter() as fc:
            depthwise_conv3d(Tensor(np.ones((3, 4, 5, 6))), Tensor(np.ones((3, 3, 1, 5))))
        assert fc.multiplies == 3 * 4 * 5 * 6 * 3 * 1 * 5


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = rand_tensor(rng, 2, 3, grad=True)
        assert np.array_equal(backward(tsum(x))[x], np.ones((2, 3)))

    def test_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        grads = backward(tsum(mul(x, x)))
        assert np.array_equal(grads[x], [2.0, 4.0, 6.0])
        assert np.array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(mul(x, 2.0))

    def test_root_without_tape(self):
        with pytest.raises(ContractError):
            backward(tsum(Tensor([1.0, 2.0])))

    def test_tape_reset_after_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(tsum(mul(x, x)))
        assert len(current_tape()) == 0

    def test_tape_topological(self, rng):
        x = rand_tensor(rng, 3, grad=True)
        tsum(exp(mul(x, x)))
        tape = current_tape()
        positions = {id(n.output): i for i, n in enumerate(tape.nodes)}
        for i, node in enumerate(tape.nodes):
            assert all(positions.get(id(t), -1) < i for t in node.inputs)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad and len(current_tape()) == 0

    def test_two_layer_net_combined_loss(self, rng):
        w1 = rand_tensor(rng, 3, 5, grad=True)
        w2 = rand_tensor(rng, 5, 2, grad=True)
        x = rng.standard_normal((6, 3))
        labels = np.array([[[0, 1, 1], [1, 0, 1]]])

        def f(_=None):
            logits = linear(gelu(linear(Tensor(x), w1)), w2)  # [6, 2]
            vol = reshape(permute(logits, (1, 0)), (2, 1, 2, 3))
            return combined_loss([class_softmax(vol)], [labels])

        grads = backward(f())
        for w in (w1, w2):
            assert relative_error(grads[w], finite_diff_oracle(f, w)) < 1e-4


class TestFiniteDiff:
    def test_sum(self, rng):
        x = rand_tensor(rng, 4)
        assert np.abs(finite_diff_oracle(tsum, x).data - 1).max() < 1e-9

    def test_square(self):
        g = finite_diff_oracle(lambda t: mul(t, t), Tensor(3.0), 1e-5)
        assert abs(g.item() - 6) < 1e-8

    def test_softmax_jacobian_row(self):
        def first(t):
            return softmax_lastdim(t).data[0]

        g = finite_diff_oracle(first, Tensor([0.0, 0.0]))
        assert np.abs(g.data - [0.25, -0.25]).max() < 1e-6

    def test_non_finite(self):
        with pytest.raises(NumericError):
            finite_diff_oracle(lambda t: float("nan"), Tensor([1.0]))

    def test_bad_step(self):
        with pytest.raises(ParameterError):
            finite_diff_oracle(tsum, Tensor([1.0]), 0.0)


def test_forward_non_finite_is_error():
    with pytest.raises(NumericError):
        exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        log(Tensor([0.0, 1.0]))


shapes = st.lists(st.integers(1, 3), min_size=1, max_size=4).map(tuple)


def _check(f, *inputs):
    grads = backward(f(*inputs))
    for t in inputs:
        num = finite_diff_oracle(lambda _: f(*inputs), t)
        assert relative_error(grads[t], num) < 1e-4


class TestGradientProperties:
    """Every differentiable op against central differences on inputs in [-1, 1]."""

    @settings(max_examples=15, deadline=None)
    @given(shapes, st.integers(0, 2 ** 31))
    def test_elementwise(self, shape, seed):
        r = np.random.default_rng(seed)
        a, b = rand_tensor(r, *shape, grad=True), rand_tensor(r, *shape, grad=True)
        w = r.standard_normal(shape)
        _check(lambda a, b: tsum(mul(add3(a, b), w)), a, b)
        _check(lambda a: tsum(mul(gelu(a), w)), a)
        _check(lambda a: tsum(mul(exp(a), w)), a)
        _check(lambda a, b: tsum(mul(div(a, add3(mul(b, b), 1.0)), w)), a, b)

    @settings(max_examples=15, deadline=None)
    @given(shapes, st.integers(0, 2 ** 31))
    def test_softmax_layernorm(self, shape, seed):
        r = np.random.default_rng(seed)
        x = rand_tensor(r, *shape, grad=True)
        c = shape[-1]
        g, b = rand_tensor(r, c, grad=True), rand_tensor(r, c, grad=True)
        w = r.standard_normal(shape)
        _check(lambda x: tsum(mul(softmax_lastdim(x), w)), x)
        if c > 1:
            _check(lambda x, g, b: tsum(mul(layer_norm(x, g, b), w)), x, g, b)

    @settings(max_examples=15, deadline=None)
    @given(shapes, st.integers(0, 2 ** 31))
    def test_layout(self, shape, seed):
        r = np.random.default_rng(seed)
        x = rand_tensor(r, *shape, grad=True)
        perm = tuple(r.permutation(len(shape)))
        w = r.standard_normal(tuple(shape[i] for i in perm))
        _check(lambda x: tsum(mul(permute(x, perm), w)), x)
        idx = r.integers(0, shape[0], size=5)
        w2 = r.standard_normal((5, *shape[1:]))
        _check(lambda x: tsum(mul(index_select(x, idx), w2)), x)
        w3 = r.standard_normal((2 * shape[0], *shape[1:]))
        _check(lambda x: tsum(mul(concat([x, mul(x, x)], axis=0), w3)), x)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_products(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = rand_tensor(r, 2, m, k, grad=True), rand_tensor(r, 2, k, n, grad=True)
        w = r.standard_normal((2, m, n))
        _check(lambda a, b: tsum(mul(matmul(a, b), w)), a, b)
        wt, bias = rand_tensor(r, k, n, grad=True), rand_tensor(r, n, grad=True)
        _check(lambda a, wt, bias: tsum(mul(linear(a, wt, bias), w)), a, wt, bias)

    @settings(max_examples=8, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_conv(self, c, d, h, w_, seed):
        r = np.random.default_rng(seed)
        x, k = rand_tensor(r, c, d, h, w_, grad=True), rand_tensor(r, c, 3, 1, 3, grad=True)
        w = r.standard_normal((c, d, h, w_))
        _check(lambda x, k: tsum(mul(depthwise_conv3d(x, k), w)), x, k)


def add3(a, b):
    return a + b
