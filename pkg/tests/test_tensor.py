import math
import zlib

import numpy as np
import pytest

from hia import tensor as tn
from hia.tensor import NumericError, Tensor, grad_check


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        np.testing.assert_array_equal(tn.matmul(Tensor([[1, 2]]), Tensor([[0], [0]])).data, [[0]])

    def test_hand_computed(self):
        out = tn.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        dc = rng.standard_normal((3, 2))
        tn.backward(tn.tsum(tn.mul(tn.matmul(a, b), Tensor(dc))))
        np.testing.assert_allclose(a.grad, dc @ b.data.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ dc, rtol=1e-14)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    @pytest.mark.parametrize("c", [-50.0, 3.0, 700.0])
    def test_shift_invariant(self, c):
        np.testing.assert_allclose(tn.softmax(Tensor([c, c])).data, [0.5, 0.5])

    def test_values(self):
        # oracle: e^x_i / sum e^x_j evaluated term by term
        z = sum(math.exp(v) for v in (1, 2, 3))
        expected = [math.exp(v) / z for v in (1, 2, 3)]
        out = tn.softmax(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, expected, rtol=1e-14)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).normal(0, 30, (20, 7))
        out = tn.softmax(Tensor(x), axis=-1).data
        assert np.abs(out.sum(axis=-1) - 1).max() < 1e-12


class TestLayerNorm:
    def ones(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_row(self):
        out = tn.layer_norm(Tensor([5.0, 5.0, 5.0]), *self.ones(3), eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_zero_gamma_gives_beta(self):
        beta = Tensor([1.0, -2.0, 3.0])
        out = tn.layer_norm(Tensor(np.random.default_rng(0).standard_normal((4, 3))), Tensor(np.zeros(3)), beta)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta.data, (4, 3)))

    def test_two_values(self):
        out = tn.layer_norm(Tensor([1.0, 3.0]), *self.ones(2), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=1e-15)

    def test_row_mean_zero(self):
        x = np.random.default_rng(2).normal(3, 5, (50, 9))
        out = tn.layer_norm(Tensor(x), *self.ones(9))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-10


class TestConv:
    def test_identity_kernel(self):
        x = Tensor([[1.0], [2.0], [3.0]])
        out = tn.conv1d_same(x, Tensor(np.ones((1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_gives_bias(self):
        out = tn.conv1d_same(Tensor(np.zeros((4, 2))), Tensor(np.ones((3, 2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_sliding_sums(self):
        out = tn.conv1d_same(Tensor([[1.0], [2.0], [3.0]]), Tensor(np.ones((3, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 6.0, 5.0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            tn.conv1d_same(Tensor(np.zeros((3, 1))), Tensor(np.ones((2, 1, 1))), Tensor([0.0]))

    def test_preserves_length_and_matches_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 7, 3))
        w = rng.standard_normal((5, 3, 4))
        b = rng.standard_normal(4)
        out = tn.conv1d_same(Tensor(x), Tensor(w), Tensor(b)).data
        assert out.shape == (2, 7, 4)
        xp = np.pad(x, ((0, 0), (2, 2), (0, 0)))
        ref = np.array([[sum(xp[n, t + j] @ w[j] for j in range(5)) + b for t in range(7)] for n in range(2)])
        np.testing.assert_allclose(out, ref, rtol=1e-12)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        tn.backward(tn.mul(x, x))
        assert x.grad == 6.0

    def test_sum_of_product_identity(self):
        b = leaf(np.arange(4.0).reshape(2, 2))
        tn.backward(tn.tsum(tn.matmul(Tensor(np.eye(2)), b)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2)))

    def test_independent_leaf(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0])
        loss = tn.tsum(x) + tn.scale(tn.tsum(tn.mul(y, Tensor(0.0))), 1.0)
        tn.backward(loss)
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_fan_out_accumulates(self):
        x = leaf(1.5)
        tn.backward(x + x)
        assert x.grad == 2.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            tn.backward(leaf([1.0, 2.0]) * 2.0)

    def test_topological_order(self):
        x = leaf(2.0)
        y = tn.square(x)
        z = y + x
        order = tn.topological_order(z)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]

    def test_deep_chain_no_recursion_limit(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = tn.scale(y, 1.0)
        tn.backward(y)
        assert x.grad == 1.0


class TestFinite:
    def test_log_zero_is_error(self):
        with pytest.raises(NumericError):
            tn.log(Tensor([0.0, 1.0]))

    def test_overflow_is_error(self):
        with pytest.raises(NumericError):
            tn.exp(Tensor([1000.0]))


class TestDropout:
    def test_eval_identity(self):
        x = Tensor(np.ones((3, 4)))
        assert tn.dropout(x, 0.5, None, training=False) is x

    def test_deterministic_under_seed(self):
        x = Tensor(np.ones((6, 8)))
        a = tn.dropout(x, 0.3, np.random.default_rng(7), True).data
        b = tn.dropout(x, 0.3, np.random.default_rng(7), True).data
        np.testing.assert_array_equal(a, b)

    def test_inverted_scaling(self):
        out = tn.dropout(Tensor(np.ones(200_000)), 0.1, np.random.default_rng(0), True).data
        kept = out[out > 0]
        assert abs(out.mean() - 1.0) < 0.01
        np.testing.assert_allclose(kept, kept[0])
        assert abs((out == 0).mean() - 0.1) < 0.005


class TestGradCheck:
    def test_quadratic(self):
        theta = leaf([1.0, 2.0])
        assert grad_check(lambda: tn.tsum(tn.square(theta)), [theta], 1e-5) < 1e-7

    def test_constant(self):
        theta = leaf([1.0, 2.0])
        assert grad_check(lambda: tn.tsum(Tensor([4.0])), [theta], 1e-5) == 0.0

    def test_bad_h(self):
        with pytest.raises(ValueError):
            grad_check(lambda: Tensor(0.0), [], 0.0)


# every primitive, 100 random small shapes each


def _shapes(rng, n=100, nd=(1, 3)):
    for _ in range(n):
        k = int(rng.integers(nd[0], nd[1] + 1))
        yield tuple(int(v) for v in rng.integers(1, 4, size=k))


def _weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


def case_add(rng, shape):
    a, b = leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(shape[-1:]))
    w = _weights(rng, shape)
    return lambda: tn.tsum(tn.mul(a + b, w)), [a, b]


def case_mul(rng, shape):
    a, b = leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(shape))
    return lambda: tn.tsum(tn.mul(a, b)), [a, b]


def case_scale_sum_mean(rng, shape):
    a = leaf(rng.standard_normal(shape))
    w = _weights(rng, shape[:-1])
    return lambda: tn.tsum(tn.mul(tn.mean(tn.scale(a, 1.7), axis=-1), w)) + tn.tsum(a), [a]


def case_concat_slice(rng, shape):
    a, b = leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(shape))
    w = _weights(rng, shape[:-1] + (2 * shape[-1],))

    def f():
        c = tn.concat([a, b], axis=-1)
        return tn.tsum(tn.mul(c, w)) + tn.tsum(tn.square(c[..., :1]))

    return f, [a, b]


def case_stack_reshape_transpose(rng, shape):
    a, b = leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(shape))
    s = tn.stack([a, b], axis=0)
    w = _weights(rng, tuple(reversed(s.shape)))
    return lambda: tn.tsum(tn.mul(tn.transpose(tn.stack([a, b], 0)), w)) + tn.tsum(tn.square(tn.reshape(a, (-1,)))), [a, b]


def case_relu(rng, shape):
    # keep inputs away from the kink so central differences are valid
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    a = leaf(x)
    w = _weights(rng, shape)
    return lambda: tn.tsum(tn.mul(tn.relu(a), w)), [a]


def case_exp_log(rng, shape):
    a = leaf(rng.uniform(0.5, 2.0, shape))
    return lambda: tn.tsum(tn.log(a)) + tn.tsum(tn.exp(tn.scale(a, 0.3))) + tn.tsum(tn.reciprocal(a)), [a]


def case_matmul(rng, shape):
    m, k = shape[0], shape[-1]
    a, b = leaf(rng.standard_normal((m, k))), leaf(rng.standard_normal((k, 3)))
    w = _weights(rng, (m, 3))
    return lambda: tn.tsum(tn.mul(tn.matmul(a, b), w)), [a, b]


def case_linear(rng, shape):
    x = leaf(rng.standard_normal(shape + (3,)))
    W, b = leaf(rng.standard_normal((3, 2))), leaf(rng.standard_normal(2))
    w = _weights(rng, shape + (2,))
    return lambda: tn.tsum(tn.mul(tn.linear(x, W, b), w)), [x, W, b]


def case_softmax(rng, shape):
    a = leaf(rng.standard_normal(shape))
    w = _weights(rng, shape)
    return lambda: tn.tsum(tn.mul(tn.softmax(a, axis=-1), w)), [a]


def case_layer_norm(rng, shape):
    # with two features the normalised output is pinned to +-1 and its x-gradient is pure roundoff
    d = shape[-1] + 2
    x = leaf(rng.standard_normal(shape[:-1] + (d,)))
    g, b = leaf(rng.standard_normal(d)), leaf(rng.standard_normal(d))
    w = _weights(rng, x.shape)
    return lambda: tn.tsum(tn.mul(tn.layer_norm(x, g, b), w)), [x, g, b]


def case_conv(rng, shape):
    T = shape[0] + 1
    x = leaf(rng.standard_normal((2, T, 2)))
    k = leaf(rng.standard_normal((3, 2, 3)))
    b = leaf(rng.standard_normal(3))
    w = _weights(rng, (2, T, 3))
    return lambda: tn.tsum(tn.mul(tn.conv1d_same(x, k, b), w)), [x, k, b]


def case_embedding(rng, shape):
    table = leaf(rng.standard_normal((5, 3)))
    ids = rng.integers(0, 5, size=shape)
    w = _weights(rng, shape + (3,))
    return lambda: tn.tsum(tn.mul(tn.embedding(table, ids), w)), [table]


def case_masked_mean(rng, shape):
    B, T = shape[0], shape[-1] + 1
    x = leaf(rng.standard_normal((B, T, 2)))
    mask = (rng.random((B, T)) < 0.6).astype(float)
    mask[:, 0] = 1.0
    w = _weights(rng, (B, 2))
    return lambda: tn.tsum(tn.mul(tn.masked_mean(x, mask), w)), [x]


def case_dropout(rng, shape):
    a = leaf(rng.standard_normal(shape))
    w = _weights(rng, shape)
    seed = int(rng.integers(1 << 30))
    # re-seeding inside f gives the same mask for every evaluation
    return lambda: tn.tsum(tn.mul(tn.dropout(a, 0.3, np.random.default_rng(seed), True), w)), [a]


def case_attention(rng, shape):
    B, T = shape[0], shape[-1] + 1
    q, k, v = (leaf(rng.standard_normal((B, T, 3))) for _ in range(3))
    mask = np.ones((B, T))
    mask[:, -1] = 0.0 if T > 1 else 1.0
    w = _weights(rng, (B, T, 3))
    return lambda: tn.tsum(tn.mul(tn.attention(q, k, v, tn.key_mask(mask)), w)), [q, k, v]


PRIMITIVES = [case_add, case_mul, case_scale_sum_mean, case_concat_slice, case_stack_reshape_transpose,
              case_relu, case_exp_log, case_matmul, case_linear, case_softmax, case_layer_norm,
              case_conv, case_embedding, case_masked_mean, case_dropout, case_attention]


@pytest.mark.parametrize("case", PRIMITIVES, ids=lambda c: c.__name__[5:])
def test_primitive_gradients(case):
    rng = np.random.default_rng(zlib.crc32(case.__name__.encode()))
    worst = 0.0
    for shape in _shapes(rng):
        f, params = case(rng, shape)
        worst = max(worst, grad_check(f, params, 1e-6))
    assert worst < 1e-4
