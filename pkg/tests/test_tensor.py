"""Unit tests for the reverse-mode autodiff engine."""

import numpy as np
import pytest

from adafuse.config import using_dtype
from adafuse.tensor import (Tensor, add, concat, conv2d, div, gelu, layernorm,
                            linear, matmul, maxpool2d, mul, no_grad,
                            pad_reflect2d, reshape, sigmoid, softmax, stack,
                            tabs, texp, tlog, tlog1p, tmean, transpose, tsqrt,
                            tsum, upsample2x)


@pytest.fixture(autouse=True)
def _float64():
    with using_dtype("float64"):
        yield


def rng():
    return np.random.default_rng(0)


class TestBasics:
    def test_scalar_chain_rule(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x + x
        y.backward()
        assert float(y.data) == 12.0
        assert float(x.grad) == 7.0

    def test_leaf_grad_accumulates_across_uses(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        (x * x * x).backward()  # d/dx x^3 = 3x^2
        assert float(x.grad) == 12.0

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(RuntimeError, match="scalar"):
            (x * 2.0).backward()

    def test_double_backward_rejected(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x * x
        y.backward()
        with pytest.raises(RuntimeError, match="already called"):
            y.backward()

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        with no_grad():
            y = x * x
        assert y._parents == ()

    def test_non_finite_forward_raises(self):
        x = Tensor(np.array(0.0))
        with np.errstate(divide="ignore"):
            with pytest.raises(FloatingPointError):
                tlog(x)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_dtype_follows_config(self):
        with using_dtype("float32"):
            t = Tensor(np.ones(3))
            assert t.data.dtype == np.float32
        t = Tensor(np.ones(3))
        assert t.data.dtype == np.float64


class TestGradientValues:
    """Closed-form gradient spot checks (the FD suite covers the rest)."""

    def check(self, f, x, expect):
        t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        tsum(f(t)).backward()
        np.testing.assert_allclose(t.grad, expect, rtol=1e-12, atol=1e-12)

    def test_exp(self):
        self.check(texp, [0.0, 1.0], np.exp([0.0, 1.0]))

    def test_log(self):
        self.check(tlog, [1.0, 2.0], [1.0, 0.5])

    def test_log1p(self):
        self.check(tlog1p, [0.0, 1.0], [1.0, 0.5])

    def test_sqrt(self):
        self.check(tsqrt, [1.0, 4.0], [0.5, 0.25])

    def test_abs(self):
        self.check(tabs, [-2.0, 3.0], [-1.0, 1.0])

    def test_sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-0.3))
        self.check(sigmoid, [0.3], [s * (1 - s)])

    def test_div(self):
        a = Tensor(np.array([6.0]), requires_grad=True)
        b = Tensor(np.array([3.0]), requires_grad=True)
        tsum(div(a, b)).backward()
        np.testing.assert_allclose(a.grad, [1 / 3])
        np.testing.assert_allclose(b.grad, [-6 / 9])

    def test_mean_gradient_is_uniform(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tmean(x).backward()
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))


class TestShapeOps:
    def test_reshape_transpose_roundtrip(self):
        x = Tensor(rng().standard_normal((2, 3, 4)), requires_grad=True)
        y = transpose(reshape(x, (6, 4)), (1, 0))
        assert y.shape == (4, 6)
        tsum(y * y).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_concat_backward_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        w = np.concatenate([np.full((2, 2), 2.0), np.full((3, 2), 5.0)])
        tsum(concat([a, b], axis=0) * Tensor(w)).backward()
        np.testing.assert_allclose(a.grad, np.full((2, 2), 2.0))
        np.testing.assert_allclose(b.grad, np.full((3, 2), 5.0))

    def test_stack_matches_numpy(self):
        parts = [Tensor(np.full((2,), float(i))) for i in range(3)]
        assert stack(parts, axis=0).shape == (3, 2)
        np.testing.assert_array_equal(
            stack(parts, axis=0).data,
            np.stack([p.data for p in parts]))

    def test_sum_axis_keepdims(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert tsum(x, axis=1, keepdims=True).shape == (2, 1)
        np.testing.assert_allclose(tsum(x, axis=0).data, [3.0, 5.0, 7.0])


class TestMatmulLinear:
    def test_matmul_matches_numpy(self):
        a, b = rng().standard_normal((4, 5)), rng().standard_normal((5, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_batched_matmul(self):
        g = rng()
        a, b = g.standard_normal((2, 4, 5)), g.standard_normal((2, 5, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_linear_bias(self):
        g = rng()
        x, w, b = g.standard_normal((4, 3)), g.standard_normal((3, 2)), g.standard_normal(2)
        out = linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, x @ w + b)


class TestNNOps:
    def test_softmax_rows_sum_to_one(self):
        s = softmax(Tensor(rng().standard_normal((5, 7)))).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)
        assert (s > 0).all()

    def test_softmax_shift_invariance(self):
        x = rng().standard_normal(9)
        np.testing.assert_allclose(softmax(Tensor(x)).data,
                                   softmax(Tensor(x + 1000.0)).data, atol=1e-12)

    def test_layernorm_statistics(self):
        d = 16
        out = layernorm(Tensor(rng().standard_normal((3, d))),
                        Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gelu_fixed_points(self):
        vals = gelu(Tensor(np.array([0.0, 100.0, -100.0]))).data
        np.testing.assert_allclose(vals, [0.0, 100.0, 0.0], atol=1e-12)

    def test_conv2d_identity_kernel(self):
        x = rng().standard_normal((2, 6, 6))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = 1.0
        k[1, 1, 1, 1] = 1.0
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k)).data, x, atol=1e-12)

    def test_conv2d_valid_shape(self):
        out = conv2d(Tensor(np.ones((1, 8, 8))), Tensor(np.ones((4, 1, 3, 3))),
                     padding="valid")
        assert out.shape == (4, 6, 6)

    def test_conv2d_rejects_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            conv2d(Tensor(np.ones((1, 8, 8))), Tensor(np.ones((1, 1, 2, 2))))

    def test_maxpool_picks_maxima(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_array_equal(maxpool2d(Tensor(x)).data,
                                      [[[5.0, 7.0], [13.0, 15.0]]])

    def test_maxpool_gradient_routes_to_argmax(self):
        x = Tensor(np.arange(16.0).reshape(1, 4, 4), requires_grad=True)
        tsum(maxpool2d(x)).backward()
        expect = np.zeros((1, 4, 4))
        expect[0, [1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_upsample_constant_stays_constant(self):
        out = upsample2x(Tensor(np.full((2, 3, 3), 0.7))).data
        assert out.shape == (2, 6, 6)
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_pad_reflect_matches_numpy(self):
        x = rng().standard_normal((1, 4, 4))
        out = pad_reflect2d(Tensor(x), 1).data
        np.testing.assert_allclose(out, np.pad(x, ((0, 0), (1, 1), (1, 1)),
                                               mode="reflect"))
