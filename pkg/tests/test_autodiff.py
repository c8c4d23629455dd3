"""Tensor engine tests: forward values, broadcasting, and gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moevit import autodiff as ad
from moevit.autodiff import Tensor, no_grad
from moevit.errors import ShapeError
from moevit.gradcheck import grad_check


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, *shape):
    return t64(rng.standard_normal(shape))


class TestForward:
    def test_add_mul_broadcast(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([10.0, 20.0])
        np.testing.assert_allclose((a + b).data, [[11, 22], [13, 24]])
        np.testing.assert_allclose((a * b).data, [[10, 40], [30, 80]])

    def test_default_dtype_is_f32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor(np.arange(3)).dtype == np.float32
        assert t64([1.0]).dtype == np.float64

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_backward_rejects_nonscalar(self):
        x = t64([[1.0, 2.0]])
        with pytest.raises(ShapeError):
            (x * 2).backward()

    def test_softmax_rows_values(self):
        x = Tensor([[0.0, 0.0], [1.0, 0.0]])
        y = ad.softmax_rows(x).data
        np.testing.assert_allclose(y[0], [0.5, 0.5], atol=1e-7)
        np.testing.assert_allclose(y[1], [np.e / (np.e + 1), 1 / (np.e + 1)], atol=1e-6)

    def test_layer_norm_normalizes(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 16)))
        g = Tensor(np.ones(16, dtype=np.float32), requires_grad=True)
        b = Tensor(np.zeros(16, dtype=np.float32), requires_grad=True)
        y = ad.layer_norm(x, g, b).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)

    def test_normal_cdf_reference_points(self):
        x = Tensor(np.array([0.0, 1.0, -1.0, 2.5], dtype=np.float64))
        got = ad.normal_cdf(x).data
        # High-precision values of the standard normal CDF.
        want = np.array([0.5, 0.8413447460685429, 0.15865525393145707, 0.9937903346742238])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_no_grad_blocks_recording(self):
        x = t64([1.0, 2.0])
        with no_grad():
            y = (x * 3).sum()
        assert not y.requires_grad
        assert y._backward_fn is None

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.ones((5, 5)))
        y = ad.dropout(x, 0.5, np.random.default_rng(0), train=False)
        assert y is x

    def test_dropout_train_scales_survivors(self):
        x = Tensor(np.ones((200, 200)))
        y = ad.dropout(x, 0.25, np.random.default_rng(0), train=True).data
        vals = np.unique(np.round(y, 6))
        np.testing.assert_allclose(vals, [0.0, 1.0 / 0.75], atol=1e-6)
        assert abs((y == 0).mean() - 0.25) < 0.01


class TestSmallMatmulOracle:
    """f64 matmul with every dim <= 8 must match naive triple-loop evaluation bitwise."""

    @staticmethod
    def triple_loop(a, b):
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
        for i in range(a.shape[0]):
            for j in range(b.shape[1]):
                for k in range(a.shape[1]):
                    out[i, j] += a[i, k] * b[k, j]
        return out

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
    @settings(max_examples=150, deadline=None)
    def test_bitwise_equal_to_triple_loop(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        want = self.triple_loop(a, b)
        assert np.array_equal(got, want)


class TestGradients:
    rng = np.random.default_rng(7)

    def test_arithmetic_chain(self):
        a, b = rand64(self.rng, 3, 4), rand64(self.rng, 4)
        err = grad_check(lambda a, b: ((a * b + a / (b * b + 2.0) - 0.5) ** 3).sum(), [a, b])
        assert err < 1e-6

    def test_matmul(self):
        a, b = rand64(self.rng, 3, 5), rand64(self.rng, 5, 2)
        err = grad_check(lambda a, b: (ad.matmul(a, b) ** 2).sum(), [a, b])
        assert err < 1e-6

    def test_batched_matmul_broadcast(self):
        a, b = rand64(self.rng, 2, 3, 4, 5), rand64(self.rng, 3, 5, 4)
        err = grad_check(lambda a, b: (ad.matmul(a, b) ** 2).mean(), [a, b])
        assert err < 1e-6

    @pytest.mark.parametrize(
        "op",
        [ad.exp, ad.sqrt, ad.sigmoid, ad.silu, ad.softplus, ad.normal_cdf],
        ids=lambda f: f.__name__,
    )
    def test_elementwise(self, op):
        x = t64(self.rng.uniform(0.5, 2.0, (3, 4)))
        err = grad_check(lambda x: op(x).sum(), [x])
        assert err < 1e-6

    def test_log(self):
        x = t64(self.rng.uniform(0.5, 3.0, (3, 4)))
        err = grad_check(lambda x: (ad.log(x) * 2).sum(), [x])
        assert err < 1e-6

    def test_softmax_and_log_softmax(self):
        x = rand64(self.rng, 4, 6)
        w = self.rng.standard_normal((4, 6))
        err = grad_check(lambda x: (ad.softmax_rows(x) * Tensor(w)).sum(), [x])
        assert err < 1e-6
        err = grad_check(lambda x: (ad.log_softmax_rows(x) * Tensor(w)).sum(), [x])
        assert err < 1e-6

    def test_layer_norm(self):
        x = rand64(self.rng, 5, 8)
        g = t64(self.rng.standard_normal(8))
        b = t64(self.rng.standard_normal(8))
        err = grad_check(lambda x, g, b: (ad.layer_norm(x, g, b) ** 2).sum(), [x, g, b])
        assert err < 1e-5

    def test_reductions_and_shapes(self):
        x = rand64(self.rng, 2, 3, 4)
        err = grad_check(lambda x: (x.sum(axis=1) ** 2).mean() + x.mean(axis=(0, 2)).sum(), [x])
        assert err < 1e-6
        err = grad_check(lambda x: (x.reshape(6, 4).transpose((1, 0)) ** 2).sum(), [x])
        assert err < 1e-6

    def test_concat(self):
        a, b = rand64(self.rng, 2, 3), rand64(self.rng, 4, 3)
        err = grad_check(lambda a, b: (ad.concat([a, b], axis=0) ** 2).sum(), [a, b])
        assert err < 1e-6

    def test_gather_scatter_rows(self):
        x = rand64(self.rng, 6, 3)
        idx = np.array([0, 2, 2, 5])
        err = grad_check(lambda x: (x.gather_rows(idx) ** 2).sum(), [x])
        assert err < 1e-6
        v = rand64(self.rng, 4, 3)
        err = grad_check(lambda v: (ad.scatter_rows(v, idx, 6) ** 2).sum(), [v])
        assert err < 1e-6

    def test_take_scatter_along_last(self):
        x = rand64(self.rng, 3, 5)
        idx = np.array([[0, 3], [4, 4], [1, 2]])
        err = grad_check(lambda x: (ad.take_along_last(x, idx) ** 3).sum(), [x])
        assert err < 1e-6
        v = rand64(self.rng, 3, 2)
        err = grad_check(lambda v: (ad.scatter_along_last(v, idx, 5) ** 2).sum(), [v])
        assert err < 1e-6

    def test_clamp_min(self):
        x = t64([[-1.0, 0.5], [2.0, -0.2]])
        err = grad_check(lambda x: (ad.clamp_min(x, 0.0) * 3).sum(), [x])
        assert err < 1e-6

    def test_grad_accumulates_across_uses(self):
        x = t64([2.0])
        y = (x * x + x * 3).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 9))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_is_a_distribution(seed, rows, cols):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 5
    y = ad.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
