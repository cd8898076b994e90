import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uaseg._engine import kernels, ops
from uaseg._engine.tensor import Tensor, backward, grad_enabled, no_grad
from uaseg.errors import GraphError


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build, x0, tol=1e-6):
    """build(Tensor) -> scalar Tensor; compares autodiff grad to FD."""
    t = leaf(x0)
    grads = backward(build(t))
    num = fd_grad(lambda a: build(Tensor(a)).item(), x0)
    np.testing.assert_allclose(grads[t], num, rtol=tol, atol=tol)


class TestTensorBasics:
    def test_backward_returns_grad_per_leaf(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        grads = backward(ops.tsum(a * b))
        np.testing.assert_array_equal(grads[a], [3.0, 4.0])
        np.testing.assert_array_equal(grads[b], [1.0, 2.0])

    def test_shared_node_accumulates(self):
        a = leaf([2.0])
        grads = backward(ops.tsum(a * a + a))
        np.testing.assert_allclose(grads[a], [5.0])

    def test_detach_blocks_flow(self):
        a = leaf([2.0])
        grads = backward(ops.tsum(a.detach() * a))
        np.testing.assert_allclose(grads[a], [2.0])

    def test_no_grad_builds_no_graph(self):
        a = leaf([1.0])
        with no_grad():
            assert not grad_enabled()
            out = a * 2.0
        assert out.parents == ()
        assert out.backward_fn is None

    def test_backward_on_nonscalar_rejected(self):
        a = leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            backward(a * 2.0)

    def test_backward_on_detached_root_finds_no_leaves(self):
        a = leaf([1.0])
        assert backward(ops.tsum(a).detach()) == {}


class TestElementwise:
    def test_add_broadcast_grad(self):
        check_grad(lambda t: ops.tsum(t + np.ones((2, 3))), np.full((3,), 0.5))

    def test_mul_div_grads(self):
        x0 = np.array([[1.5, -0.5], [2.0, 0.25]])
        check_grad(lambda t: ops.tsum(t * t / (t + 3.0)), x0)

    def test_log_and_clip_min(self):
        x0 = np.array([0.5, 1.0, 2.0])
        check_grad(lambda t: ops.tsum(ops.log(ops.clip_min(t, 1e-12))), x0)

    def test_clip_min_zero_grad_where_clamped(self):
        a = leaf([0.5, 2.0])
        grads = backward(ops.tsum(ops.clip_min(a, 1.0)))
        np.testing.assert_array_equal(grads[a], [0.0, 1.0])

    def test_relu_grad(self):
        a = leaf([-1.0, 0.5])
        grads = backward(ops.tsum(ops.relu(a)))
        np.testing.assert_array_equal(grads[a], [0.0, 1.0])

    def test_neg_sub(self):
        check_grad(lambda t: ops.tsum(-t - 2.0 * t), np.array([1.0, -2.0]))


class TestReductions:
    def test_tsum_axis_keepdims(self):
        a = leaf(np.arange(6.0).reshape(2, 3))
        out = ops.tsum(a, axis=1, keepdims=True)
        assert out.shape == (2, 1)
        grads = backward(ops.tsum(out * np.array([[2.0], [3.0]])))
        np.testing.assert_array_equal(grads[a], [[2.0] * 3, [3.0] * 3])

    def test_tmean_grad(self):
        check_grad(lambda t: ops.tmean(t * t), np.array([1.0, 2.0, 3.0, 4.0]))

    def test_float64_accumulation(self):
        # 1 + 2^-24 in float32: naive running float32 sum collapses to 1.0 per term.
        big = np.full(1 << 12, 1.0, dtype=np.float32)
        tiny = np.full(1 << 12, 2.0 ** -24, dtype=np.float32)
        arr = np.stack([big, tiny], axis=1).ravel()
        total = ops.tsum(Tensor(arr)).item()
        expected = (1 << 12) * (1.0 + 2.0 ** -24)
        assert abs(total - expected) / expected < 1e-7


class TestSoftmax:
    def test_pinned_values(self):
        z = np.zeros((1, 2, 1, 1))
        np.testing.assert_allclose(ops.softmax(Tensor(z)).data.ravel(), [0.5, 0.5])
        z = np.array([np.log(3.0), 0.0]).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(ops.softmax(Tensor(z)).data.ravel(), [0.75, 0.25], rtol=1e-12)
        z = np.full((1, 4, 1, 1), 5.0)
        np.testing.assert_allclose(ops.softmax(Tensor(z)).data.ravel(), [0.25] * 4)

    def test_shift_invariance(self, rng):
        z = rng.uniform(-20, 20, size=(2, 5, 3, 3))
        a = ops.softmax(Tensor(z)).data
        b = ops.softmax(Tensor(z + 7.5)).data
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        z = rng.uniform(-20, 20, size=(4, 6, 2, 2))
        p = ops.softmax(Tensor(z)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_grad(self, rng):
        x0 = rng.normal(size=(1, 3, 2, 2))
        w = rng.normal(size=(1, 3, 2, 2))
        check_grad(lambda t: ops.tsum(ops.softmax(t) * w), x0, tol=1e-5)


class TestStructuralOps:
    def test_take_channel_forward(self):
        a = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        idx = np.array([[[0, 1], [1, 0]]])
        np.testing.assert_array_equal(ops.take_channel(a, idx).data, [[[0.0, 5.0], [6.0, 3.0]]])

    def test_take_channel_grad(self, rng):
        idx = rng.integers(0, 3, size=(2, 2, 2))
        x0 = rng.normal(size=(2, 3, 2, 2))
        check_grad(lambda t: ops.tsum(ops.take_channel(t, idx) * 2.0), x0)

    def test_avg_pool2_forward(self):
        a = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(ops.avg_pool2(a).data.ravel(), [2.5, 4.5, 10.5, 12.5])

    def test_pool_upsample_grads(self, rng):
        x0 = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(1, 2, 2, 2))
        check_grad(lambda t: ops.tsum(ops.avg_pool2(t) * w), x0)
        w2 = rng.normal(size=(1, 2, 8, 8))
        check_grad(lambda t: ops.tsum(ops.upsample2(t) * w2), x0)

    def test_upsample_pool_roundtrip_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        np.testing.assert_allclose(ops.avg_pool2(ops.upsample2(x)).data, x.data)


def conv_oracle(x, w, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    out[b, o, i, j] = np.sum(xp[b, :, i:i + kh, j:j + kw] * w[o])
    return out


class TestConv2d:
    @pytest.mark.parametrize("pad,kh", [(0, 1), (1, 3), (2, 3)])
    def test_forward_matches_oracle(self, rng, pad, kh):
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(2, 3, kh, kh))
        got = ops.conv2d(Tensor(x), Tensor(w), pad).data
        np.testing.assert_allclose(got, conv_oracle(x, w, pad), rtol=1e-10, atol=1e-10)

    def test_grads_match_fd(self, rng):
        x0 = rng.normal(size=(1, 2, 4, 4))
        w0 = rng.normal(size=(2, 2, 3, 3))
        m = rng.normal(size=(1, 2, 4, 4))
        check_grad(lambda t: ops.tsum(ops.conv2d(t, Tensor(w0), 1) * m), x0, tol=1e-5)
        check_grad(lambda t: ops.tsum(ops.conv2d(Tensor(x0), t, 1) * m), w0, tol=1e-5)

    def test_grad_skipped_for_constant_inputs(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        w = leaf(np.ones((1, 1, 1, 1)))
        grads = backward(ops.tsum(ops.conv2d(x, w, 0)))
        assert x not in grads and w in grads


class TestBackends:
    def test_both_backends_present(self):
        names = kernels.available_backends()
        assert "numpy" in names
        assert "compiled" in names, "extension module failed to build"

    def test_backend_parity(self, rng):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        g = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
        prev = kernels.get_backend()
        out = {}
        try:
            for name in kernels.available_backends():
                kernels.set_backend(name)
                out[name] = (
                    kernels.conv2d_forward(x, w, 1),
                    kernels.conv2d_backward_input(g, w, 1),
                    kernels.conv2d_backward_weight(g, x, 1),
                )
        finally:
            kernels.set_backend(prev)
        if len(out) == 2:
            for a, b in zip(out["numpy"], out["compiled"]):
                np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)

    def test_unknown_backend_rejected(self):
        with pytest.raises(Exception):
            kernels.set_backend("cuda")

    def test_dtype_promotion(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float64)
        assert kernels.conv2d_forward(x, w, 0).dtype == np.float64


class TestProperties:
    @given(st.integers(0, 2 ** 32 - 1))
    def test_conv_linear_in_input(self, seed):
        r = np.random.default_rng(seed)
        x1 = r.normal(size=(1, 2, 4, 4))
        x2 = r.normal(size=(1, 2, 4, 4))
        w = r.normal(size=(2, 2, 3, 3))
        lhs = ops.conv2d(Tensor(x1 + x2), Tensor(w), 1).data
        rhs = ops.conv2d(Tensor(x1), Tensor(w), 1).data + ops.conv2d(Tensor(x2), Tensor(w), 1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_softmax_probability_simplex(self, seed):
        r = np.random.default_rng(seed)
        z = r.uniform(-20, 20, size=(1, 4, 2, 2))
        p = ops.softmax(Tensor(z)).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
