import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tracewarp import autodiff as ad
from tracewarp.autodiff import Tensor
from tracewarp.gradcheck import check_gradients


def _naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[j]
                    for k in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, k, r * stride + p, s * stride + q] * w[j, k, p, q]
                    out[i, j, r, s] = acc
    return out


class TestConv2d:
    def test_sum_of_ones(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 4)).astype(np.float32)
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_nested_loops(self, stride, pad):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        with ad.precision(np.float64):
            out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, _naive_conv(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_output_size(self):
        out = ad.conv2d(Tensor(np.zeros((1, 1, 9, 7))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(2)), 2, 1)
        assert out.shape == (1, 2, 5, 4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel"):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


class TestUpsample:
    def test_replication(self):
        out = ad.upsample_nearest2x(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_constant(self):
        out = ad.upsample_nearest2x(Tensor(np.full((1, 2, 3, 3), 0.7)))
        assert np.all(out.data == np.float32(0.7))

    def test_backward_sums_blocks(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)), requires_grad=True)
        ad.backward(ad.upsample_nearest2x(x).sum())
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 3, 3), 4.0))


class TestPrimitives:
    def test_leaky_relu(self):
        assert ad.leaky_relu(Tensor(np.array(-2.0)), 0.2).item() == pytest.approx(-0.4)

    def test_tanh_zero(self):
        assert ad.tanh(Tensor(np.array(0.0))).item() == 0.0

    def test_mean_and_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
        m = x.mean()
        assert m.item() == 2.5
        ad.backward(m)
        np.testing.assert_array_equal(x.grad, [0.25] * 4)

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(ValueError):
            ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_binary_shape_mismatch(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_scalar_broadcast(self):
        out = Tensor(np.ones((2, 2))) * 3.0 + 1.0
        np.testing.assert_array_equal(out.data, np.full((2, 2), 4.0))


class TestBackward:
    def test_weighted_sum(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x = Tensor(np.array([3.0, 4.0]))
        ad.backward((w * x).sum())
        np.testing.assert_array_equal(w.grad, [3.0, 4.0])

    def test_mean_square(self):
        w = Tensor(np.array([0.0, 2.0]), requires_grad=True)
        ad.backward((w - 1.0).square().mean())
        np.testing.assert_array_equal(w.grad, [-1.0, 1.0])

    def test_non_scalar_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(w * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        ad.backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_graph_cleared(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = (x * 2.0).sum()
        tape = ad.backward(loss)
        assert loss._ctx is None
        assert len(tape) == 0

    def test_every_leaf_gets_matching_grad(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        ad.backward(ad.matmul(a, b).sum())
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_detached_never_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        d = x.detach()
        ad.backward((d * 3.0).sum() + (x * 1.0).sum())
        assert d.grad is None
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert y._ctx is None and not y.requires_grad

    def test_topological_order_visits_each_node_once(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        h = x
        for _ in range(5):
            h = h * h * 0.5 + h
        tape = ad.Tape.from_loss(h.sum())
        ids = [id(n) for n in tape.nodes]
        assert len(ids) == len(set(ids))
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            if node._ctx is None:
                continue
            for parent in (p for p in node._ctx.inputs if p.requires_grad):
                assert position[id(parent)] < position[id(node)]


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((3, 4))

    def grad_of(fn):
        with ad.precision(np.float64):
            x = Tensor(x0, requires_grad=True)
            ad.backward(fn(x))
            return x.grad

    f1 = lambda x: ad.tanh(x).square().sum()
    f2 = lambda x: ad.exp(x * 0.3).mean()
    a, b = 0.7, -1.3
    combined = grad_of(lambda x: f1(x) * a + f2(x) * b)
    np.testing.assert_allclose(combined, a * grad_of(f1) + b * grad_of(f2), rtol=0, atol=1e-10)


def test_determinism():
    rng = np.random.default_rng(9)
    x0, w0 = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))

    def run():
        x = Tensor(x0, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        out = ad.leaky_relu(ad.conv2d(x, w, Tensor(np.zeros(4)), 2, 1)).square().mean()
        ad.backward(out)
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_precision_switch():
    assert ad.get_default_dtype() == np.float32
    with ad.precision(np.float64):
        assert Tensor(np.ones(2)).data.dtype == np.float64
    assert Tensor(np.ones(2)).data.dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1, 1).filter(lambda v: abs(v) > 0.05)))
def test_elementwise_chain_gradcheck(x):
    """Random small tensors in [-1, 1] away from the |x| kink."""
    res = check_gradients("chain", lambda t: (ad.tanh(t) * t.abs() + ad.exp(t * 0.5)).sum(), [x])
    assert res.passed, res


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 6), st.sampled_from([1, 2]))
def test_conv_gradcheck_random_shapes(n, c, size, stride):
    rng = np.random.default_rng(n * 100 + c * 10 + size)
    x, w, b = rng.uniform(-1, 1, (n, c, size, size)), rng.uniform(-1, 1, (2, c, 3, 3)), rng.uniform(-1, 1, 2)

    def fn(xt, wt, bt):
        out = ad.conv2d(xt, wt, bt, stride, 1)
        return (out * Tensor(np.cos(np.arange(out.size)).reshape(out.shape))).sum()
    assert check_gradients("conv", fn, [x, w, b]).passed


def test_gradcheck_flags_wrong_backward(monkeypatch):
    def bad_backward(self, g):
        return (g * 2.0 * (1 - self.out ** 2),)
    monkeypatch.setattr(ad.Tanh, "backward", bad_backward, raising=True)
    res = check_gradients("tanh", lambda t: ad.tanh(t).sum(), [np.linspace(-1, 1, 7)])
    assert not res.passed
