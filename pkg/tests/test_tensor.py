"""Kernel-level tests: forward oracles, finite-difference gradients, Adam."""

import numpy as np
import pytest

import lphom.tensor as tt
from lphom.tensor import (
    AdamState,
    NumericError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    finite_difference_check,
    no_grad,
    using_dtype,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        y = tt.conv2d(x, w, stride=1, pad=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_all_ones_padded(self):
        # 3x3 ones input, 3x3 ones kernel, pad 1: each output counts the
        # overlap size, so the center sees all 9 inputs and corners see 4.
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        y = tt.conv2d(x, w, stride=1, pad=1)
        assert y.data[0, 0, 1, 1] == 9.0
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y.data[0, 0, i, j] == 4.0

    def test_output_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 16, 16)).astype(np.float32))
        w = Tensor(rng.normal(size=(8, 4, 3, 3)).astype(np.float32))
        assert tt.conv2d(x, w, stride=2, pad=1).shape == (1, 8, 8, 8)

    def test_channel_mismatch_names_shapes(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
        with pytest.raises(ShapeError, match=r"\(1, 3, 8, 8\).*\(4, 2, 3, 3\)"):
            tt.conv2d(x, w)

    def test_matches_brute_force(self, rng):
        # Direct quadruple-loop cross-correlation as the independent oracle.
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        stride, pad = 2, 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh = (x.shape[2] + 2 * pad - 3) // stride + 1
        ow = (x.shape[3] + 2 * pad - 3) // stride + 1
        expected = np.zeros((2, 4, oh, ow))
        for n in range(2):
            for o in range(4):
                for y in range(oh):
                    for z in range(ow):
                        patch = xp[n, :, y * stride : y * stride + 3, z * stride : z * stride + 3]
                        expected[n, o, y, z] = (patch * w[o]).sum()
        got = tt.conv2d(t64(x), t64(w), stride=stride, pad=pad)
        np.testing.assert_allclose(got.data, expected, rtol=1e-12)


class TestConvTranspose2d:
    def test_shape_roundtrip(self, rng):
        # conv2d after conv_transpose2d with matching stride/pad restores
        # the spatial dims for any kernel size.
        for k, s, p, h in [(4, 2, 1, 8), (3, 1, 1, 5), (2, 2, 0, 7)]:
            x = Tensor(rng.normal(size=(1, 3, h, h)).astype(np.float32))
            wt = Tensor(rng.normal(size=(3, 5, k, k)).astype(np.float32))
            up = tt.conv_transpose2d(x, wt, stride=s, pad=p)
            w = Tensor(rng.normal(size=(2, 5, k, k)).astype(np.float32))
            down = tt.conv2d(up, w, stride=s, pad=p)
            assert down.shape[2:] == (h, h)

    def test_adjoint_of_conv(self, rng):
        # <conv(x, w), y> == <x, conv_transpose(y, w)> for conforming shapes.
        x = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(5, 3, 3, 3))
        y = rng.normal(size=(2, 5, 5, 5))
        lhs = (tt.conv2d(t64(x), t64(w), 2, 1).data * y).sum()
        rhs = (x * tt.conv_transpose2d(t64(y), t64(w), 2, 1).data[:, :, :9, :9]).sum()
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


class TestBackward:
    def test_sum_of_squares_gradient(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            loss = tt.sum_all(tt.mul(x, x))
            backward(loss)
            np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_constant_loss_zero_gradient(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            c = Tensor(np.ones((3, 3)))
            loss = tt.mean_all(tt.mul(c, c))
            backward(loss)
            assert x.grad is None

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)
        y = tt.mul(x, x)
        with pytest.raises(ShapeError):
            backward(y)

    def test_reused_tensor_accumulates(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3,)), requires_grad=True)
            loss = tt.sum_all(tt.add(tt.mul(x, x), x))
            backward(loss)
            np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)

    def test_tape_consumed(self, rng):
        x = Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=True)
        backward(tt.sum_all(x))
        assert not tt._TAPE.nodes


def _gn_params(c):
    gamma = Tensor(np.random.default_rng(7).normal(1.0, 0.1, size=(c,)), requires_grad=True, dtype=np.float64)
    beta = Tensor(np.random.default_rng(8).normal(0.0, 0.1, size=(c,)), requires_grad=True, dtype=np.float64)
    return gamma, beta


class TestKernelGradients:
    """Central finite differences vs taped adjoints, 64-bit, h=1e-5."""

    TOL = 1e-4

    def check(self, loss_fn, params):
        with using_dtype(np.float64):
            err = finite_difference_check(loss_fn, params)
        assert err <= self.TOL, f"max relative error {err:.3e}"

    def test_conv2d(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 4, 3, 3)))
        self.check(lambda: tt.mse(tt.conv2d(x, w, 2, 1), tgt), [x, w])

    def test_conv_transpose2d(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 2, 8, 8)))
        self.check(lambda: tt.mse(tt.conv_transpose2d(x, w, 2, 1), tgt), [x, w])

    def test_linear(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4,)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(3, 4)))
        self.check(lambda: tt.mse(tt.linear(x, w, b), tgt), [x, w, b])

    def test_group_norm(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 8, 4, 4)), requires_grad=True)
            gamma, beta = _gn_params(8)
            tgt = Tensor(rng.normal(size=(2, 8, 4, 4)))
        self.check(lambda: tt.mse(tt.group_norm(x, gamma, beta, groups=8), tgt), [x, gamma, beta])

    @pytest.mark.parametrize("op", ["silu", "sigmoid", "exp"])
    def test_unary(self, rng, op):
        fn = getattr(tt, op)
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(3, 4)))
        self.check(lambda: tt.mse(fn(x), tgt), [x])

    def test_clamp(self, rng):
        # points kept clear of the clamp boundaries so FD stays valid
        with using_dtype(np.float64):
            x = Tensor(rng.uniform(-0.8, 0.8, size=(4, 4)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(4, 4)))
        self.check(lambda: tt.mse(tt.clamp(x, -1.0, 1.0), tgt), [x])

    def test_avg_pool2d(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 3, 2, 2)))
        self.check(lambda: tt.mse(tt.avg_pool2d(x, 2), tgt), [x])

    def test_nearest_upsample(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 3, 6, 6)))
        self.check(lambda: tt.mse(tt.nearest_upsample(x, 2), tgt), [x])

    def test_add_mul_broadcast(self, rng):
        with using_dtype(np.float64):
            a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 3, 4, 4)))
        self.check(lambda: tt.mse(tt.mul(tt.add(a, b), b), tgt), [a, b])

    def test_concat_narrow(self, rng):
        with using_dtype(np.float64):
            a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 4, 4, 4)))

        def loss_fn():
            cat = tt.concat([a, b], axis=1)
            return tt.mse(tt.narrow(cat, 1, 1, 4), tgt)

        self.check(loss_fn, [a, b])

    def test_gather_rows(self, rng):
        with using_dtype(np.float64):
            table = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
            idx = np.array([0, 2, 2, 4])
            tgt = Tensor(rng.normal(size=(4, 6)))
        self.check(lambda: tt.mse(tt.gather_rows(table, idx), tgt), [table])

    def test_reductions(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 3)))

        def loss_fn():
            pooled = tt.global_avg_pool(x)
            return tt.add(tt.mse(pooled, tgt), tt.add(tt.mean_all(x), tt.sum_all(x) * 0.01))

        self.check(loss_fn, [x])

    def test_cross_entropy(self, rng):
        with using_dtype(np.float64):
            logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
            labels = np.array([0, 1, 2, 3, 1, 2])
        self.check(lambda: tt.cross_entropy_logits(logits, labels), [logits])

    def test_composite_chain(self, rng):
        # conv -> group_norm -> silu -> pool -> upsample -> conv -> mse
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
            w1 = Tensor(rng.normal(size=(8, 3, 3, 3)) * 0.5, requires_grad=True)
            gamma, beta = _gn_params(8)
            w2 = Tensor(rng.normal(size=(2, 8, 3, 3)) * 0.5, requires_grad=True)
            tgt = Tensor(rng.normal(size=(2, 2, 8, 8)))

        def loss_fn():
            h = tt.silu(tt.group_norm(tt.conv2d(x, w1, 1, 1), gamma, beta, 8))
            h = tt.nearest_upsample(tt.avg_pool2d(h, 2), 2)
            return tt.mse(tt.conv2d(h, w2, 1, 1), tgt)

        self.check(loss_fn, [x, w1, gamma, beta, w2])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.ones((3,), dtype=np.float32), requires_grad=True)
        before = p.data.copy()
        adam_step([p], [np.zeros(3, dtype=np.float32)], AdamState(lr=0.1))
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude(self, rng):
        # After bias correction the first update is lr * g / (|g| + eps),
        # i.e. lr * sign(g) for gradients well above eps.
        g = rng.normal(size=(10,)).astype(np.float64)
        g[np.abs(g) < 0.1] = 0.5
        p = Tensor(np.zeros(10), dtype=np.float64, requires_grad=True)
        adam_step([p], [g], AdamState(lr=1e-3))
        np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-4)
        np.testing.assert_array_equal(np.sign(p.data), -np.sign(g))

    def test_bias_correction_first_moment(self):
        # t=1, beta1=0.9: m_hat = m / (1 - 0.9) recovers g exactly.
        g = np.array([0.3, -0.7])
        state = AdamState(lr=1e-3, beta1=0.9)
        p = Tensor(np.zeros(2), dtype=np.float64, requires_grad=True)
        adam_step([p], [g], state)
        np.testing.assert_allclose(state.m[0] / (1 - 0.9), g, rtol=1e-12)
        assert state.t == 1

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(4, dtype=np.float32)], AdamState(lr=0.1))


class TestInvariants:
    def test_nan_raises(self):
        x = Tensor(np.array([1.0, 2.0], dtype=np.float32))
        x.data[0] = np.inf  # simulate a corrupted buffer
        with pytest.raises(NumericError):
            tt.add(x, x)

    def test_nan_constructor_raises(self):
        with pytest.raises(NumericError):
            Tensor(np.array([np.nan]))

    def test_overflow_detected(self):
        x = Tensor(np.array([1e30], dtype=np.float32))
        with pytest.raises(NumericError):
            tt.mul(x, x)

    def test_determinism(self, rng):
        def run():
            r = np.random.default_rng(99)
            x = Tensor(r.normal(size=(2, 8, 8, 8)).astype(np.float32))
            w = Tensor(r.normal(size=(8, 8, 3, 3)).astype(np.float32))
            gamma = Tensor(np.ones(8, dtype=np.float32))
            beta = Tensor(np.zeros(8, dtype=np.float32))
            return tt.silu(tt.group_norm(tt.conv2d(x, w, 1, 1), gamma, beta, 8)).data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()

    def test_no_grad_blocks_taping(self, rng):
        x = Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=True)
        with no_grad():
            y = tt.mul(x, x)
        assert not y.requires_grad
        assert not tt._TAPE.nodes

    def test_dtype_mode(self):
        with using_dtype(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32
