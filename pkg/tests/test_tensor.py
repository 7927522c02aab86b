import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from texguard import tensor as T
from texguard.gradcheck import numeric_grad, rel_error

finite = st.floats(-5, 5, allow_nan=False, width=64)


def conv_oracle(x, w, b, stride, pad):
    N, C, H, W = x.shape
    O, _, K, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - K) // stride + 1, (W + 2 * pad - K) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(K):
                            for v in range(K):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def bilinear_oracle(img, out_h, out_w):
    H, W = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * H / out_h - 0.5, 0.0), H - 1)
            sx = min(max((j + 0.5) * W / out_w - 0.5, 0.0), W - 1)
            y0, x0 = int(sy), int(sx)
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            ty, tx = sy - y0, sx - x0
            out[i, j] = ((1 - ty) * (1 - tx) * img[y0, x0] + (1 - ty) * tx * img[y0, x1]
                         + ty * (1 - tx) * img[y1, x0] + ty * tx * img[y1, x1])
    return out


def run(op, *arrays_, **kw):
    tape = T.Tape()
    return op(*[tape.leaf(a) for a in arrays_], **kw).value


class TestConv:
    def test_identity_kernel(self):
        x = np.array([[[[1.0, 2], [3, 4]]]])
        out = run(T.conv2d, x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_window_sum(self):
        out = run(T.conv2d, np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_oracle(self, rng, f64, stride, pad):
        x = rng.normal(size=(1, 2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = run(T.conv2d, x, w, b, stride=stride, padding=pad)
        np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, pad), atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            run(T.conv2d, np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


class TestBatchNorm:
    def test_constant_channel_gives_zero(self):
        out = run(T.batch_norm, np.full((2, 1, 3, 3), 4.0), np.ones(1), np.zeros(1))
        np.testing.assert_allclose(out, 0.0, atol=1e-6)

    def test_zero_gamma_gives_beta(self, rng):
        out = run(T.batch_norm, rng.normal(size=(2, 3, 4, 4)), np.zeros(3), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(out, np.broadcast_to(np.array([1.0, -2.0, 0.5])[None, :, None, None], out.shape))

    def test_normalises(self, rng, f64):
        x = rng.normal(3.0, 2.0, size=(2, 3, 4, 4))
        out = run(T.batch_norm, x, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_bad_eps(self, rng):
        with pytest.raises(ValueError):
            run(T.batch_norm, rng.normal(size=(2, 3, 4, 4)), np.ones(3), np.zeros(3), eps=0.0)


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(run(T.relu, np.array([-1.0, 0, 2])), [0, 0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(run(T.softmax, np.zeros(2)), [0.5, 0.5])

    def test_bilinear_example(self, f64):
        img = np.array([[0.0, 1], [1, 2]])
        out = run(T.bilinear_resize, img, out_h=4, out_w=4)
        np.testing.assert_allclose(out, bilinear_oracle(img, 4, 4), atol=1e-6)

    @pytest.mark.parametrize("shape,out", [((5, 3), (8, 7)), ((8, 8), (4, 4)), ((3, 6), (3, 6))])
    def test_bilinear_oracle(self, rng, f64, shape, out):
        img = rng.uniform(size=shape)
        np.testing.assert_allclose(run(T.bilinear_resize, img, out_h=out[0], out_w=out[1]),
                                   bilinear_oracle(img, *out), atol=1e-6)

    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
    def test_softmax_rows_sum_to_one(self, x):
        np.testing.assert_allclose(run(T.softmax, x).sum(axis=-1), 1.0, atol=1e-6)

    @given(arrays(np.float64, (5,), elements=finite))
    def test_relu_nonnegative(self, x):
        assert (run(T.relu, x) >= 0).all()


class TestAutodiff:
    def test_square(self):
        tape = T.Tape()
        x = tape.leaf(3.0)
        g = tape.backward(x * x)
        assert g[x.id] == pytest.approx(6.0)

    def test_add(self):
        tape = T.Tape()
        x, y = tape.leaf(1.0), tape.leaf(2.0)
        g = tape.backward(x + y)
        assert g[x.id] == 1 and g[y.id] == 1

    def test_stop_gradient_blocks(self):
        tape = T.Tape()
        x = tape.leaf(2.0)
        y = x * T.stop_gradient(x)
        assert y.value == 4.0
        assert tape.backward(y)[x.id] == pytest.approx(2.0)

    def test_non_scalar_loss(self):
        tape = T.Tape()
        with pytest.raises(T.ShapeError):
            tape.backward(tape.leaf(np.ones(3)))

    def test_nan_rejected(self):
        tape = T.Tape()
        with pytest.raises(T.NumericError):
            T.log(tape.leaf(-1.0))

    def test_three_layer_network(self, rng, f64):
        x = rng.normal(size=(4, 5))
        ws = [rng.normal(size=(6, 5)), rng.normal(size=(6, 6)), rng.normal(size=(1, 6))]

        def net(vals):
            tape = T.Tape()
            leaves = [tape.leaf(v) for v in vals]
            h = T.tanh(T.linear(tape.const(x), leaves[0]))
            h = T.sigmoid(T.linear(h, leaves[1]))
            return T.sum_(T.linear(h, leaves[2])), tape, leaves

        out, tape, leaves = net(ws)
        grads = tape.backward(out)
        for i, leaf in enumerate(leaves):
            num = numeric_grad(lambda vs: float(net(vs)[0].value), ws, i, h=1e-5)
            assert rel_error(grads[leaf.id].reshape(-1), num) <= 1e-5

    def test_tape_is_topological(self, rng):
        tape = T.Tape()
        a = tape.leaf(rng.normal(size=(3, 3)))
        T.sum_(T.relu(a @ a) * a)
        for node in tape.nodes:
            assert all(p < node.id for p in node.parents)

    def test_materialized_grad_shapes(self, rng):
        tape = T.Tape()
        a = tape.leaf(rng.normal(size=(2, 3)))
        b = tape.leaf(rng.normal(size=(3,)))
        loss = T.mean(T.square(a * b))
        tape.materialize(tape.backward(loss))
        for node in tape.nodes:
            if node.grad is not None:
                assert node.grad.shape == node.value.shape

    def test_replay_is_bit_identical(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))

        def once():
            tape = T.Tape()
            xv, wv = tape.leaf(x), tape.leaf(w)
            loss = T.sum_(T.relu(T.conv2d(xv, wv, padding=1)))
            g = tape.backward(loss)
            return loss.value.tobytes(), g[wv.id].tobytes(), g[xv.id].tobytes()

        assert once() == once()

    def test_precision_switch(self):
        assert T.get_dtype() == np.float32
        with T.high_precision():
            assert T.Tape().leaf(1.0).value.dtype == np.float64
        assert T.get_dtype() == np.float32
