"""Tensor primitives: forward values, finite-difference gradients, optimizer, checkpoints."""

import math

import numpy as np
import pytest
from scipy import signal

from floodfusion import autodiff as ad
from floodfusion.autodiff import Tensor
from floodfusion.autodiff.gradcheck import check_gradients, relative_error, sample_entries
from floodfusion.autodiff.optim import AdamState, adam_step


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rand(rng, *shape):
    return rng.normal(size=shape)


def assert_grads(loss_fn, params, tol=1e-6, h=1e-5):
    res = check_gradients(loss_fn, params, h=h)
    assert res["n_skipped"] == 0 or res["n_checked"] > 0
    assert res["max_rel_error"] < tol, res["max_rel_error"]
    return res


def weighted_sum(out, rng_seed=99):
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * w).sum()


class TestConv:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
        y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_sum_of_ones(self):
        y = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert y.shape == (1, 1, 1, 1) and y.data.item() == 9.0

    def test_dilation_samples_corners_and_centre(self):
        x = np.arange(25.0).reshape(1, 1, 5, 5)
        w = np.zeros((1, 1, 3, 3))
        y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), dilation=2)
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == sum(x[0, 0, r, c] for r in (0, 2, 4) for c in (0, 2, 4))
        w[0, 0, 0, 0] = w[0, 0, 2, 2] = 1.0
        y = ad.conv2d(Tensor(x), Tensor(w), dilation=2)
        assert y.data.item() == x[0, 0, 0, 0] + x[0, 0, 4, 4]

    def test_matches_scipy_correlate(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(1, 2, 6, 7)), rng.normal(size=(3, 2, 3, 3))
        y = ad.conv2d(Tensor(x), Tensor(w), pad=1).data
        for k in range(3):
            ref = sum(signal.correlate2d(np.pad(x[0, c], 1), w[k, c], mode="valid") for c in range(2))
            np.testing.assert_allclose(y[0, k], ref, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 1, 1))))

    @pytest.mark.parametrize("stride,pad,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
    def test_gradients(self, stride, pad, dilation):
        rng = np.random.default_rng(2)
        x, w, b = param(rand(rng, 2, 2, 6, 6)), param(rand(rng, 3, 2, 3, 3)), param(rand(rng, 3))
        assert_grads(lambda: weighted_sum(ad.conv2d(x, w, b, stride, pad, dilation)), [x, w, b])


class TestConvTranspose:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
        y = ad.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(y.data, x)

    def test_scatter(self):
        y = ad.conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 2.5))

    @pytest.mark.parametrize("stride,pad,dilation", [(1, 0, 1), (2, 0, 1), (2, 1, 1), (1, 1, 2)])
    def test_adjoint(self, stride, pad, dilation):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        y = ad.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad, dilation=dilation).data
        v = rng.normal(size=y.shape)
        xt = ad.conv_transpose2d(Tensor(v), Tensor(w), stride=stride, pad=pad, dilation=dilation,
                                 output_padding=(7 + 2 * pad - dilation * 2 - 1) % stride).data
        assert xt.shape == x.shape
        assert abs(np.sum(y * v) - np.sum(x * xt)) < 1e-10 * max(1.0, abs(np.sum(y * v)))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x, w, b = param(rand(rng, 2, 3, 3, 3)), param(rand(rng, 3, 2, 2, 2)), param(rand(rng, 2))
        assert_grads(lambda: weighted_sum(ad.conv_transpose2d(x, w, b, stride=2)), [x, w, b])


class TestPooling:
    def test_values_and_index(self):
        y, idx = ad.max_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
        assert y.data.item() == 4.0 and idx.ravel()[0] == 3

    def test_tie_takes_first(self):
        _, idx = ad.max_pool2d(Tensor(np.full((1, 1, 2, 2), 7.0)), 2)
        assert idx.ravel()[0] == 0

    def test_backward_routes_to_argmax(self):
        x = param(np.array([[[[1.0, 5.0], [3.0, 4.0]]]]))
        y, _ = ad.max_pool2d(x, 2)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])

    def test_unpool_inverts_pool(self):
        rng = np.random.default_rng(5)
        x = rng.permutation(64).reshape(1, 1, 8, 8).astype(float)
        y, idx = ad.max_pool2d(Tensor(x), 2)
        u = ad.max_unpool2d(y, idx, (8, 8)).data
        keep = u != 0
        np.testing.assert_array_equal(u[keep], x[keep])
        assert keep.sum() == 16 and u.max() == x.max()

    def test_unpool_zero_and_single(self):
        idx = np.array([[[[3]]]])
        out = ad.max_unpool2d(Tensor(np.zeros((1, 1, 1, 1))), idx, (2, 2)).data
        assert np.all(out == 0)
        out = ad.max_unpool2d(Tensor(np.full((1, 1, 1, 1), 2.0)), idx, (2, 2)).data
        assert out[0, 0, 1, 1] == 2.0 and out.sum() == 2.0

    def test_unpool_out_of_range(self):
        with pytest.raises((IndexError, ValueError)):
            ad.max_unpool2d(Tensor(np.ones((1, 1, 1, 1))), np.array([[[[9]]]]), (2, 2))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = param(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) / 10.0)
        assert_grads(lambda: weighted_sum(ad.max_pool2d(x, 2)[0]), [x])

        y, idx = ad.max_pool2d(Tensor(x.data), 2)
        v = param(rand(rng, *y.shape))
        assert_grads(lambda: weighted_sum(ad.max_unpool2d(v, idx, (6, 6))), [v])


class TestBatchNorm:
    def stats(self, c):
        return np.zeros(c), np.ones(c)

    def test_identity_on_standard_batch(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(64, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y = ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), *self.stats(2), True)
        np.testing.assert_allclose(y.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)

    def test_constant_batch_gives_beta(self):
        beta = np.array([0.3, -1.2])
        y = ad.batch_norm(Tensor(np.full((3, 2, 2, 2), 4.0)), Tensor(np.ones(2)), Tensor(beta),
                          *self.stats(2), True)
        np.testing.assert_allclose(y.data, np.broadcast_to(beta[None, :, None, None], y.shape), atol=1e-12)

    def test_train_statistics(self):
        rng = np.random.default_rng(8)
        x = rng.normal(3.0, 2.0, size=(5, 3, 4, 4))
        y = ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), *self.stats(3), True).data
        assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)

    def test_running_stats_and_eval(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 2, 3, 3))
        rm, rv = self.stats(2)
        ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)
        y = ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False).data
        ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(y, ref, rtol=1e-12)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        rng = np.random.default_rng(10)
        x, g, b = param(rand(rng, 4, 2, 3, 3)), param(1 + 0.1 * rand(rng, 2)), param(rand(rng, 2))
        rm, rv = rng.normal(size=2), 1 + rng.random(2)

        def loss():
            return weighted_sum(ad.batch_norm(x, g, b, rm.copy(), rv.copy(), training))

        assert_grads(loss, [x, g, b])


class TestActivations:
    def test_values(self):
        assert list(ad.relu(Tensor([-1.0, 2.0])).data) == [0.0, 2.0]
        assert ad.leaky_relu(Tensor([-1.0])).data[0] == -0.01
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert ad.tanh(Tensor([0.0])).data[0] == 0.0

    def test_relu_subgradient_at_zero(self):
        x = param([0.0, 1.0])
        ad.relu(x).sum().backward()
        assert list(x.grad) == [0.0, 1.0]

    def test_sigmoid_extremes_are_finite(self):
        y = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert y[0] == 0.0 and y[1] == 1.0

    @pytest.mark.parametrize("fn", [ad.relu, ad.leaky_relu, ad.sigmoid, ad.tanh, ad.exp])
    def test_gradients(self, fn):
        rng = np.random.default_rng(11)
        x = param(rng.uniform(-2, 2, size=(3, 4)) + 0.05)
        assert_grads(lambda: weighted_sum(fn(x)), [x])


class TestAuxOps:
    def test_concat(self):
        a, b = np.ones((2, 1, 3, 3)), np.zeros((2, 2, 3, 3))
        c = ad.concat_channels([Tensor(a), Tensor(b)]).data
        assert c.shape == (2, 3, 3, 3)
        np.testing.assert_array_equal(c[:, :1], a)
        np.testing.assert_array_equal(c[:, 1:], b)

    def test_global_avg_pool_of_constant(self):
        x = np.full((2, 3, 4, 4), 1.7)
        np.testing.assert_allclose(ad.global_avg_pool(Tensor(x)).data, 1.7, rtol=1e-15)

    def test_dropout(self):
        x = Tensor(np.random.default_rng(0).normal(size=(50, 50)))
        assert ad.dropout(x, 0.0, True, np.random.default_rng(1)) is x
        assert ad.dropout(x, 0.5, False, None) is x
        y = ad.dropout(x, 0.25, True, np.random.default_rng(1)).data
        kept = y != 0
        np.testing.assert_array_equal(y[kept], x.data[kept] / 0.75)
        assert 0.65 < kept.mean() < 0.85

    def test_linear_shape_error(self):
        with pytest.raises(ad.ShapeError):
            ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(12)
        a, b = param(rand(rng, 2, 2, 3, 3)), param(rand(rng, 2, 1, 3, 3))
        assert_grads(lambda: weighted_sum(ad.concat_channels([a, b])), [a, b])
        assert_grads(lambda: weighted_sum(ad.global_avg_pool(a)), [a])
        x, w, bias = param(rand(rng, 3, 4)), param(rand(rng, 5, 4)), param(rand(rng, 5))
        assert_grads(lambda: weighted_sum(ad.linear(x, w, bias)), [x, w, bias])
        assert_grads(lambda: weighted_sum(ad.reshape(x, (2, 6)) @ param(np.ones((6, 2)))), [x])
        assert_grads(lambda: weighted_sum(ad.dropout(x, 0.3, True, np.random.default_rng(3))), [x])


class TestRecurrentCells:
    def test_lstm_zero_weights(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        z = np.zeros((2, 4))
        h, c = ad.lstm_cell(Tensor(x), Tensor(z), Tensor(z), Tensor(np.zeros((16, 3))),
                            Tensor(np.zeros((16, 4))), Tensor(np.zeros(16)))
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_lstm_matches_reference_equations(self):
        rng = np.random.default_rng(1)
        x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        wi, wh, b = rng.normal(size=(16, 3)), rng.normal(size=(16, 4)), rng.normal(size=16)
        h, c = ad.lstm_cell(Tensor(x), Tensor(h0), Tensor(c0), Tensor(wi), Tensor(wh), Tensor(b))
        a = x @ wi.T + h0 @ wh.T + b
        sig = lambda v: 1 / (1 + np.exp(-v))
        i, f, g, o = sig(a[:, :4]), sig(a[:, 4:8]), np.tanh(a[:, 8:12]), sig(a[:, 12:])
        c_ref = f * c0 + i * g
        np.testing.assert_allclose(c.data, c_ref, rtol=1e-12)
        np.testing.assert_allclose(h.data, o * np.tanh(c_ref), rtol=1e-12)

    def test_gru_matches_reference_equations(self):
        rng = np.random.default_rng(2)
        x, h0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        wi, wh, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 4)), rng.normal(size=12)
        h = ad.gru_cell(Tensor(x), Tensor(h0), Tensor(wi), Tensor(wh), Tensor(b)).data
        sig = lambda v: 1 / (1 + np.exp(-v))
        xp, hp = x @ wi.T + b, h0 @ wh.T
        z, r = sig(xp[:, :4] + hp[:, :4]), sig(xp[:, 4:8] + hp[:, 4:8])
        n = np.tanh(xp[:, 8:] + r * hp[:, 8:])
        np.testing.assert_allclose(h, (1 - z) * h0 + z * n, rtol=1e-12)

    def test_gru_closed_update_gate_carries_state(self):
        rng = np.random.default_rng(3)
        h0 = rng.normal(size=(2, 4))
        b = np.zeros(12)
        b[:4] = -50.0
        h = ad.gru_cell(Tensor(rng.normal(size=(2, 3))), Tensor(h0), Tensor(rng.normal(size=(12, 3))),
                        Tensor(rng.normal(size=(12, 4))), Tensor(b)).data
        np.testing.assert_allclose(h, h0, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.gru_cell(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4))), Tensor(np.ones((12, 2))),
                        Tensor(np.ones((12, 4))), Tensor(np.ones(12)))

    def test_lstm_gradients(self):
        rng = np.random.default_rng(4)
        ps = [param(rand(rng, 2, 3)), param(rand(rng, 2, 4)), param(rand(rng, 2, 4)),
              param(0.5 * rand(rng, 16, 3)), param(0.5 * rand(rng, 16, 4)), param(rand(rng, 16))]

        def loss():
            h, c = ad.lstm_cell(*ps)
            return weighted_sum(h) + weighted_sum(c, 5)

        assert_grads(loss, ps)

    def test_gru_gradients(self):
        rng = np.random.default_rng(5)
        ps = [param(rand(rng, 2, 3)), param(rand(rng, 2, 4)), param(0.5 * rand(rng, 12, 3)),
              param(0.5 * rand(rng, 12, 4)), param(rand(rng, 12))]
        assert_grads(lambda: weighted_sum(ad.gru_cell(*ps)), ps)


class TestMaskedMse:
    def test_values(self):
        assert ad.masked_mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
        assert ad.masked_mse(Tensor([1.0, 5.0]), [0.0, 0.0], [True, False]).item() == 1.0

    def test_empty_mask(self):
        with pytest.raises(ad.EmptyMaskError):
            ad.masked_mse(Tensor([1.0]), [0.0], [False])

    def test_masked_elements_do_not_matter(self):
        rng = np.random.default_rng(6)
        t = rng.normal(size=(3, 4))
        mask = rng.random((3, 4)) < 0.6
        p1 = rng.normal(size=(3, 4))
        p2 = np.where(mask, p1, p1 + 100.0)
        a, b = param(p1), param(p2)
        la, lb = ad.masked_mse(a, t, mask), ad.masked_mse(b, t, mask)
        la.backward()
        lb.backward()
        assert la.item() == lb.item()
        np.testing.assert_array_equal(a.grad, b.grad)
        assert np.all(a.grad[~mask] == 0)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        p = param(rand(rng, 3, 4))
        t, m = rand(rng, 3, 4), rng.random((3, 4)) < 0.5
        m[0, 0] = True
        assert_grads(lambda: ad.masked_mse(p, t, m), [p])


class TestBackward:
    def test_sum(self):
        x = param(np.arange(6.0).reshape(2, 3))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_and_fan_out(self):
        x = param([1.0, -2.0, 3.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data)
        x.grad = None
        (x + x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(8)
        a, b = param(rand(rng, 3, 4)), param(rand(rng, 4))
        assert_grads(lambda: weighted_sum(ad.sub(ad.mul(a, b), b)), [a, b])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(42)
            w = param(rand(rng, 3, 2, 3, 3))
            x = rand(rng, 2, 2, 5, 5)
            opt = ad.Adam([w])
            for _ in range(3):
                opt.zero_grad()
                loss = ad.masked_mse(ad.relu(ad.conv2d(Tensor(x), w, pad=1)), np.zeros((2, 3, 5, 5)))
                loss.backward()
                opt.step()
            return w.data.copy(), w.grad.copy()

        (a, ga), (b, gb) = run(), run()
        assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


class TestAdam:
    def test_zero_gradient(self):
        p = np.array([1.0, 2.0])
        adam_step([p], [np.zeros(2)], AdamState())
        np.testing.assert_array_equal(p, [1.0, 2.0])

    def test_first_step(self):
        p = np.array([0.0])
        adam_step([p], [np.array([1.0])], AdamState(lr=0.01))
        assert p[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)

    def test_per_array_clip(self):
        g = np.array([6.0, 8.0])
        (c,) = ad.clip_gradients([g], 1.0)
        np.testing.assert_allclose(c, g * 0.1, rtol=1e-15)
        small = np.array([0.3, 0.4])
        assert ad.clip_gradients([small], 1.0)[0] is small

    def test_global_clip(self):
        a, b = np.array([3.0]), np.array([4.0])
        ca, cb = ad.clip_gradients([a, b], 1.0, "global")
        assert (ca[0], cb[0]) == pytest.approx((0.6, 0.8), rel=1e-15)

    def test_clip_changes_update(self):
        # clipped gradient 10 -> 1; first Adam step is lr * sign regardless, the second shows it
        p1, p2 = np.array([0.0]), np.array([0.0])
        s1, s2 = AdamState(clip_norm=1.0), AdamState(clip_norm=None)
        for g in (10.0, 0.5):
            adam_step([p1], [np.array([g])], s1)
            adam_step([p2], [np.array([min(g, 1.0)])], s2)
        assert p1[0] == p2[0]

    def test_optimizer_decreases_loss(self):
        w = param([5.0, -3.0])
        opt = ad.Adam([w], lr=0.1)
        first = None
        for _ in range(100):
            opt.zero_grad()
            loss = (w * w).sum()
            first = first if first is not None else loss.item()
            loss.backward()
            opt.step()
        assert loss.item() < 0.01 * first


class TestGradcheck:
    def test_detects_wrong_gradient(self):
        x = param([0.7, -1.3])

        def bad():
            y = ad.mul(x, x)
            return ad.tensor.make_op(y.data.sum(), (x,), lambda g: (g * x.data,))

        res = check_gradients(bad, [x])
        assert res["max_rel_error"] > 0.1

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-9, 0.0) <= 1e-3

    def test_sample_entries(self):
        ps = [param(np.zeros((3, 4))), param(np.zeros(5))]
        e = sample_entries(ps, 10, np.random.default_rng(0))
        assert len(e) == 10 and len(set(e)) == 10
        assert all(0 <= j < ps[i].size for i, j in e)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.normal(size=(2, 3)), "b": np.array(1.5), "c": rng.normal(size=4)}
        ad.save_checkpoint(tmp_path / "x.ckpt", arrays, {"k": [1, 2]})
        got, meta = ad.load_checkpoint(tmp_path / "x.ckpt")
        assert meta == {"k": [1, 2]} and list(got) == ["a", "b", "c"]
        for k in arrays:
            assert got[k].shape == np.shape(arrays[k])
            assert got[k].tobytes() == np.asarray(arrays[k]).tobytes()

    def test_corrupt(self, tmp_path):
        p = tmp_path / "x.ckpt"
        ad.save_checkpoint(p, {"a": np.ones(3)})
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ad.CheckpointError, match="truncated"):
            ad.load_checkpoint(p)
        p.write_bytes(b"garbage\n")
        with pytest.raises(ad.CheckpointError):
            ad.load_checkpoint(p)
