import math

import numpy as np
import pytest

from sotasr import autodiff as ad
from sotasr import nn
from sotasr.autodiff import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def make_lstm_params(seed, d_in, hidden):
    return nn.LstmParams(d_in, hidden, rng(seed))


class TestLinear:
    def test_identity_weight(self):
        layer = nn.Linear(3, 3)
        layer.weight.data[:] = np.eye(3)
        x = Tensor(rng(1).normal(size=(4, 3)))
        np.testing.assert_allclose(layer(x).data, x.data)

    def test_zero_weight_constant_bias(self):
        layer = nn.Linear(3, 2)
        layer.bias.data[:] = [5.0, -1.0]
        out = layer(Tensor(rng(2).normal(size=(4, 3))))
        np.testing.assert_allclose(out.data, np.tile([5.0, -1.0], (4, 1)))

    def test_gradient(self):
        layer = nn.Linear(4, 3, rng(3))
        x0 = Tensor(rng(4).normal(size=(2, 4)))

        def fx(x):
            y = layer(x)
            return ad.sum_all(ad.mul(y, y))

        def fw(w):
            saved = layer.weight
            layer.weight = w
            try:
                y = layer(x0)
                return ad.sum_all(ad.mul(y, y))
            finally:
                layer.weight = saved

        assert ad.finite_diff_check(fx, x0) <= 1e-6
        assert ad.finite_diff_check(fw, layer.weight.copy()) <= 1e-6


class TestLstmStep:
    def test_all_zero_params_and_state(self):
        params = make_lstm_params(5, 3, 4)
        for p in params.parameters().values():
            p.data[:] = 0.0
        h, c = nn.lstm_step(params, Tensor(np.zeros(3)), Tensor(np.zeros(4)),
                            Tensor(np.zeros(4)))
        np.testing.assert_array_equal(h.data, np.zeros(4))
        np.testing.assert_array_equal(c.data, np.zeros(4))

    def test_zero_params_nonzero_cell(self):
        params = make_lstm_params(6, 3, 4)
        for p in params.parameters().values():
            p.data[:] = 0.0
        c0 = np.array([1.0, 2.0, -1.0, 0.5])
        h, c = nn.lstm_step(params, Tensor(np.zeros(3)), Tensor(np.zeros(4)),
                            Tensor(c0))
        np.testing.assert_allclose(c.data, 0.5 * c0)
        np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0))

    def test_gradient_wrt_all_inputs(self):
        params = make_lstm_params(7, 3, 4)
        g = rng(8)
        x0 = Tensor(g.normal(size=3))
        h0 = Tensor(g.normal(size=4))
        c0 = Tensor(g.normal(size=4))

        def scalar_of(h, c):
            return ad.add(ad.sum_all(ad.mul(h, h)), ad.sum_all(ad.mul(c, c)))

        def fx(x):
            return scalar_of(*nn.lstm_step(params, x, h0, c0))

        def fwx(wx):
            saved = params.wx
            params.wx = wx
            try:
                return scalar_of(*nn.lstm_step(params, x0, h0, c0))
            finally:
                params.wx = saved

        assert ad.finite_diff_check(fx, x0) <= 1e-5
        assert ad.finite_diff_check(fwx, params.wx.copy()) <= 1e-5


class TestLstmLayer:
    def test_t1_equals_step_from_zero_state(self):
        params = make_lstm_params(9, 3, 5)
        x = Tensor(rng(10).normal(size=(1, 3)))
        fused = nn.lstm_layer(x, params)
        h, _ = nn.lstm_step(params, ad.reshape(x, (3,)), Tensor(np.zeros(5)),
                            Tensor(np.zeros(5)))
        np.testing.assert_allclose(fused.data[0], h.data, atol=1e-12)

    def test_fused_matches_composed_scan(self):
        params = make_lstm_params(11, 3, 4)
        x = Tensor(rng(12).normal(size=(6, 3)))
        fused = nn.lstm_layer(x, params)
        h = Tensor(np.zeros(4))
        c = Tensor(np.zeros(4))
        for t in range(6):
            h, c = nn.lstm_step(params, ad.slice_cols(ad.slice_rows(x, t, t + 1), 0, 3),
                                ad.reshape(h, (1, 4)) if h.data.ndim == 1 else h,
                                ad.reshape(c, (1, 4)) if c.data.ndim == 1 else c)
            np.testing.assert_allclose(fused.data[t], h.data[0], atol=1e-12)

    def test_gradients_vs_finite_differences(self):
        params = make_lstm_params(13, 2, 3)
        x0 = Tensor(rng(14).normal(size=(4, 2)))
        w = Tensor(rng(15).normal(size=(4, 3)))

        def through(x, p):
            return ad.sum_all(ad.mul(nn.lstm_layer(x, p), w))

        def fx(x):
            return through(x, params)

        assert ad.finite_diff_check(fx, x0) <= 1e-5
        for name in ("wx", "wh", "b"):
            def fparam(p, _name=name):
                saved = getattr(params, _name)
                setattr(params, _name, p)
                try:
                    return through(x0, params)
                finally:
                    setattr(params, _name, saved)

            assert ad.finite_diff_check(fparam, getattr(params, name).copy()) <= 1e-5


class TestLstmStack:
    def test_bidirectional_width_is_twice_hidden(self):
        stack = nn.LstmStack(5, 8, layers=2, bidirectional=True, rng=rng(16))
        out = stack(Tensor(rng(17).normal(size=(7, 5))))
        assert out.shape == (7, 16)
        assert stack.out_dim == 16

    def test_unidirectional_causality(self):
        stack = nn.LstmStack(4, 6, layers=2, bidirectional=False, rng=rng(18))
        x = rng(19).normal(size=(8, 4))
        base = stack(Tensor(x)).data.copy()
        perturbed = x.copy()
        perturbed[5:] += rng(20).normal(size=(3, 4))
        out = stack(Tensor(perturbed)).data
        np.testing.assert_array_equal(out[:5], base[:5])
        assert not np.allclose(out[5:], base[5:])

    def test_bidirectional_depends_on_future(self):
        stack = nn.LstmStack(4, 6, layers=1, bidirectional=True, rng=rng(21))
        x = rng(22).normal(size=(8, 4))
        base = stack(Tensor(x)).data.copy()
        perturbed = x.copy()
        perturbed[7] += 1.0
        assert not np.allclose(stack(Tensor(perturbed)).data[0], base[0])

    def test_stack_gradient(self):
        stack = nn.LstmStack(2, 3, layers=2, bidirectional=True, rng=rng(23))
        w = Tensor(rng(24).normal(size=(4, 6)))

        def f(x):
            return ad.sum_all(ad.mul(stack(x), w))

        assert ad.finite_diff_check(f, Tensor(rng(25).normal(size=(4, 2)))) <= 1e-5


class TestAttention:
    def test_single_key(self):
        g = rng(26)
        q = Tensor(g.normal(size=4))
        keys = Tensor(g.normal(size=(1, 4)))
        values = Tensor(g.normal(size=(1, 4)))
        context, weights = nn.attention(q, keys, values)
        np.testing.assert_allclose(weights.data, [1.0])
        np.testing.assert_allclose(context.data, values.data[0])

    def test_identical_keys_uniform_weights(self):
        g = rng(27)
        q = Tensor(g.normal(size=4))
        keys = Tensor(np.tile(g.normal(size=4), (5, 1)))
        values = Tensor(g.normal(size=(5, 4)))
        _, weights = nn.attention(q, keys, values)
        np.testing.assert_allclose(weights.data, np.full(5, 0.2), atol=1e-12)

    def test_weights_sum_to_one_and_gradient(self):
        g = rng(28)
        q0 = Tensor(g.normal(size=4))
        keys = Tensor(g.normal(size=(6, 4)))
        values = Tensor(g.normal(size=(6, 4)))
        _, weights = nn.attention(q0, keys, values)
        assert abs(weights.data.sum() - 1.0) <= 1e-9
        assert np.all(weights.data >= 0.0)

        mixer = Tensor(g.normal(size=4))

        def fq(q):
            context, _ = nn.attention(q, keys, values)
            return ad.sum_all(ad.mul(context, mixer))

        def fk(k):
            context, _ = nn.attention(q0, k, values)
            return ad.sum_all(ad.mul(context, mixer))

        assert ad.finite_diff_check(fq, q0) <= 1e-5
        assert ad.finite_diff_check(fk, keys) <= 1e-5

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            nn.attention(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))),
                         Tensor(np.zeros((2, 4))))


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        before = p.data.copy()
        opt = nn.Adam()
        opt.step({"p": p}, {p: Tensor(np.zeros(2))})
        np.testing.assert_array_equal(p.data, before)

    def test_missing_gradient_treated_as_zero(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        nn.Adam().step({"p": p}, {})
        np.testing.assert_array_equal(p.data, [1.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        g = Tensor(np.array([0.3, -0.7]))
        opt = nn.Adam(lr=1e-3, clip_norm=None)
        opt.step({"p": p}, {p: g})
        np.testing.assert_allclose(p.data, [1.0 - 1e-3, 1.0 + 1e-3], atol=1e-7)

    def test_quadratic_bowl_convergence(self):
        target = np.array([0.3, -1.2, 2.0])
        p = Tensor(np.array([5.0, 5.0, 5.0]), requires_grad=True)
        opt = nn.Adam(lr=5e-2)
        for _ in range(500):
            with ad.Tape() as tape:
                diff = ad.sub(p, Tensor(target))
                loss = ad.sum_all(ad.mul(diff, diff))
                grads = ad.backward(loss, tape)
            opt.step({"p": p}, grads)
            if loss.item() <= 1e-6:
                break
        assert loss.item() <= 1e-6

    def test_nan_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        bad = Tensor(np.array([np.nan]))
        with pytest.raises(FloatingPointError, match="my_param"):
            nn.Adam().step({"my_param": p}, {p: bad})

    def test_global_norm_clipping(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        g = Tensor(np.array([100.0]))
        opt = nn.Adam(lr=1.0, clip_norm=5.0, eps=0.0)
        opt.step({"p": p}, {p: g})
        # after clipping the direction is unchanged; first-step update is -lr*sign
        np.testing.assert_allclose(p.data, [-1.0])

    def test_warmup_scales_lr(self):
        p1 = Tensor(np.array([0.0]), requires_grad=True)
        p2 = Tensor(np.array([0.0]), requires_grad=True)
        g = Tensor(np.array([1.0]))
        nn.Adam(lr=1.0, warmup_steps=0, clip_norm=None).step({"p": p1}, {p1: g})
        nn.Adam(lr=1.0, warmup_steps=4, clip_norm=None).step({"p": p2}, {p2: g})
        np.testing.assert_allclose(p2.data, p1.data * 0.25, atol=1e-12)


class TestComposedGraph:
    def test_lstm_linear_ce_gradient(self):
        # end-to-end check through a recurrent graph and a log-likelihood loss
        params = make_lstm_params(40, 3, 4)
        proj = nn.Linear(4, 5, rng(41))
        targets = np.array([1, 4, 0, 2])
        onehot = np.zeros((4, 5))
        onehot[np.arange(4), targets] = 1.0

        def f(x):
            h = nn.lstm_layer(x, params)
            logp = ad.log_softmax(proj(h))
            return ad.scale(ad.sum_all(ad.mul(logp, Tensor(onehot))), -0.25)

        x0 = Tensor(rng(42).normal(size=(4, 3)))
        assert ad.finite_diff_check(f, x0) <= 1e-4

        def fw(w):
            saved = params.wh
            params.wh = w
            try:
                return f(x0)
            finally:
                params.wh = saved

        assert ad.finite_diff_check(fw, params.wh.copy()) <= 1e-4
