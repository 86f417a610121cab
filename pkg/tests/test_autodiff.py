import math

import numpy as np
import pytest

from sotasr import autodiff as ad


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        b = ad.Tensor(rng(1).normal(size=(3, 4)))
        out = ad.matmul(ad.Tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_hand_sum(self):
        a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = ad.Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_backward_vs_finite_differences(self):
        g = rng(2)
        b_fixed = ad.Tensor(g.normal(size=(5, 3)))

        def f(a):
            return ad.sum_all(ad.mul(ad.matmul(a, b_fixed), ad.matmul(a, b_fixed)))

        a0 = ad.Tensor(g.normal(size=(4, 5)))
        assert ad.finite_diff_check(f, a0) <= 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


class TestLogSoftmax:
    def test_uniform_logits(self):
        out = ad.log_softmax(ad.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, -math.log(4.0) * np.ones(4), rtol=0, atol=1e-12)

    def test_extreme_logits_no_overflow(self):
        out = ad.log_softmax(ad.Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, -1000.0], atol=1e-12)

    def test_rows_exp_sum_to_one(self):
        x = ad.Tensor(rng(3).normal(scale=4.0, size=(3, 5)))
        out = ad.log_softmax(x)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), np.ones(3), rtol=0, atol=1e-9)

    def test_gradient(self):
        x0 = ad.Tensor(rng(4).normal(size=(2, 5)))
        w = ad.Tensor(rng(5).normal(size=(2, 5)))

        def f(x):
            return ad.sum_all(ad.mul(ad.log_softmax(x), w))

        assert ad.finite_diff_check(f, x0) <= 1e-6


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        x = ad.Tensor(np.full((2, 4), 3.7))
        out = ad.layer_norm(x, ad.ones((4,)), ad.zeros((4,)), eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-12)

    def test_already_normalized_row(self):
        x = ad.Tensor([[1.0, -1.0]])
        out = ad.layer_norm(x, ad.ones((2,)), ad.zeros((2,)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_gradient_all_arguments(self):
        g = rng(6)
        x0 = ad.Tensor(g.normal(size=(2, 4)))
        gain0 = ad.Tensor(g.normal(size=4))
        bias0 = ad.Tensor(g.normal(size=4))
        w = ad.Tensor(g.normal(size=(2, 4)))

        def fx(x):
            return ad.sum_all(ad.mul(ad.layer_norm(x, gain0, bias0, 1e-5), w))

        def fgain(gn):
            return ad.sum_all(ad.mul(ad.layer_norm(x0, gn, bias0, 1e-5), w))

        def fbias(b):
            return ad.sum_all(ad.mul(ad.layer_norm(x0, gain0, b, 1e-5), w))

        assert ad.finite_diff_check(fx, x0) <= 1e-5
        assert ad.finite_diff_check(fgain, gain0) <= 1e-5
        assert ad.finite_diff_check(fbias, bias0) <= 1e-6

    def test_eps_must_be_positive(self):
        with pytest.raises(ad.ShapeError):
            ad.layer_norm(ad.Tensor(np.zeros((1, 2))), ad.ones((2,)), ad.zeros((2,)), eps=0.0)


class TestConcatTime:
    def test_single_stream_identity(self):
        x = ad.Tensor(rng(7).normal(size=(4, 3)))
        np.testing.assert_array_equal(ad.concat_time([x]).data, x.data)

    def test_two_streams_row_order(self):
        g = rng(8)
        a, b = ad.Tensor(g.normal(size=(5, 8))), ad.Tensor(g.normal(size=(5, 8)))
        out = ad.concat_time([a, b])
        assert out.shape == (10, 8)
        np.testing.assert_array_equal(out.data[:5], a.data)
        np.testing.assert_array_equal(out.data[5:], b.data)

    def test_backward_routes_ones(self):
        streams = [ad.Tensor(rng(9 + i).normal(size=(4, 2)), requires_grad=True)
                   for i in range(3)]
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.concat_time(streams))
            grads = ad.backward(loss, tape)
        for s in streams:
            np.testing.assert_array_equal(grads[s].data, np.ones((4, 2)))

    def test_slicing_recovers_inputs_exactly(self):
        g = rng(12)
        streams = [ad.Tensor(g.normal(size=(n, 3))) for n in (2, 5, 1)]
        out = ad.concat_time(streams)
        start = 0
        for s in streams:
            n = s.shape[0]
            np.testing.assert_array_equal(
                ad.slice_rows(out, start, start + n).data, s.data)
            start += n

    def test_feature_dim_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.concat_time([ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 4)))])


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Tensor(rng(13).normal(size=(3, 5)), requires_grad=True)
        with ad.Tape() as tape:
            grads = ad.backward(ad.sum_all(x), tape)
        np.testing.assert_array_equal(grads[x].data, np.ones((3, 5)))

    def test_elementwise_square(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with ad.Tape() as tape:
            grads = ad.backward(ad.sum_all(ad.mul(x, x)), tape)
        np.testing.assert_allclose(grads[x].data, [2.0, 4.0, 6.0])

    def test_diamond_graph_accumulates(self):
        # x feeds two paths; gradient must sum over both.
        x = ad.Tensor([2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
            grads = ad.backward(ad.sum_all(y), tape)
        np.testing.assert_allclose(grads[x].data, [7.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ad.ShapeError):
                ad.backward(y, tape)

    def test_loss_off_tape_rejected(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.sum_all(x), ad.Tape())

    def test_gradients_indexed_by_node_on_tape(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.mul(x, x))
            ad.backward(loss, tape)
        assert x.node in tape.gradients
        np.testing.assert_allclose(tape.gradients[x.node].data, [2.0, 4.0])


class TestFiniteDiffCheck:
    def test_square_at_three(self):
        def f(x):
            return ad.sum_all(ad.mul(x, x))

        assert ad.finite_diff_check(f, ad.Tensor([3.0])) <= 1e-8

    def test_log_softmax_pick_index(self):
        def f(x):
            y = ad.log_softmax(x)
            return ad.sum_all(ad.mul(y, ad.constant([0.0, 0.0, 1.0, 0.0])))

        assert ad.finite_diff_check(f, ad.Tensor([0.3, -1.2, 0.7, 2.0])) <= 1e-6


class TestStructuralOps:
    def test_reshape_round_trip_gradient(self):
        x0 = ad.Tensor(rng(20).normal(size=(2, 6)))
        w = ad.Tensor(rng(21).normal(size=(3, 4)))

        def f(x):
            return ad.sum_all(ad.mul(ad.reshape(x, (3, 4)), w))

        assert ad.finite_diff_check(f, x0) <= 1e-6

    def test_slice_rows_gradient(self):
        x0 = ad.Tensor(rng(22).normal(size=(5, 3)))

        def f(x):
            y = ad.slice_rows(x, 1, 4)
            return ad.sum_all(ad.mul(y, y))

        assert ad.finite_diff_check(f, x0) <= 1e-6

    def test_slice_cols_gradient(self):
        x0 = ad.Tensor(rng(23).normal(size=(3, 8)))

        def f(x):
            y = ad.slice_cols(x, 2, 6)
            return ad.sum_all(ad.mul(y, y))

        assert ad.finite_diff_check(f, x0) <= 1e-6

    def test_gather_rows_repeated_index_gradient(self):
        x0 = ad.Tensor(rng(24).normal(size=(4, 3)))
        idx = [0, 2, 2, 1]
        w = ad.Tensor(rng(25).normal(size=(4, 3)))

        def f(x):
            return ad.sum_all(ad.mul(ad.gather_rows(x, idx), w))

        assert ad.finite_diff_check(f, x0) <= 1e-6

    def test_concat_cols_gradient(self):
        g = rng(26)
        b_fixed = ad.Tensor(g.normal(size=(3, 2)))

        def f(a):
            y = ad.concat_cols([a, b_fixed])
            return ad.sum_all(ad.mul(y, y))

        assert ad.finite_diff_check(f, ad.Tensor(g.normal(size=(3, 4)))) <= 1e-6

    def test_add_bias_gradient(self):
        g = rng(27)
        x0 = ad.Tensor(g.normal(size=(4, 3)))
        b0 = ad.Tensor(g.normal(size=3))

        def fx(x):
            y = ad.add_bias(x, b0)
            return ad.sum_all(ad.mul(y, y))

        def fb(b):
            y = ad.add_bias(x0, b)
            return ad.sum_all(ad.mul(y, y))

        assert ad.finite_diff_check(fx, x0) <= 1e-6
        assert ad.finite_diff_check(fb, b0) <= 1e-6


class TestElementwiseGradients:
    @pytest.mark.parametrize("op", [ad.relu, ad.sigmoid, ad.tanh])
    def test_unary(self, op):
        x0 = ad.Tensor(rng(30).normal(size=(3, 4)) + 0.05)

        def f(x):
            y = op(x)
            return ad.sum_all(ad.mul(y, y))

        assert ad.finite_diff_check(f, x0) <= 1e-5

    def test_softmax_weights_sum_to_one(self):
        x = ad.Tensor(rng(31).normal(scale=3.0, size=(2, 6)))
        y = ad.softmax(x)
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(2), atol=1e-9)

    def test_softmax_gradient(self):
        w = ad.Tensor(rng(32).normal(size=6))

        def f(x):
            return ad.sum_all(ad.mul(ad.softmax(x), w))

        assert ad.finite_diff_check(f, ad.Tensor(rng(33).normal(size=6))) <= 1e-6


class TestDeterminismAndChecks:
    def test_identical_seeds_bitwise_identical(self):
        def run():
            g = np.random.default_rng(99)
            x = ad.Tensor(g.normal(size=(4, 4)), requires_grad=True)
            w = ad.Tensor(g.normal(size=(4, 4)), requires_grad=True)
            with ad.Tape() as tape:
                y = ad.log_softmax(ad.matmul(x, w))
                loss = ad.sum_all(ad.mul(y, y))
                grads = ad.backward(loss, tape)
            return loss.item(), grads[x].data.copy(), grads[w].data.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_debug_checks_flag_catches_nonfinite(self):
        ad.set_debug_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                ad.scale(ad.Tensor([1e308]), 1e308)
        finally:
            ad.set_debug_checks(False)

    def test_no_input_mutation(self):
        x = ad.Tensor([1.0, -2.0, 3.0])
        before = x.data.copy()
        ad.relu(x)
        ad.scale(x, 2.0)
        np.testing.assert_array_equal(x.data, before)

    def test_nested_tapes_rejected(self):
        with ad.Tape():
            with pytest.raises(RuntimeError):
                with ad.Tape():
                    pass
