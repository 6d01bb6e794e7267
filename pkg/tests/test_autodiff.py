import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tacseg import autodiff as ad
from tacseg import ftnsr
from tacseg.errors import ContractError, DimensionError
from tacseg.gradcheck import numerical_gradient, relative_error

import oracles


def run(fn, *arrays):
    g = ad.Graph()
    return fn(*(g.constant(a) for a in arrays)).value


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
matrices = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6), elements=finite)


class TestMatmul:
    def test_identity(self):
        B = np.array([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(run(ad.matmul, np.eye(2), B), B)

    def test_zero(self):
        np.testing.assert_array_equal(run(ad.matmul, [[1.0, 2.0]], [[0.0], [0.0]]), [[0.0]])

    def test_against_triple_loop(self):
        A, B = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
        expected = [[19.0, 22.0], [43.0, 50.0]]  # triple-loop oracle, frozen
        assert oracles.matmul(A, B) == expected
        np.testing.assert_array_equal(run(ad.matmul, A, B), expected)

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(3)
        A, B = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(run(ad.matmul, A, B), oracles.matmul(A.tolist(), B.tolist()), rtol=1e-14)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            run(ad.matmul, np.ones((2, 3)), np.ones((2, 3)))

    @given(matrices)
    def test_identity_left_is_exact(self, X):
        np.testing.assert_array_equal(run(ad.matmul, np.eye(X.shape[0]), X), X)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_array_equal(run(ad.softmax_rows, np.zeros((1, 4))), [[0.25] * 4])

    def test_saturation_is_overflow_safe(self):
        out = run(ad.softmax_rows, [[1000.0, 0.0]])
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)
        assert np.all(np.isfinite(out))

    def test_against_scalar_oracle(self):
        expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218]
        np.testing.assert_allclose(oracles.softmax_row([1, 2, 3]), expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(run(ad.softmax_rows, [[1.0, 2.0, 3.0]])[0], expected, rtol=0, atol=1e-15)

    @given(matrices)
    def test_rows_are_distributions(self, X):
        Y = run(ad.softmax_rows, X)
        np.testing.assert_allclose(Y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all((Y > 0) | (X < X.max(axis=1, keepdims=True) - 700))  # only underflow may hit zero
        assert np.all(Y <= 1.0)

    @given(matrices, st.data())
    def test_shift_invariance(self, X, data):
        shift = data.draw(hnp.arrays(np.float64, (X.shape[0], 1), elements=st.floats(-100, 100)))
        np.testing.assert_allclose(run(ad.softmax_rows, X + shift), run(ad.softmax_rows, X), rtol=0, atol=1e-12)


class TestConv2d:
    def test_identity_kernel(self):
        X = np.random.default_rng(0).normal(size=(1, 4, 5))
        np.testing.assert_array_equal(run(lambda x, k: ad.conv2d(x, k), X, np.ones((1, 1, 1, 1))), X)

    def test_zero_kernel(self):
        X = np.random.default_rng(1).normal(size=(2, 4, 4))
        out = run(lambda x, k: ad.conv2d(x, k, pad=1), X, np.zeros((3, 2, 3, 3)))
        np.testing.assert_array_equal(out, np.zeros((3, 4, 4)))

    def test_window_sums(self):
        X = np.arange(1.0, 10.0).reshape(1, 3, 3)
        expected = [[[12.0, 16.0], [24.0, 28.0]]]  # sliding-window oracle, frozen
        assert oracles.conv2d(X.tolist(), np.ones((1, 1, 2, 2)).tolist()) == expected
        np.testing.assert_array_equal(run(lambda x, k: ad.conv2d(x, k), X, np.ones((1, 1, 2, 2))), expected)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_random_against_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        X, K, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 2)), rng.normal(size=3)
        g = ad.Graph()
        out = ad.conv2d(g.constant(X), g.constant(K), stride=stride, pad=pad, bias=g.constant(b)).value
        ref = oracles.conv2d(X.tolist(), K.tolist(), stride, pad, b.tolist())
        np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-13)
        h = (5 + 2 * pad - 3) // stride + 1
        w = (6 + 2 * pad - 2) // stride + 1
        assert out.shape == (3, h, w)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError, match="larger than padded input"):
            run(lambda x, k: ad.conv2d(x, k, pad=0), np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            run(lambda x, k: ad.conv2d(x, k), np.ones((2, 4, 4)), np.ones((1, 3, 1, 1)))

    def test_bad_stride(self):
        with pytest.raises(ContractError):
            run(lambda x, k: ad.conv2d(x, k, stride=0), np.ones((1, 4, 4)), np.ones((1, 1, 1, 1)))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(run(ad.relu, [-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])

    def test_layer_norm_constant_row(self):
        gamma, beta = np.array([2.0, 3.0, 4.0]), np.array([0.5, -1.0, 7.0])
        out = run(ad.layer_norm, np.full((2, 3), 5.0), gamma, beta)
        np.testing.assert_array_equal(out, np.tile(beta, (2, 1)))

    def test_layer_norm_against_oracle(self):
        rng = np.random.default_rng(5)
        X, gm, bt = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
        ref = [oracles.layer_norm_row(r, gm.tolist(), bt.tolist()) for r in X.tolist()]
        np.testing.assert_allclose(run(ad.layer_norm, X, gm, bt), ref, rtol=1e-13, atol=1e-13)

    def test_upsample_nearest(self):
        out = run(ad.upsample_nearest2x, [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_mean_pool(self):
        X = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_array_equal(run(ad.mean_pool2x2, X), [[[2.5, 4.5], [10.5, 12.5]]])

    def test_mean_pool_odd_extent(self):
        with pytest.raises(DimensionError):
            run(ad.mean_pool2x2, np.ones((1, 3, 4)))

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            run(ad.add, np.ones((2, 2)), np.ones((2, 3)))

    def test_reshape_transpose(self):
        X = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(run(ad.transpose2d, X), X.T)
        np.testing.assert_array_equal(run(lambda x: ad.reshape(x, (3, 2)), X), X.reshape(3, 2))
        with pytest.raises(DimensionError):
            run(lambda x: ad.reshape(x, (4, 2)), X)

    def test_mul_scalar_and_concat(self):
        a, b = np.ones((1, 2, 2)), np.zeros((2, 2, 2))
        assert run(lambda x, y: ad.concat([x, y], axis=0), a, b).shape == (3, 2, 2)
        np.testing.assert_array_equal(run(lambda x: ad.mul_scalar(x, -2.0), a), -2 * a)
        with pytest.raises(DimensionError):
            run(lambda x, y: ad.concat([x, y], axis=0), a, np.zeros((1, 3, 2)))


class TestBackward:
    def test_sum_gives_ones(self):
        g = ad.Graph()
        W = g.param("W", np.random.default_rng(0).normal(size=(3, 4)))
        grads = ad.backward(g, ad.sum_all(W))
        np.testing.assert_array_equal(grads["W"], np.ones((3, 4)))

    def test_sum_of_product_closed_form(self):
        rng = np.random.default_rng(1)
        A, B = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        g = ad.Graph()
        loss = ad.sum_all(ad.matmul(g.param("A", A), g.param("B", B)))
        grads = ad.backward(g, loss)
        ones = np.ones((2, 2))
        np.testing.assert_allclose(grads["A"], ones @ B.T, rtol=1e-15)
        np.testing.assert_allclose(grads["B"], A.T @ ones, rtol=1e-15)

    def test_softmax_sum_against_finite_differences(self):
        X = np.random.default_rng(2).uniform(-2, 2, size=(3, 4))
        inputs = {"X": X}

        def loss(g, n):
            return ad.sum_all(ad.mul_scalar(ad.softmax_rows(n["X"]), 1.0))

        g = ad.Graph()
        analytic = ad.backward(g, loss(g, {"X": g.param("X", X)}))["X"]
        fd = numerical_gradient(inputs, loss, "X")
        # sum of each softmax row is identically 1, so both sides are ~0
        np.testing.assert_allclose(analytic, 0.0, atol=1e-15)
        assert relative_error(analytic, fd).max() < 1e-4

    def test_non_scalar_loss_rejected(self):
        g = ad.Graph()
        with pytest.raises(ContractError, match="scalar"):
            ad.backward(g, g.param("W", np.ones(3)))

    def test_unused_parameter_gets_zero(self):
        g = ad.Graph()
        g.param("unused", np.ones((2, 2)))
        grads = ad.backward(g, ad.sum_all(g.param("w", np.ones(3))))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_each_node_visited_once(self):
        calls = []
        g = ad.Graph()
        x = g.param("x", np.array([1.0, 2.0]))

        def counted(node):
            calls.append(node.index)
            return (np.ones(2),)

        y = g.record("probe", x.value * 1.0, (x,), lambda gr: counted(y))
        z = ad.add(y, y)  # diamond: y feeds z twice
        ad.backward(g, ad.sum_all(z))
        assert calls == [y.index]

    def test_tape_is_topological(self):
        g = ad.Graph()
        a = g.param("a", np.ones((2, 2)))
        b = ad.relu(ad.matmul(a, a))
        ad.sum_all(ad.add(b, a))
        for node in g.nodes:
            assert all(p.index < node.index for p in node.parents)

    def test_mixing_graphs_rejected(self):
        g1, g2 = ad.Graph(), ad.Graph()
        with pytest.raises(ContractError):
            ad.add(g1.constant(np.ones(2)), g2.constant(np.ones(2)))

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        A, B = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))

        def go():
            g = ad.Graph()
            loss = ad.sum_all(ad.softmax_rows(ad.matmul(g.param("A", A), g.param("B", B))))
            return ad.backward(g, ad.mul_scalar(loss, 3.0))

        r1, r2 = go(), go()
        for k in r1:
            assert r1[k].tobytes() == r2[k].tobytes()


class TestBce:
    def test_zero_logits(self):
        for y in (np.zeros((1, 2, 2)), np.ones((1, 2, 2))):
            assert run(lambda z: ad.bce_with_logits(z, y), np.zeros((1, 2, 2))) == pytest.approx(np.log(2), abs=1e-15)

    def test_saturated(self):
        y = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        z = np.where(y > 0, 100.0, -100.0)
        assert run(lambda n: ad.bce_with_logits(n, y), z) < 1e-6

    def test_against_scalar_oracle(self):
        z = np.array([[[0.3, -1.2], [2.5, -0.7]]])
        y = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        expected = 1.1249283737461413  # scalar oracle, frozen
        assert oracles.bce(z.ravel().tolist(), y.ravel().tolist()) == pytest.approx(expected, abs=1e-15)
        assert run(lambda n: ad.bce_with_logits(n, y), z) == pytest.approx(expected, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            run(lambda n: ad.bce_with_logits(n, np.zeros((1, 2, 3))), np.zeros((1, 2, 2)))


class TestFtnsr:
    def test_header_layout(self):
        buf = ftnsr.dumps(np.array([[1.0, 2.0, 3.0]]))
        assert buf[:6] == b"FTNSR1"
        assert buf[6:10] == (2).to_bytes(4, "little")
        assert buf[10:18] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(buf[18:], "<f8").tolist() == [1.0, 2.0, 3.0]

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                      elements=st.floats(allow_nan=False)))
    @settings(max_examples=50)
    def test_round_trip_bit_exact(self, arr):
        back = ftnsr.loads(ftnsr.dumps(arr))
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_bad_magic_and_truncation(self):
        with pytest.raises(ftnsr.FormatError):
            ftnsr.loads(b"NOTATENSOR")
        with pytest.raises(ftnsr.FormatError):
            ftnsr.loads(ftnsr.dumps(np.ones(3))[:-1])

    def test_file_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4))
        ftnsr.save(tmp_path / "t.ftnsr", arr)
        np.testing.assert_array_equal(ftnsr.load(tmp_path / "t.ftnsr"), arr)
