import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from postsparse import tensor as T
from postsparse.tensor import GradTape, ShapeError, TapeError, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensor:
    def test_dtype_and_copy_semantics(self):
        src = np.arange(6, dtype=np.float32).reshape(2, 3)
        t = Tensor(src)
        assert t.data.dtype == np.float64
        assert t.shape == (2, 3) and t.size == 6
        c = t.copy()
        c.data[0, 0] = 99
        assert t.data[0, 0] == 0

    def test_read_only_input_is_copied(self):
        a = np.ones(3)
        a.setflags(write=False)
        t = Tensor(a)
        t.data[0] = 5.0
        assert a[0] == 1.0


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_hand_sum(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loops(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_unit_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 1, 4, 5))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_unit_kernel_sums_channels(self, rng):
        x = rng.normal(size=(1, 3, 2, 2))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 3, 1, 1))))
        np.testing.assert_allclose(out.data[:, 0], x.sum(axis=1), atol=1e-15)

    def test_all_ones_hand_sum(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (1, 3), (3, 2)])
    def test_nested_loop_oracle(self, rng, stride, pad):
        x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, oracles.conv_loops(x, w, b, stride, pad), rtol=0, atol=1e-10)

    def test_output_size(self):
        out = T.conv2d(Tensor(np.zeros((1, 1, 7, 7))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 1, 4, 4)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), padding=1)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestBatchNorm:
    def test_eval_identity(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            Tensor(np.zeros(2)), Tensor(np.ones(2)), eps=0.0)
        np.testing.assert_array_equal(out.data, x)

    def test_constant_channel_normalizes_to_zero(self):
        x = np.full((4, 1, 3, 3), 2.5)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                            Tensor(np.zeros(1)), Tensor(np.ones(1)), training=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_batch_statistics_oracle(self, rng):
        x = rng.normal(loc=3.0, scale=2.0, size=(5, 3, 4, 4))
        rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv,
                            training=True, momentum=0.1, eps=1e-5)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        for c in range(3):
            vals = x[:, c].reshape(-1)
            mu = sum(vals) / m
            var = sum((v - mu) ** 2 for v in vals) / m
            np.testing.assert_allclose(out.data[:, c], (x[:, c] - mu) / np.sqrt(var + 1e-5), atol=1e-10)
            assert rm.data[c] == pytest.approx(0.1 * mu, abs=1e-10)
            assert rv.data[c] == pytest.approx(0.9 + 0.1 * var * m / (m - 1), abs=1e-10)

    def test_eval_does_not_mutate_running_stats(self, rng):
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        T.batchnorm2d(Tensor(rng.normal(size=(2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv)
        assert rm.data.tolist() == [0.0, 0.0] and rv.data.tolist() == [1.0, 1.0]

    def test_empty_training_batch(self):
        with pytest.raises(ShapeError):
            T.batchnorm2d(Tensor(np.zeros((0, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                          Tensor(np.zeros(1)), Tensor(np.ones(1)), training=True)

    def test_param_length_mismatch(self):
        with pytest.raises(ShapeError):
            T.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(2)),
                          Tensor(np.zeros(2)), Tensor(np.ones(2)))


class TestElementwise:
    def test_relu(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_add_zero(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros_like(x))).data, x)

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_avgpool(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(T.avgpool2d(Tensor(x), 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avgpool_must_tile(self):
        with pytest.raises(ShapeError):
            T.avgpool2d(Tensor(np.zeros((1, 1, 5, 5))), 2)

    def test_flatten(self):
        assert T.flatten(Tensor(np.zeros((2, 3, 4)))).shape == (2, 12)

    def test_softmax_xent_value(self):
        logits = np.array([[0.0, 0.0], [2.0, 0.0]])
        loss = T.softmax_xent(Tensor(logits), [0, 1]).item()
        expect = (np.log(2) + (np.log(np.exp(2) + 1) - 0.0)) / 2
        assert loss == pytest.approx(expect, abs=1e-12)

    def test_softmax_xent_gradient(self, rng):
        errs = oracles.grad_errors("softmax_xent", 20, seed=7)
        assert max(errs) < 1e-6

    def test_mse_definition(self):
        pred, target = np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 3.0]])
        assert T.mse(Tensor(pred), target).item() == pytest.approx((1 + 4 + 9) / 2)


class TestTape:
    def test_sum_gradient_is_ones(self, rng):
        w = Tensor(rng.normal(size=(3, 4)))
        with GradTape() as tape:
            tape.watch(w)
            loss = T.tsum(w)
        np.testing.assert_array_equal(tape.backward(loss)[w], np.ones((3, 4)))

    def test_closed_form_least_squares(self, rng):
        w, x, y = rng.normal(size=(3, 4)), rng.normal(size=(4, 1)), rng.normal(size=(3, 1))
        wt = Tensor(w)
        with GradTape() as tape:
            tape.watch(wt)
            r = T.sub(T.matmul(wt, Tensor(x)), Tensor(y))
            loss = T.tsum(T.mul(r, r))
        np.testing.assert_allclose(tape.backward(loss)[wt], 2 * (w @ x - y) @ x.T, rtol=0, atol=1e-10)

    def test_only_watched_tensors_get_gradients(self, rng):
        a, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        with GradTape() as tape:
            tape.watch(a)
            loss = T.tsum(T.mul(a, b))
        grads = tape.backward(loss)
        assert set(grads) == {a}
        np.testing.assert_array_equal(grads[a], b.data)

    def test_unused_watched_tensor_gets_zeros(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones(3))
        with GradTape() as tape:
            tape.watch(a, b)
            loss = T.tsum(a)
        assert tape.backward(loss)[b].tolist() == [0.0, 0.0, 0.0]

    def test_loss_not_on_tape(self):
        a = Tensor(np.ones(2))
        with GradTape() as tape:
            tape.watch(a)
        loss = T.tsum(a)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_loss(self):
        a = Tensor(np.ones(2))
        with GradTape() as tape:
            tape.watch(a)
            out = T.relu(a)
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_gradient_accumulates_over_reuse(self):
        a = Tensor(np.array([1.0, 2.0]))
        with GradTape() as tape:
            tape.watch(a)
            loss = T.tsum(T.mul(a, a))
        np.testing.assert_array_equal(tape.backward(loss)[a], [2.0, 4.0])

    @pytest.mark.parametrize("name", sorted(oracles.GRAD_CASES))
    def test_finite_differences(self, name):
        assert max(oracles.grad_errors(name, 10, seed=99)) < 1e-5


class TestSGD:
    def test_plain_step(self):
        p, g, v = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.zeros(2)
        T.sgd_step(p, g, v, lr=0.1, momentum=0.0, mask=np.array([True, True]))
        np.testing.assert_allclose(p, [0.95, 2.1], atol=1e-15)

    def test_all_false_mask_leaves_param(self):
        p = np.array([1.0, -2.0])
        T.sgd_step(p, np.array([3.0, 4.0]), np.zeros(2), 0.1, 0.9, np.array([False, False]))
        assert p.tolist() == [1.0, -2.0]

    def test_two_step_momentum_unroll(self):
        p0, g1, g2 = np.array([1.0, -1.0]), np.array([0.3, 0.2]), np.array([-0.1, 0.4])
        lr, m = 0.05, 0.9
        p, v = p0.copy(), np.zeros(2)
        T.sgd_step(p, g1, v, lr, m)
        T.sgd_step(p, g2, v, lr, m)
        v1 = g1
        v2 = m * v1 + g2
        np.testing.assert_allclose(p, p0 - lr * v1 - lr * v2, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, 12, elements=st.floats(-5, 5)),
        arrays(np.bool_, 12),
        st.lists(arrays(np.float64, 12, elements=st.floats(-5, 5)), min_size=1, max_size=6),
        st.floats(0.0, 0.99),
    )
    def test_masked_positions_stay_zero(self, p0, mask, grads, momentum):
        p = p0 * mask
        v = np.zeros(12)
        for g in grads:
            T.sgd_step(p, g, v, 0.01, momentum, mask)
        assert np.all(p[~mask] == 0.0)
        assert np.all(v[~mask] == 0.0)


def test_finite_outputs_on_finite_inputs(rng):
    x = rng.normal(size=(2, 3, 5, 5)) * 1e3
    out = T.conv2d(Tensor(x), Tensor(rng.normal(size=(2, 3, 3, 3))), padding=1)
    out = T.batchnorm2d(out, Tensor(np.ones(2)), Tensor(np.zeros(2)), Tensor(np.zeros(2)),
                        Tensor(np.ones(2)), training=True)
    assert np.all(np.isfinite(T.relu(out).data))


def test_determinism(rng):
    x, w = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    runs = []
    for _ in range(2):
        xt, wt = Tensor(x), Tensor(w)
        with GradTape() as tape:
            tape.watch(wt)
            loss = T.tsum(T.relu(T.conv2d(xt, wt, stride=2, padding=1)))
        runs.append(tape.backward(loss)[wt])
    assert np.array_equal(runs[0], runs[1])
