"""Engine tests: flat layout, initialization, forward oracles and exact
reverse-mode gradients for every layer type."""

import numpy as np
import pytest

import mpo
from mpo.nn import BN_EPS, BNState, loss_and_grad_many, unpack_params, pack_params

from conftest import assert_grad_close, fd_gradient, random_batch


def small_conv_spec():
    return mpo.ModelSpec((mpo.Conv2D(1, 2, 3, padding=1), mpo.ReLU(),
                          mpo.Flatten(), mpo.Dense(2 * 16, 3)), (1, 4, 4), 3)


class TestParamCount:
    def test_dense_with_bias(self):
        spec = mpo.ModelSpec((mpo.Flatten(), mpo.Dense(4, 3)), (1, 2, 2), 3)
        assert mpo.param_count(spec) == 4 * 3 + 3 == 15

    def test_conv_with_bias(self):
        spec = mpo.ModelSpec((mpo.Conv2D(3, 8, 3, padding=1), mpo.ReLU(),
                              mpo.AdaptiveAvgPool(1, 1), mpo.Flatten(),
                              mpo.Dense(8, 2)), (3, 8, 8), 2)
        conv_params = 8 * 3 * 3 * 3 + 8
        assert conv_params == 224
        assert mpo.param_count(spec) == conv_params + 8 * 2 + 2

    def test_reference_conv_net_by_shape_arithmetic(self):
        # independent hand calculation, layer by layer
        spec = mpo.conv_classifier((1, 28, 28), 10)
        expected = 0
        for (cin, cout) in [(1, 8), (8, 32), (32, 64)]:
            expected += cout * cin * 3 * 3 + cout
        expected += (64 * 4 * 4) * 128 + 128     # hidden dense
        expected += 128 * 10 + 10                # classifier dense
        assert mpo.param_count(spec) == expected

    def test_layout_roundtrip(self):
        spec = mpo.ModelSpec((mpo.Conv2D(1, 2, 3, padding=1), mpo.BatchNorm(2),
                              mpo.ReLU(), mpo.Flatten(), mpo.Dense(2 * 9, 2)),
                             (1, 3, 3), 2)
        w = mpo.init_weights(spec, 5)
        assert np.array_equal(pack_params(spec, unpack_params(spec, w)), w)


class TestShapeValidation:
    def test_dense_mismatch_rejected(self):
        with pytest.raises(mpo.ShapeError):
            mpo.ModelSpec((mpo.Flatten(), mpo.Dense(5, 3)), (1, 2, 2), 3)

    def test_wrong_class_count_rejected(self):
        with pytest.raises(mpo.ShapeError):
            mpo.ModelSpec((mpo.Flatten(), mpo.Dense(4, 3)), (1, 2, 2), 7)

    def test_pool_upsample_rejected(self):
        with pytest.raises(mpo.ShapeError):
            mpo.ModelSpec((mpo.AdaptiveAvgPool(5, 5), mpo.Flatten(),
                           mpo.Dense(20, 2)), (5, 2, 2), 2)


class TestInitWeights:
    def test_xavier_bounds(self):
        spec = mpo.mlp((1, 6, 6), 4, hidden=(9,))
        w = mpo.init_weights(spec, 0)
        groups = unpack_params(spec, w)
        bound1 = np.sqrt(6.0 / (36 + 9))
        assert np.abs(groups[1][0]).max() <= bound1
        assert np.array_equal(groups[1][1], np.zeros(9))  # biases zero

    def test_deterministic_per_seed(self):
        spec = small_conv_spec()
        assert np.array_equal(mpo.init_weights(spec, 42),
                              mpo.init_weights(spec, 42))
        assert not np.array_equal(mpo.init_weights(spec, 42),
                                  mpo.init_weights(spec, 43))

    def test_bn_stored_scale_distribution(self):
        # one draw of 10^4 stored-scale entries: mean of U[-0.5, 0.5]
        spec = mpo.ModelSpec((mpo.Flatten(), mpo.Dense(4, 10000),
                              mpo.BatchNorm(10000), mpo.ReLU(),
                              mpo.Dense(10000, 2)), (1, 2, 2), 2)
        groups = unpack_params(spec, mpo.init_weights(spec, 11))
        stored_scale = groups[2][0]
        assert abs(stored_scale.mean()) < 0.02
        assert stored_scale.min() >= -0.5 and stored_scale.max() <= 0.5
        # effective scale at init lies in [0, 1]
        assert ((stored_scale + 0.5) >= 0).all()
        assert ((stored_scale + 0.5) <= 1).all()


class TestForward:
    def test_zero_weights_uniform_softmax(self):
        spec = mpo.mlp((1, 4, 4), 10, hidden=(7,))
        batch = random_batch(spec, 6, 0)
        logits = mpo.forward(spec, np.zeros(mpo.param_count(spec)), batch)
        assert np.allclose(logits, 0.0)
        assert np.allclose(mpo.softmax(logits), 0.1)

    def test_identity_dense_passes_inputs_through(self):
        spec = mpo.ModelSpec((mpo.Flatten(), mpo.Dense(4, 4)), (1, 2, 2), 4)
        w = pack_params(spec, [[], [np.eye(4), np.zeros(4)]])
        batch = random_batch(spec, 5, 1)
        logits = mpo.forward(spec, w, batch)
        assert np.allclose(logits, batch.inputs.reshape(5, 4), rtol=0, atol=0)

    def test_conv_matches_naive_convolution(self):
        spec = mpo.ModelSpec((mpo.Conv2D(2, 3, 3, stride=2, padding=1),
                              mpo.Flatten(), mpo.Dense(3 * 9, 2)), (2, 5, 5), 2)
        rng = np.random.default_rng(5)
        w = rng.standard_normal(mpo.param_count(spec))
        batch = random_batch(spec, 3, 5)
        logits = mpo.forward(spec, w, batch)

        groups = unpack_params(spec, w)
        kernel, bias = groups[0]
        dense_w, dense_b = groups[2]
        x = np.pad(batch.inputs, ((0, 0), (0, 0), (1, 1), (1, 1)))
        conv = np.zeros((3, 3, 3, 3))   # (B, out_ch, 3, 3)
        for b in range(3):
            for oc in range(3):
                for i in range(3):
                    for j in range(3):
                        acc = 0.0
                        for ic in range(2):
                            for ki in range(3):
                                for kj in range(3):
                                    acc += kernel[oc, ic, ki, kj] \
                                        * x[b, ic, 2 * i + ki, 2 * j + kj]
                        conv[b, oc, i, j] = acc + bias[oc]
        expected = conv.reshape(3, -1) @ dense_w + dense_b
        assert np.allclose(logits, expected, rtol=1e-12, atol=1e-14)

    def test_purity_same_inputs_same_logits(self):
        spec = mpo.conv_classifier((1, 8, 8), 3, channels=(2, 3),
                                   batch_norm=True, pool_to=(2, 2), hidden=5)
        w = mpo.init_weights(spec, 9)
        batch = random_batch(spec, 4, 9)
        a = mpo.forward(spec, w, batch, mode="train")
        b = mpo.forward(spec, w, batch, mode="train")
        assert np.array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        spec = mpo.mlp((1, 4, 4), 2, hidden=(3,))
        bad = mpo.Batch(np.zeros((2, 1, 5, 5)), [0, 1])
        with pytest.raises(mpo.InputError):
            mpo.forward(spec, np.zeros(mpo.param_count(spec)), bad)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(0, 50, size=(30, 10))
        assert np.allclose(mpo.softmax(logits).sum(axis=-1), 1.0, atol=1e-12)


class TestLossAndGrad:
    def test_uniform_logits_loss_is_log_num_classes(self):
        spec = mpo.mlp((1, 4, 4), 10, hidden=(6,))
        batch = random_batch(spec, 8, 2)
        loss, _ = mpo.loss_and_grad(spec, np.zeros(mpo.param_count(spec)), batch)
        assert loss == pytest.approx(np.log(10.0), rel=1e-12)

    def test_duplicated_batch_invariance(self):
        spec = small_conv_spec()
        w = mpo.init_weights(spec, 3)
        batch = random_batch(spec, 5, 3)
        doubled = mpo.Batch(np.concatenate([batch.inputs, batch.inputs]),
                            np.concatenate([batch.labels, batch.labels]))
        l1, g1 = mpo.loss_and_grad(spec, w, batch)
        l2, g2 = mpo.loss_and_grad(spec, w, doubled)
        assert l1 == pytest.approx(l2, rel=1e-12)
        assert_grad_close(g1, g2, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("maker", [
        lambda: mpo.mlp((1, 5, 5), 3, hidden=(7,)),
        lambda: small_conv_spec(),
        lambda: mpo.ModelSpec((mpo.Conv2D(1, 2, 3, padding=1), mpo.BatchNorm(2),
                               mpo.ReLU(), mpo.AdaptiveAvgPool(2, 2),
                               mpo.Flatten(), mpo.Dense(8, 3)), (1, 5, 5), 3),
        lambda: mpo.ModelSpec((mpo.Conv2D(1, 2, 3), mpo.ReLU(),
                               mpo.AdaptiveAvgPool(2, 2), mpo.Flatten(),
                               mpo.Dense(8, 2)), (1, 7, 7), 2),
        lambda: mpo.ModelSpec((mpo.Flatten(), mpo.Dense(16, 5),
                               mpo.BatchNorm(5), mpo.ReLU(), mpo.Dense(5, 2)),
                              (1, 4, 4), 2),
    ], ids=["mlp", "conv", "conv_bn", "pool_odd", "dense_bn"])
    def test_gradient_matches_finite_differences(self, maker, seed):
        spec = maker()
        n = mpo.param_count(spec)
        assert n <= 500
        rng = np.random.default_rng(seed)
        w = mpo.init_weights(spec, seed) + 0.05 * rng.standard_normal(n)
        batch = random_batch(spec, 4, seed + 100)
        _, grad = mpo.loss_and_grad(spec, w, batch)
        fd = fd_gradient(lambda v: mpo.loss_and_grad(spec, v, batch)[0], w)
        assert_grad_close(grad, fd)

    def test_stacked_matches_individual(self):
        spec = small_conv_spec()
        n = mpo.param_count(spec)
        W = np.array([mpo.init_weights(spec, k) for k in range(6)])
        batch = random_batch(spec, 5, 8)
        losses, grads = loss_and_grad_many(spec, W, batch)
        for k in range(6):
            lk, gk = mpo.loss_and_grad(spec, W[k], batch)
            assert losses[k] == pytest.approx(lk, rel=1e-12)
            assert_grad_close(grads[k], gk, rtol=1e-12, atol=1e-14)


class TestBatchNormOp:
    def test_zero_stored_scale_means_effective_half(self):
        x = np.random.default_rng(0).random((8, 3, 4, 4))
        y = mpo.batchnorm_forward(np.zeros(3), np.zeros(3), x)
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        xhat = (x - mu) / np.sqrt(var + BN_EPS)
        assert np.allclose(y, 0.5 * xhat)

    def test_constant_batch_outputs_shift(self):
        x = np.full((6, 2, 3, 3), 7.0)
        shift = np.array([1.5, -2.0])
        y = mpo.batchnorm_forward(np.array([0.3, -0.1]), shift, x)
        assert np.allclose(y, shift[None, :, None, None], atol=1e-12)

    def test_two_point_channel_normalizes_to_unit_spread(self):
        # values {1, 3}: mean 2, var 1 -> normalized {-1, +1}; effective
        # scale z + 0.5 = 1
        x = np.array([[[[1.0]]], [[[3.0]]]])
        y = mpo.batchnorm_forward(np.array([0.5]), np.array([0.0]), x)
        assert np.allclose(y.ravel(), [-1.0, 1.0], atol=1e-4)

    def test_eval_mode_uses_running_stats(self):
        running = (np.zeros(2), np.ones(2))
        x = np.random.default_rng(1).random((4, 2)) * 3.0
        y = mpo.batchnorm_forward(np.array([0.5, 0.5]), np.zeros(2), x,
                                  mode="eval", running=running)
        assert np.allclose(y, x / np.sqrt(1 + BN_EPS), atol=1e-12)

    def test_train_mode_updates_running_stats(self):
        spec = mpo.ModelSpec((mpo.Flatten(), mpo.Dense(4, 3), mpo.BatchNorm(3),
                              mpo.ReLU(), mpo.Dense(3, 2)), (1, 2, 2), 2)
        state = BNState.for_spec(spec)
        w = mpo.init_weights(spec, 2)
        batch = random_batch(spec, 16, 2)
        before = state.means[0].copy()
        mpo.forward(spec, w, batch, mode="train", bn_state=state)
        assert not np.array_equal(before, state.means[0])
        # eval mode must now be a pure function of the stored stats
        a = mpo.forward(spec, w, batch, mode="eval", bn_state=state)
        b = mpo.forward(spec, w, batch, mode="eval", bn_state=state)
        assert np.array_equal(a, b)
