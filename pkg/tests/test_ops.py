import numpy as np
import pytest

from conftest import max_rel_err, numeric_grad
from cosnet import ops
from cosnet.errors import ConfigError, LabelError, ShapeError
from cosnet.ops import BatchNormState, ConvParams
from cosnet.tensor import Tensor, tensor_create


def _naive_conv(x, w, p: ConvParams):
    """Direct 6-loop convolution oracle."""
    n, cin, h, hw = x.shape
    cout = p.out_channels
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.pad
    cin_g = cin // p.groups
    cout_g = cout // p.groups
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (hw + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            g = co // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (w[co, ci, ki, kj]
                                        * xp[b, g * cin_g + ci,
                                             i * sh + ki, j * sw + kj])
                    out[b, co, i, j] = acc
    return out


class TestConvForward:
    def test_matches_naive_dense(self):
        p = ConvParams(out_channels=3, in_channels=2, kernel=(3, 3),
                       stride=(2, 2), pad=(1, 1))
        x = tensor_create((2, 2, 5, 5), "uniform", seed=0, lo=-1, hi=1)
        w = np.random.default_rng(1).normal(size=p.weight_shape)
        got = ops.conv2d_forward(x.astype(np.float64), w, None, p)
        want = _naive_conv(x.data.astype(np.float64), w, p)
        assert np.allclose(got.data, want, atol=1e-10)

    def test_matches_naive_grouped(self):
        p = ConvParams(out_channels=4, in_channels=6, kernel=(3, 3),
                       stride=(1, 1), pad=(1, 1), groups=2)
        x = tensor_create((1, 6, 4, 4), "uniform", seed=2, lo=-1, hi=1)
        w = np.random.default_rng(3).normal(size=p.weight_shape)
        got = ops.conv2d_forward(x.astype(np.float64), w, None, p)
        want = _naive_conv(x.data.astype(np.float64), w, p)
        assert np.allclose(got.data, want, atol=1e-10)

    def test_grouped_equals_stacked_independent_convs(self):
        g = 3
        p = ConvParams(out_channels=6, in_channels=9, kernel=(3, 3),
                       pad=(1, 1), groups=g)
        x = tensor_create((2, 9, 5, 5), "uniform", seed=4)
        w = np.random.default_rng(5).normal(size=p.weight_shape) \
            .astype(np.float32)
        whole = ops.conv2d_forward(x, w, None, p)
        sub = ConvParams(out_channels=2, in_channels=3, kernel=(3, 3),
                         pad=(1, 1))
        parts = []
        for gi in range(g):
            xs = Tensor(x.data[:, 3 * gi:3 * gi + 3].copy())
            parts.append(ops.conv2d_forward(xs, w[2 * gi:2 * gi + 2],
                                            None, sub))
        assert np.array_equal(whole.data, ops.channel_concat(parts).data)

    def test_bias(self):
        p = ConvParams(out_channels=2, in_channels=1, has_bias=True)
        x = tensor_create((1, 1, 2, 2), "ones")
        w = np.ones(p.weight_shape, dtype=np.float32)
        b = np.array([1.0, -1.0], dtype=np.float32)
        out = ops.conv2d_forward(x, w, b, p)
        assert np.array_equal(out.data[0, 0], np.full((2, 2), 2.0))
        assert np.array_equal(out.data[0, 1], np.zeros((2, 2)))

    def test_channel_mismatch(self):
        p = ConvParams(out_channels=2, in_channels=3)
        with pytest.raises(ConfigError):
            ops.conv2d_forward(tensor_create((1, 2, 2, 2)),
                               np.zeros(p.weight_shape, np.float32), None, p)

    def test_bad_group_divisibility(self):
        with pytest.raises(ConfigError):
            ConvParams(out_channels=4, in_channels=5, groups=2)


class TestConvBackward:
    def test_finite_difference_1x2x4x4(self):
        p = ConvParams(out_channels=2, in_channels=2, kernel=(3, 3),
                       pad=(1, 1), has_bias=True)
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        w = rng.normal(size=p.weight_shape)
        b = rng.normal(size=2)
        go = Tensor(rng.normal(size=(1, 2, 4, 4)))

        gx, gw, gb = ops.conv2d_backward(go, x, w, p)
        fx = numeric_grad(
            lambda xx: float((ops.conv2d_forward(Tensor(xx), w, b, p).data
                              * go.data).sum()), x.data)
        fw = numeric_grad(
            lambda ww: float((ops.conv2d_forward(x, ww, b, p).data
                              * go.data).sum()), w)
        fb = numeric_grad(
            lambda bb: float((ops.conv2d_forward(x, w, bb, p).data
                              * go.data).sum()), b)
        assert max_rel_err(gx.data, fx) < 1e-3
        assert max_rel_err(gw, fw) < 1e-3
        assert max_rel_err(gb, fb) < 1e-3

    def test_finite_difference_grouped_strided(self):
        p = ConvParams(out_channels=4, in_channels=4, kernel=(3, 3),
                       stride=(2, 2), pad=(1, 1), groups=2)
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        w = rng.normal(size=p.weight_shape)
        go = Tensor(rng.normal(size=(2, 4, 3, 3)))
        gx, gw, gb = ops.conv2d_backward(go, x, w, p)
        assert gb is None
        fx = numeric_grad(
            lambda xx: float((ops.conv2d_forward(Tensor(xx), w, None, p).data
                              * go.data).sum()), x.data)
        fw = numeric_grad(
            lambda ww: float((ops.conv2d_forward(x, ww, None, p).data
                              * go.data).sum()), w)
        assert max_rel_err(gx.data, fx) < 1e-3
        assert max_rel_err(gw, fw) < 1e-3

    def test_grad_shape_mismatch(self):
        p = ConvParams(out_channels=1, in_channels=1)
        with pytest.raises(ShapeError):
            ops.conv2d_backward(tensor_create((1, 1, 3, 3)),
                                tensor_create((1, 1, 2, 2)),
                                np.zeros(p.weight_shape, np.float32), p)


class TestInputReplicate:
    def test_tiles_channel_block(self):
        x = tensor_create((1, 2, 2, 2), "uniform", seed=0)
        y = ops.input_replicate(x, 3)
        assert y.shape == (1, 6, 2, 2)
        for m in range(3):
            assert np.array_equal(y.data[:, 2 * m:2 * m + 2], x.data)

    def test_m1_is_copy(self):
        x = tensor_create((1, 2, 2, 2), "uniform", seed=0)
        y = ops.input_replicate(x, 1)
        assert np.array_equal(y.data, x.data)
        y.data[...] = 0
        assert x.data.sum() != 0

    def test_backward_sums_blocks(self):
        go = Tensor(np.arange(12, dtype=np.float32).reshape(1, 6, 1, 2))
        gx = ops.input_replicate_backward(go, 3)
        assert gx.shape == (1, 2, 1, 2)
        want = go.data[:, 0:2] + go.data[:, 2:4] + go.data[:, 4:6]
        assert np.array_equal(gx.data, want)

    def test_backward_divisibility(self):
        with pytest.raises(ShapeError):
            ops.input_replicate_backward(tensor_create((1, 5, 2, 2)), 2)


class TestPooling:
    def test_max_known(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        y = ops.pool2d(x, "max", (2, 2), (2, 2), (0, 0))
        assert np.array_equal(y.data[0, 0], [[5, 7], [13, 15]])

    def test_avg_fixed_divisor_with_padding(self):
        x = tensor_create((1, 1, 2, 2), "ones")
        y = ops.pool2d(x, "avg", (3, 3), (1, 1), (1, 1))
        # corner window covers 4 real pixels out of 9
        assert abs(y.data[0, 0, 0, 0] - 4.0 / 9.0) < 1e-6

    def test_max_padding_uses_neg_inf(self):
        x = Tensor(np.full((1, 1, 2, 2), -5.0, dtype=np.float32))
        y = ops.pool2d(x, "max", (3, 3), (1, 1), (1, 1))
        assert (y.data == -5.0).all()

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_backward_finite_difference(self, kind):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))   # continuous: no ties
        go = Tensor(rng.normal(size=(2, 2, 2, 2)))
        gx = ops.pool2d_backward(go, x, kind, (3, 3), (2, 2), (1, 1))
        fx = numeric_grad(
            lambda xx: float((ops.pool2d(Tensor(xx), kind, (3, 3), (2, 2),
                                         (1, 1)).data * go.data).sum()),
            x.data)
        assert max_rel_err(gx.data, fx) < 1e-3

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            ops.pool2d(tensor_create((1, 1, 3, 3)), "median", (2, 2),
                       (1, 1), (0, 0))


class TestBatchNorm:
    def test_train_normalizes_and_updates_running(self):
        state = BatchNormState.create(3, mode="train")
        x = tensor_create((4, 3, 5, 5), "uniform", seed=0, lo=2.0, hi=4.0)
        y = ops.batchnorm2d(x, state)
        assert np.abs(y.data.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(y.data.var(axis=(0, 2, 3)) - 1).max() < 1e-3
        # momentum 0.1 blend from (0, 1) toward batch stats
        batch_mean = x.data.mean(axis=(0, 2, 3))
        assert np.allclose(state.running_mean, 0.1 * batch_mean, atol=1e-6)

    def test_eval_uses_running_stats(self):
        state = BatchNormState.create(2, mode="eval")
        state.running_mean[:] = [1.0, -1.0]
        state.running_var[:] = [4.0, 4.0]
        x = tensor_create((1, 2, 2, 2), "ones")
        y = ops.batchnorm2d(x, state)
        assert np.allclose(y.data[0, 0], 0.0, atol=1e-3)
        assert np.allclose(y.data[0, 1], 1.0, atol=1e-3)

    def test_affine(self):
        state = BatchNormState.create(1, mode="eval")
        state.gamma[:] = 3.0
        state.beta[:] = 1.0
        x = tensor_create((1, 1, 2, 2), "constant", value=2.0)
        y = ops.batchnorm2d(x, state)
        assert np.allclose(y.data, 7.0, atol=1e-3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.batchnorm2d(tensor_create((1, 3, 2, 2)),
                            BatchNormState.create(2))

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_backward_finite_difference(self, mode):
        rng = np.random.default_rng(5)
        state = BatchNormState.create(2, mode=mode)
        state.gamma[:] = rng.uniform(0.5, 1.5, 2)
        state.beta[:] = rng.uniform(-0.5, 0.5, 2)
        state.running_mean[:] = rng.uniform(-0.2, 0.2, 2)
        state.running_var[:] = rng.uniform(0.5, 1.5, 2)
        x = Tensor(rng.normal(size=(3, 2, 3, 3)))
        go = Tensor(rng.normal(size=(3, 2, 3, 3)))
        gx, gg, gb = ops.batchnorm2d_backward(go, x, state)

        def loss_x(xx):
            return float((ops.batchnorm2d(Tensor(xx),
                                          _frozen(state, mode)).data
                          * go.data).sum())

        def _frozen(s, m):
            return BatchNormState(gamma=s.gamma.copy(), beta=s.beta.copy(),
                                  running_mean=s.running_mean.copy(),
                                  running_var=s.running_var.copy(),
                                  momentum=s.momentum, epsilon=s.epsilon,
                                  mode=m)

        assert max_rel_err(gx.data, numeric_grad(loss_x, x.data)) < 1e-3

        def loss_gamma(gam):
            s = _frozen(state, mode)
            s.gamma = gam
            return float((ops.batchnorm2d(x, s).data * go.data).sum())

        def loss_beta(bet):
            s = _frozen(state, mode)
            s.beta = bet
            return float((ops.batchnorm2d(x, s).data * go.data).sum())

        assert max_rel_err(gg, numeric_grad(loss_gamma,
                                            state.gamma.astype(np.float64))) < 1e-3
        assert max_rel_err(gb, numeric_grad(loss_beta,
                                            state.beta.astype(np.float64))) < 1e-3


class TestRelu:
    def test_forward(self):
        x = Tensor(np.array([[-1.0, 0.0, 2.0, -3.0]],
                            dtype=np.float32).reshape(1, 1, 1, 4))
        assert np.array_equal(ops.relu(x).data.reshape(-1), [0, 0, 2, 0])

    def test_gradient_at_zero_is_zero(self):
        x = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
        go = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        assert ops.relu_backward(go, x).data.item() == 0.0

    def test_backward_mask(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 2, 3, 3)))
        go = Tensor(rng.normal(size=(2, 2, 3, 3)))
        gx = ops.relu_backward(go, x)
        assert np.array_equal(gx.data, go.data * (x.data > 0))


class TestFusion:
    def test_concat_and_backward(self):
        a = tensor_create((1, 2, 2, 2), "uniform", seed=0)
        b = tensor_create((1, 3, 2, 2), "uniform", seed=1)
        y = ops.channel_concat([a, b])
        assert y.shape == (1, 5, 2, 2)
        grads = ops.channel_concat_backward(y, [2, 3])
        assert np.array_equal(grads[0].data, a.data)
        assert np.array_equal(grads[1].data, b.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ops.channel_concat([tensor_create((1, 1, 2, 2)),
                                tensor_create((1, 1, 3, 3))])

    def test_block_sum(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 4, 1, 2))
        y = ops.channel_block_sum(x, 2)
        assert np.array_equal(y.data, x.data[:, :2] + x.data[:, 2:])

    def test_block_sum_backward_replicates(self):
        go = tensor_create((1, 2, 2, 2), "uniform", seed=2)
        gx = ops.channel_block_sum_backward(go, 3)
        assert gx.shape == (1, 6, 2, 2)
        for m in range(3):
            assert np.array_equal(gx.data[:, 2 * m:2 * m + 2], go.data)

    def test_block_sum_divisibility(self):
        with pytest.raises(ShapeError):
            ops.channel_block_sum(tensor_create((1, 5, 2, 2)), 2)


class TestHead:
    def test_gap(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        y = ops.global_avg_pool(x)
        assert np.array_equal(y.data.reshape(-1), [1.5, 5.5])

    def test_gap_backward_finite_difference(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 3, 3)))
        go = Tensor(rng.normal(size=(2, 3, 1, 1)))
        gx = ops.global_avg_pool_backward(go, x)
        fx = numeric_grad(
            lambda xx: float((ops.global_avg_pool(Tensor(xx)).data
                              * go.data).sum()), x.data)
        assert max_rel_err(gx.data, fx) < 1e-3

    def test_linear_and_backward(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 4, 1, 1)))
        w = rng.normal(size=(5, 4))
        b = rng.normal(size=5)
        y = ops.linear(x, w, b)
        assert y.shape == (3, 5, 1, 1)
        go = Tensor(rng.normal(size=(3, 5, 1, 1)))
        gx, gw, gb = ops.linear_backward(go, x, w)
        fx = numeric_grad(
            lambda xx: float((ops.linear(Tensor(xx), w, b).data
                              * go.data).sum()), x.data)
        fw = numeric_grad(
            lambda ww: float((ops.linear(x, ww, b).data * go.data).sum()), w)
        fb = numeric_grad(
            lambda bb: float((ops.linear(x, w, bb).data * go.data).sum()), b)
        assert max_rel_err(gx.data, fx) < 1e-3
        assert max_rel_err(gw, fw) < 1e-3
        assert max_rel_err(gb, fb) < 1e-3

    def test_linear_requires_1x1(self):
        with pytest.raises(ShapeError):
            ops.linear(tensor_create((1, 4, 2, 2)), np.zeros((5, 4)),
                       np.zeros(5))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_loss(self):
        logits = tensor_create((4, 10, 1, 1), "zeros")
        loss, _ = ops.softmax_cross_entropy(logits, np.zeros(4, np.int64))
        assert abs(loss - np.log(10)) < 1e-6

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(9)
        z = Tensor(rng.normal(size=(3, 5, 1, 1)))
        labels = np.array([0, 2, 4])
        _, grad = ops.softmax_cross_entropy(z, labels)
        fz = numeric_grad(
            lambda zz: ops.softmax_cross_entropy(Tensor(zz), labels)[0],
            z.data)
        assert max_rel_err(grad.data, fz) < 1e-3

    def test_large_logits_stable(self):
        z = tensor_create((1, 3, 1, 1), "constant", value=1e4)
        loss, grad = ops.softmax_cross_entropy(z, [1])
        assert np.isfinite(loss)
        assert np.isfinite(grad.data).all()

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ops.softmax_cross_entropy(tensor_create((2, 3, 1, 1)), [0, 3])
        with pytest.raises(LabelError):
            ops.softmax_cross_entropy(tensor_create((2, 3, 1, 1)), [-1, 0])

    def test_label_count_mismatch(self):
        with pytest.raises(LabelError):
            ops.softmax_cross_entropy(tensor_create((2, 3, 1, 1)), [0])
