import numpy as np
import pytest

from wafertex import rng
from wafertex.tensor import (
    ConvOp,
    ConvSpec,
    GapOp,
    PointwiseOp,
    SIGMOID_HI,
    SIGMOID_LO,
    SigmoidOp,
    Tensor,
    UpsampleOp,
    concat_channels,
    conv2d,
    global_avg_pool,
    grad_check,
    pointwise,
    sigmoid_map,
    upsample_nearest,
)


def conv_oracle(x, spec):
    """Direct sliding-window sum, six nested loops, float64."""
    xd = x.data.astype(np.float64)
    w = spec.weights.astype(np.float64)
    oh, ow = spec.out_size(x.height, x.width)
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    out = np.zeros((spec.out_channels, oh, ow))
    for oc in range(spec.out_channels):
        g = oc // og
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ic in range(cg):
                    for ky in range(spec.kernel_h):
                        for kx in range(spec.kernel_w):
                            iy = oy * spec.stride - spec.padding + ky * spec.dilation
                            ix = ox * spec.stride - spec.padding + kx * spec.dilation
                            if 0 <= iy < x.height and 0 <= ix < x.width:
                                acc += w[oc, ic, ky, kx] * xd[g * cg + ic, iy, ix]
                out[oc, oy, ox] = acc
        if spec.bias is not None:
            out[oc] += float(spec.bias[oc])
    return out


class TestTensor:
    def test_construction_and_shape(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert t.shape == (1, 3, 4)
        assert t.dtype == np.float32

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            Tensor(np.array([[np.nan, 0.0]]))

    def test_from_flat_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            Tensor.from_flat(1, 2, 2, [1.0, 2.0, 3.0])

    def test_random_uniform_deterministic(self):
        a = Tensor.random_uniform(2, 3, 4, seed=11)
        b = Tensor.random_uniform(2, 3, 4, seed=11)
        assert np.array_equal(a.data, b.data)


class TestConvSpec:
    def test_group_divisibility(self):
        w = np.zeros((4, 3, 1, 1), dtype=np.float32)
        with pytest.raises(ValueError, match="groups"):
            ConvSpec(5, 4, 1, 1, w, groups=2)

    def test_bad_hyperparams(self):
        w = np.zeros((1, 1, 1, 1), dtype=np.float32)
        with pytest.raises(ValueError, match="dilation"):
            ConvSpec(1, 1, 1, 1, w, dilation=0)
        with pytest.raises(ValueError, match="dilation"):
            ConvSpec(1, 1, 1, 1, w, padding=-1)

    def test_weight_shape_checked(self):
        with pytest.raises(ValueError, match="weights shape"):
            ConvSpec(2, 3, 3, 3, np.zeros((3, 2, 3, 1), dtype=np.float32))


class TestConv2d:
    def test_identity_kernel(self):
        # 3x3 identity kernel with padding 1 reproduces the input exactly
        x = Tensor.random_uniform(1, 3, 3, seed=0)
        out = conv2d(x, ConvSpec.identity(1, 3))
        assert np.array_equal(out.data, x.data)

    def test_zero_kernel_annihilates(self):
        x = Tensor.random_uniform(2, 5, 6, seed=1)
        spec = ConvSpec(2, 3, 3, 3, np.zeros((3, 2, 3, 3), dtype=np.float32), padding=1)
        out = conv2d(x, spec)
        assert out.shape == (3, 5, 6)
        assert np.count_nonzero(out.data) == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle_dilated(self, seed):
        x = Tensor.random_uniform(2, 5, 5, seed=seed)
        spec = ConvSpec.seeded(2, 3, 3, 3, seed=seed + 100, padding=2, dilation=2)
        got = conv2d(x, spec).data
        want = conv_oracle(x, spec)
        assert np.max(np.abs(got - want)) < 1e-5

    @pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2), (3, 2, 2)])
    def test_matches_loop_oracle_configs(self, stride, padding, groups):
        x = Tensor.random_uniform(4, 9, 8, seed=7)
        spec = ConvSpec.seeded(4, 6, 3, 2, seed=13, stride=stride, padding=padding,
                               groups=groups)
        got = conv2d(x, spec).data
        want = conv_oracle(x, spec)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-5

    def test_channel_mismatch(self):
        spec = ConvSpec.seeded(3, 2, 1, 1, seed=0)
        with pytest.raises(ValueError, match="channels"):
            conv2d(Tensor.random_uniform(2, 4, 4, seed=0), spec)

    def test_kernel_larger_than_padded_input(self):
        spec = ConvSpec.seeded(1, 1, 5, 5, seed=0)
        with pytest.raises(ValueError, match="exceeds"):
            conv2d(Tensor.random_uniform(1, 3, 3, seed=0), spec)

    def test_linearity(self):
        x = Tensor.random_uniform(2, 6, 6, seed=3)
        y = Tensor.random_uniform(2, 6, 6, seed=4)
        spec = ConvSpec.seeded(2, 3, 3, 3, seed=5, padding=1, bias=False)
        lhs = conv2d(Tensor(2.5 * x.data - 1.25 * y.data), spec).data
        rhs = 2.5 * conv2d(x, spec).data - 1.25 * conv2d(y, spec).data
        assert np.max(np.abs(lhs - rhs)) < 1e-5 * max(1.0, np.abs(rhs).max())

    def test_deterministic_across_runs(self):
        x = Tensor.random_uniform(3, 12, 12, seed=8)
        spec = ConvSpec.seeded(3, 5, 3, 3, seed=9, padding=1)
        assert np.array_equal(conv2d(x, spec).data, conv2d(x, spec).data)


class TestUpsample:
    def test_factor_one_identity(self):
        x = Tensor.random_uniform(2, 3, 3, seed=0)
        assert np.array_equal(upsample_nearest(x, 1).data, x.data)

    def test_factor_zero_rejected(self):
        with pytest.raises(ValueError, match="factor"):
            upsample_nearest(Tensor.zeros(1, 2, 2), 0)

    def test_block_replication(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = upsample_nearest(x, 2)
        want = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                        dtype=np.float32)
        assert np.array_equal(out.data[0], want)

    def test_index_map_oracle(self):
        x = Tensor.random_uniform(3, 4, 4, seed=2)
        out = upsample_nearest(x, 3)
        for c in range(3):
            for i in range(12):
                for j in range(12):
                    assert out.data[c, i, j] == x.data[c, i // 3, j // 3]

    def test_upsample_then_gap_equals_gap(self):
        x = Tensor.random_uniform(3, 5, 7, seed=6)
        a = global_avg_pool(upsample_nearest(x, 4)).data
        b = global_avg_pool(x).data
        assert np.max(np.abs(a - b)) < 1e-6


class TestGlobalAvgPool:
    def test_constant_channel(self):
        assert global_avg_pool(Tensor.full(1, 4, 4, 3.25)).data.ravel()[0] == 3.25

    def test_hand_sum(self):
        t = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert global_avg_pool(t).data.ravel()[0] == 2.5

    def test_double_precision_oracle(self):
        x = Tensor.random_uniform(4, 7, 5, seed=10)
        got = global_avg_pool(x).data.ravel()
        want = np.array([x.data[c].astype(np.float64).sum() / 35 for c in range(4)])
        assert np.max(np.abs(got - want) / np.abs(want)) < 1e-6

    def test_empty_rejected(self):
        t = Tensor(np.zeros((1, 0, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="empty"):
            global_avg_pool(t)


class TestPointwise:
    def test_add_zeros_identity(self):
        x = Tensor.random_uniform(2, 4, 4, seed=0)
        assert np.array_equal(pointwise(x, Tensor.zeros(2, 4, 4), "add").data, x.data)

    def test_mul_ones_broadcast_identity(self):
        x = Tensor.random_uniform(3, 4, 5, seed=1)
        ones = Tensor.full(3, 1, 1, 1.0)
        assert np.array_equal(pointwise(x, ones, "mul").data, x.data)

    @pytest.mark.parametrize("kind", ["add", "mul"])
    def test_scalar_loop_oracle(self, kind):
        x = Tensor.random_uniform(2, 3, 4, seed=2)
        y = Tensor.random_uniform(2, 3, 4, seed=3)
        got = pointwise(x, y, kind).data
        for c in range(2):
            for i in range(3):
                for j in range(4):
                    a, b = x.data[c, i, j], y.data[c, i, j]
                    want = np.float32(a + b) if kind == "add" else np.float32(a * b)
                    assert got[c, i, j] == want

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError, match="incompatible"):
            pointwise(Tensor.zeros(2, 4, 4), Tensor.zeros(2, 4, 3), "add")
        with pytest.raises(ValueError, match="incompatible"):
            pointwise(Tensor.zeros(2, 4, 4), Tensor.zeros(1, 4, 4), "mul")

    def test_bad_kind(self):
        with pytest.raises(ValueError, match="kind"):
            pointwise(Tensor.zeros(1, 1, 1), Tensor.zeros(1, 1, 1), "sub")


class TestSigmoid:
    def test_zero_maps_to_half(self):
        assert sigmoid_map(Tensor.zeros(1, 1, 1)).data.ravel()[0] == 0.5

    def test_symmetry(self):
        x = Tensor.random_uniform(2, 5, 5, seed=4, low=-4, high=4)
        total = sigmoid_map(x).data + sigmoid_map(Tensor(-x.data)).data
        assert np.max(np.abs(total - 1.0)) < 1e-6

    def test_saturation_bounds(self):
        x = Tensor(np.array([[-100.0, 100.0]]))
        out = sigmoid_map(x).data
        assert np.isfinite(out).all()
        assert out.min() >= SIGMOID_LO
        assert out.max() <= SIGMOID_HI
        assert 0.0 < out.min() and out.max() < 1.0


class TestGradCheck:
    def test_linear_op_near_exact(self):
        x = Tensor.random_uniform(2, 4, 4, seed=0)
        other = Tensor.random_uniform(2, 4, 4, seed=1)
        err = grad_check(PointwiseOp(other, "add"), x, eps=1e-4)
        assert err <= 1e-10

    def test_sigmoid(self):
        x = Tensor.random_uniform(2, 4, 4, seed=2, low=-2, high=2)
        assert grad_check(SigmoidOp(), x, eps=1e-4) <= 1e-4

    def test_conv(self):
        spec = ConvSpec.seeded(2, 3, 3, 3, seed=3, padding=1)
        x = Tensor.random_uniform(2, 5, 5, seed=4)
        assert grad_check(ConvOp(spec), x, eps=1e-3) <= 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_all_ops_ten_seeds(self, seed):
        x = Tensor.random_uniform(2, 5, 6, seed=seed + 20)
        other = Tensor.random_uniform(2, 5, 6, seed=seed + 40)
        ops = [
            ConvOp(ConvSpec.seeded(2, 4, 3, 3, seed=seed, padding=2, dilation=2)),
            PointwiseOp(other, "add"),
            PointwiseOp(other, "mul"),
            SigmoidOp(),
            GapOp(),
            UpsampleOp(2),
        ]
        for op in ops:
            assert grad_check(op, x, eps=1e-3, seed=seed) <= 1e-4

    def test_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            grad_check(SigmoidOp(), Tensor.zeros(1, 2, 2), eps=0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_vjp_adjoint_identity(self, seed):
        # <g, J v> == <J^T g, v> for the ops with an analytic backward
        x = Tensor.random_uniform(2, 5, 5, seed=seed, low=-2, high=2).astype(np.float64)
        v = Tensor.random_uniform(2, 5, 5, seed=seed + 7).astype(np.float64)
        other = Tensor.random_uniform(2, 5, 5, seed=seed + 9).astype(np.float64)
        ops = [
            ConvOp(ConvSpec.seeded(2, 3, 3, 3, seed=seed, stride=2, padding=1)),
            PointwiseOp(other, "add"),
            PointwiseOp(other, "mul"),
            SigmoidOp(),
            GapOp(),
            UpsampleOp(3),
        ]
        for op in ops:
            jv = op.jvp(x, v)
            g = Tensor(rng.uniform(seed + 31, jv.data.size, -1, 1).reshape(jv.shape),
                       dtype=np.float64)
            lhs = float(np.sum(g.data * jv.data))
            rhs = float(np.sum(op.vjp(x, g).data * v.data))
            assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


class TestConcat:
    def test_channel_stacking(self):
        a = Tensor.random_uniform(2, 3, 3, seed=0)
        b = Tensor.random_uniform(1, 3, 3, seed=1)
        out = concat_channels([a, b])
        assert out.shape == (3, 3, 3)
        assert np.array_equal(out.data[:2], a.data)
        assert np.array_equal(out.data[2:], b.data)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial"):
            concat_channels([Tensor.zeros(1, 2, 2), Tensor.zeros(1, 3, 2)])
