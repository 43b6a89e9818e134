import math

import numpy as np
import numpy.testing as npt
import pytest

from casunext.errors import ShapeError
from casunext.gradcheck import check_gradients
from casunext.layers import (
    Conv2dParams,
    DepthwiseParams,
    DepthwiseSeparableParams,
    bilinear_upsample2x,
    compose_dense,
    conv2d,
    conv_output_size,
    depthwise_separable_conv,
    init_bottleneck,
    init_conv2d,
    init_separable,
    interpolation_matrix,
    inverted_bottleneck,
    maxpool2x2,
    named_parameters,
    param_count,
    pointwise_head,
    resize_mask,
    separable_param_count,
)
from casunext.network import ModelConfig, build
from casunext.tensor import Tensor, parameter, softmax


def _conv(kernel: np.ndarray, bias: np.ndarray | None = None, padding: int = 0) -> Conv2dParams:
    bias = np.zeros(kernel.shape[0]) if bias is None else bias
    return Conv2dParams(parameter(kernel), parameter(bias), stride=1, padding=padding)


def test_conv_counts_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), _conv(np.ones((1, 1, 3, 3)), padding=1)).data
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 0, 1] == 6.0


def test_conv_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    kernel = np.arange(9.0).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), _conv(kernel, padding=1)).data[0, 0]
    # cross-correlation: a centred delta picks up the kernel rotated by 180 degrees
    npt.assert_array_equal(out, kernel[0, 0, ::-1, ::-1])


def test_pointwise_identity(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    out = conv2d(Tensor(x), _conv(np.eye(3)[:, :, None, None])).data
    npt.assert_array_equal(out, x)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), _conv(np.ones((1, 3, 3, 3))))


def test_conv_output_too_small():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), _conv(np.ones((1, 1, 3, 3))))


def test_strided_conv_shape(rng):
    params = Conv2dParams(parameter(rng.normal(size=(2, 1, 3, 3))), parameter(np.zeros(2)), stride=2, padding=1)
    assert conv2d(Tensor(rng.normal(size=(1, 1, 9, 9))), params).shape == (1, 2, 5, 5)


def test_conv_gradients(rng):
    x = parameter(rng.normal(size=(2, 4, 9, 9)))
    params = init_conv2d(rng, 4, 3, 3)
    params.bias.data[:] = rng.normal(size=3)
    weights = rng.normal(size=(2, 3, 9, 9))

    report = check_gradients(
        lambda: (conv2d(x, params) * weights).sum(), {"x": x, "kernel": params.kernel, "bias": params.bias}
    )
    assert report.passed(1e-4), report.errors


def test_same_padding_preserves_every_size():
    for k in (1, 3, 7):
        pad = (k - 1) // 2
        for size in range(8, 65):
            assert conv_output_size(size, k, 1, pad) == size


@pytest.mark.parametrize("shape", [(8, 8), (8, 64), (17, 30), (64, 9)])
def test_same_padding_forward_shapes(rng, shape):
    params = init_separable(rng, 2, 3, 7)
    out = depthwise_separable_conv(Tensor(rng.normal(size=(1, 2, *shape))), params)
    assert out.shape == (1, 3, *shape)


def test_separable_identity(rng):
    delta = np.zeros((3, 1, 7, 7))
    delta[:, 0, 3, 3] = 1.0
    params = DepthwiseSeparableParams(
        DepthwiseParams(parameter(delta), parameter(np.zeros(3)), padding=3),
        _conv(np.eye(3)[:, :, None, None]),
    )
    x = rng.normal(size=(1, 3, 8, 8))
    npt.assert_allclose(depthwise_separable_conv(Tensor(x), params).data, x, atol=1e-15)


def test_separable_parameter_economics(rng):
    separable = init_separable(rng, 16, 32, 7)
    dense = init_conv2d(rng, 16, 32, 7)
    assert param_count(separable, include_bias=False) == 784 + 512 == 1296
    assert param_count(dense, include_bias=False) == 25088
    assert separable_param_count(7, 16, 32) == 1296


def test_separable_equals_composed_dense_conv(rng):
    params = init_separable(rng, 3, 5, 7)
    params.depthwise.bias.data[:] = rng.normal(size=3)
    params.pointwise.bias.data[:] = rng.normal(size=5)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    dense = compose_dense(params)
    npt.assert_allclose(depthwise_separable_conv(x, params).data, conv2d(x, dense).data, rtol=0, atol=1e-9)


def test_separable_gradients(rng):
    x = parameter(rng.normal(size=(1, 2, 6, 6)))
    params = init_separable(rng, 2, 3, 3)
    weights = rng.normal(size=(1, 3, 6, 6))
    tensors = {"x": x, **dict(named_parameters(params))}
    report = check_gradients(lambda: (depthwise_separable_conv(x, params) * weights).sum(), tensors)
    assert report.passed(1e-4), report.errors


def test_every_separable_layer_in_a_network_matches_the_formula():
    net = build(ModelConfig(input_size=32, width_multiplier=0.5))
    layers = [stage.entry for stage in net.encoder] + [stage.conv for stage in net.decoder]
    for p in layers:
        assert isinstance(p, DepthwiseSeparableParams)
        k = p.depthwise.kernel.shape[2]
        assert param_count(p, include_bias=False) == separable_param_count(k, p.in_channels, p.out_channels)


def test_maxpool_picks_the_maximum():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert maxpool2x2(x).data.item() == 4.0


def test_maxpool_tie_routes_gradient_to_first_position():
    x = parameter(np.ones((1, 1, 2, 2)))
    out = maxpool2x2(x)
    npt.assert_array_equal(out.data, [[[[1.0]]]])
    out.sum().backward()
    npt.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_rejects_odd_sizes():
    with pytest.raises(ShapeError, match="even"):
        maxpool2x2(Tensor(np.ones((1, 1, 3, 4))))


def test_maxpool_gradients(rng):
    x = parameter(rng.normal(size=(1, 2, 4, 4)))
    weights = rng.normal(size=(1, 2, 2, 2))
    report = check_gradients(lambda: (maxpool2x2(x) * weights).sum(), {"x": x})
    assert report.passed(1e-4), report.errors


def test_upsample_preserves_constants():
    out = bilinear_upsample2x(Tensor(np.full((1, 2, 3, 5), 0.7))).data
    assert out.shape == (1, 2, 6, 10)
    npt.assert_allclose(out, 0.7)


def test_upsample_single_pixel():
    npt.assert_array_equal(bilinear_upsample2x(Tensor(np.full((1, 1, 1, 1), 2.5))).data, np.full((1, 1, 2, 2), 2.5))


def _bilinear_reference(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = image.shape

    def source(i: int, n_in: int, n_out: int) -> tuple[int, int, float]:
        s = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        lo = min(int(math.floor(s)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y0, y1, fy = source(i, in_h, out_h)
        for j in range(out_w):
            x0, x1, fx = source(j, in_w, out_w)
            top = (1 - fx) * image[y0, x0] + fx * image[y0, x1]
            bottom = (1 - fx) * image[y1, x0] + fx * image[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bottom
    return out


def test_upsample_matches_per_pixel_formula(rng):
    base = np.array([[0.0, 1.0], [2.0, 3.0]])
    npt.assert_allclose(bilinear_upsample2x(Tensor(base[None, None])).data[0, 0], _bilinear_reference(base, 4, 4))
    expected_first_row = [0.0, 0.25, 0.75, 1.0]
    npt.assert_allclose(bilinear_upsample2x(Tensor(base[None, None])).data[0, 0, 0], expected_first_row)

    odd = rng.normal(size=(3, 5))
    npt.assert_allclose(bilinear_upsample2x(Tensor(odd[None, None])).data[0, 0], _bilinear_reference(odd, 6, 10))


def test_interpolation_rows_are_convex():
    for n_in, n_out in [(1, 2), (2, 4), (5, 3), (7, 7)]:
        m = interpolation_matrix(n_in, n_out)
        npt.assert_allclose(m.sum(axis=1), 1.0)
        assert (m >= 0).all()
    npt.assert_array_equal(interpolation_matrix(6, 6), np.eye(6))


def test_upsample_gradients(rng):
    x = parameter(rng.normal(size=(1, 2, 3, 3)))
    weights = rng.normal(size=(1, 2, 6, 6))
    report = check_gradients(lambda: (bilinear_upsample2x(x) * weights).sum(), {"x": x})
    assert report.passed(1e-4), report.errors


def test_resize_mask_nearest():
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2, :2] = True
    big = resize_mask(mask, 8, 8)
    assert big.dtype == bool
    assert big[:4, :4].all() and not big[4:, :].any() and not big[:, 4:].any()


def test_zero_head_gives_even_odds(rng):
    head = _conv(np.zeros((2, 4, 1, 1)))
    logits = pointwise_head(Tensor(rng.normal(size=(1, 4, 3, 3))), head)
    npt.assert_array_equal(logits.data, 0.0)
    npt.assert_allclose(softmax(logits, axis=1).data, 0.5)


def test_identity_head_passthrough(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    npt.assert_array_equal(pointwise_head(Tensor(x), _conv(np.eye(2)[:, :, None, None])).data, x)


def test_head_gradients(rng):
    x = parameter(rng.normal(size=(1, 3, 4, 4)))
    head = init_conv2d(rng, 3, 2, 1)
    weights = rng.normal(size=(1, 2, 4, 4))
    report = check_gradients(
        lambda: (pointwise_head(x, head) * weights).sum(), {"x": x, "kernel": head.kernel, "bias": head.bias}
    )
    assert report.passed(1e-4), report.errors


def _zero_all(node):
    for _, t in named_parameters(node):
        t.data[...] = 0.0


def test_zero_bottleneck_is_the_identity(rng):
    block = init_bottleneck(rng, 4, 7, 4, use_depthwise=True)
    _zero_all(block)
    x = rng.normal(size=(1, 4, 8, 8))
    npt.assert_array_equal(inverted_bottleneck(Tensor(x), block).data, x)


def test_bottleneck_preserves_shape(rng):
    block = init_bottleneck(rng, 16, 7, 4, use_depthwise=True)
    assert inverted_bottleneck(Tensor(rng.normal(size=(2, 16, 32, 32))), block).shape == (2, 16, 32, 32)


def test_bottleneck_channel_mismatch(rng):
    block = init_bottleneck(rng, 4, 3, 4, use_depthwise=True)
    with pytest.raises(ShapeError):
        inverted_bottleneck(Tensor(rng.normal(size=(1, 3, 8, 8))), block)


@pytest.mark.parametrize("use_depthwise", [True, False])
def test_bottleneck_gradients(rng, use_depthwise):
    x = parameter(rng.normal(size=(1, 2, 5, 5)))
    block = init_bottleneck(rng, 2, 3, 4, use_depthwise=use_depthwise)
    block.norm.scale.data[:] = rng.uniform(0.5, 1.5, size=8)
    block.norm.shift.data[:] = rng.normal(size=8)
    weights = rng.normal(size=(1, 2, 5, 5))
    tensors = {"x": x, **dict(named_parameters(block))}
    report = check_gradients(lambda: (inverted_bottleneck(x, block) * weights).sum(), tensors)
    assert report.passed(1e-4), report.errors
