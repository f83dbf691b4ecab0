import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from codnet import tensor as T
from codnet.tensor import ConvSpec, ResizeSpec, ShapeError


def _case(rng, n, cin, cout, h, w, kh, kw, dilation=1, stride=1, padding=None, dtype=np.float64):
    if padding is None:
        padding = (T.same_padding(kh, dilation), T.same_padding(kw, dilation))
    spec = ConvSpec(kh, kw, cin, cout, dilation=dilation, stride=stride, padding=padding)
    x = rng.standard_normal((n, cin, h, w)).astype(dtype)
    wts = rng.standard_normal(spec.weight_shape).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    return x, wts, b, spec


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30)


# -- conv2d -----------------------------------------------------------------


def test_identity_kernel_returns_input(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    spec = ConvSpec(1, 1, 1, 1)
    out = T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), spec)
    np.testing.assert_array_equal(out, x)


def test_all_ones_same_padding_counts_neighbours():
    spec = ConvSpec.same(3, 3, 1, 1)
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), spec)[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_dilated_taps_land_two_apart():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    spec = ConvSpec.same(3, 3, 1, 1, dilation=2)
    out = T.conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1), spec)[0, 0]
    ys, xs = np.nonzero(out)
    assert sorted(set(ys)) == [1, 3, 5] and sorted(set(xs)) == [1, 3, 5]
    assert ys.max() - ys.min() + 1 == 5  # effective span d*(k-1)+1


def test_zero_kernel_gives_bias(rng):
    x, _, b, spec = _case(rng, 2, 3, 4, 6, 6, 3, 3)
    out = T.conv2d(x, np.zeros(spec.weight_shape), b, spec)
    np.testing.assert_array_equal(out, np.broadcast_to(b[None, :, None, None], out.shape))


def test_asymmetric_kernel_matches_oracle(rng):
    x, wts, b, spec = _case(rng, 2, 3, 4, 8, 8, 1, 5)
    assert _rel(T.conv2d(x, wts, b, spec), T.conv2d_oracle(x, wts, b, spec)) < 1e-12


@pytest.mark.parametrize(
    "kh,kw,dilation,stride,padding",
    [
        (3, 3, 1, 1, None),
        (1, 5, 1, 1, None),
        (5, 1, 1, 1, None),
        (1, 7, 1, 1, None),
        (7, 1, 1, 1, None),
        (3, 3, 5, 1, None),
        (3, 3, 7, 1, None),
        (4, 4, 1, 4, (0, 0)),
        (3, 3, 1, 2, (1, 1)),
        (2, 3, 2, 3, (2, 0)),
    ],
)
def test_fast_paths_match_oracle(rng, kh, kw, dilation, stride, padding):
    x, wts, b, spec = _case(rng, 2, 3, 5, 17, 16, kh, kw, dilation, stride, padding)
    ref = T.conv2d_oracle(x, wts, b, spec)
    assert _rel(T.conv2d(x, wts, b, spec), ref) < 1e-12
    assert _rel(T.conv2d_im2col(x, wts, b, spec), ref) < 1e-12
    x32, w32, b32 = x.astype(np.float32), wts.astype(np.float32), b.astype(np.float32)
    assert _rel(T.conv2d_im2col(x32, w32, b32, spec), T.conv2d(x32, w32, b32, spec)) < 1e-5


@pytest.mark.parametrize("threads", [1, 2, 3, 8])
def test_conv_is_bit_identical_across_thread_counts(rng, threads):
    x, wts, b, spec = _case(rng, 1, 4, 7, 12, 12, 3, 3, dtype=np.float32)
    np.testing.assert_array_equal(T.conv2d(x, wts, b, spec, threads=threads), T.conv2d(x, wts, b, spec, threads=1))


def test_conv_rejects_channel_mismatch(rng):
    x, wts, b, spec = _case(rng, 1, 3, 2, 5, 5, 3, 3)
    with pytest.raises(ShapeError) as err:
        T.conv2d(x[:, :2], wts, b, spec)
    assert err.value.axis == "c"


def test_conv_rejects_empty_output():
    spec = ConvSpec(5, 5, 1, 1)
    with pytest.raises(ShapeError) as err:
        T.conv2d(np.zeros((1, 1, 3, 8)), np.zeros((1, 1, 5, 5)), None, spec)
    assert err.value.axis == "h"


def test_same_padding_requires_even_span():
    assert T.same_padding(3, 5) == 5
    assert T.same_padding(7, 1) == 3
    with pytest.raises(ValueError):
        T.same_padding(4, 1)


@given(
    k=st.sampled_from([1, 3, 5, 7]),
    dilation=st.integers(1, 7),
    h=st.integers(1, 12),
    w=st.integers(1, 12),
)
def test_same_padding_preserves_size(k, dilation, h, w):
    spec = ConvSpec.same(k, k, 1, 1, dilation=dilation)
    assert spec.output_size(h, w) == (h, w)


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, scale):
    rng = np.random.default_rng(seed)
    x, wts, _, spec = _case(rng, 1, 2, 2, 6, 5, 3, 1)
    y = rng.standard_normal(x.shape)
    lhs = T.conv2d(scale * x + y, wts, None, spec)
    rhs = scale * T.conv2d(x, wts, None, spec) + T.conv2d(y, wts, None, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# -- elementwise and reductions --------------------------------------------


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    assert T.sigmoid(np.array(0.0)) == 0.5
    assert T.sigmoid(np.array(1.0)) == pytest.approx(0.7310585786300049, abs=1e-15)


@given(st.lists(st.floats(-800, 800), min_size=1, max_size=20))
def test_sigmoid_stays_in_closed_unit_interval_and_finite(values):
    out = T.sigmoid(np.array(values))
    assert np.all(np.isfinite(out)) and np.all((out >= 0) & (out <= 1))


def test_sigmoid_open_interval_for_moderate_inputs(rng):
    out = T.sigmoid(rng.uniform(-30, 30, 1000))
    assert np.all((out > 0) & (out < 1))


def test_softmax_cases():
    np.testing.assert_allclose(T.spatial_softmax(np.full((1, 1, 4, 4), 3.0)), 1 / 16)
    m = np.zeros((1, 1, 2, 2))
    m[0, 0, 1, 0] = 1000
    out = T.spatial_softmax(m)
    assert out[0, 0, 1, 0] == pytest.approx(1.0) and out.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(T.spatial_softmax(np.array([[[[0.0, math.log(2)]]]]))[0, 0, 0], [1 / 3, 2 / 3])
    with pytest.raises(ShapeError):
        T.spatial_softmax(np.zeros((1, 2, 2, 2)))


@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), h=st.integers(1, 9), w=st.integers(1, 9))
def test_softmax_sums_to_one_per_sample(seed, n, h, w):
    m = np.random.default_rng(seed).normal(0, 20, (n, 1, h, w))
    np.testing.assert_allclose(T.spatial_softmax(m).sum(axis=(1, 2, 3)), 1.0, atol=1e-6)


def test_channel_reductions(rng):
    x = np.array([1.0, 3.0, 2.0]).reshape(1, 3, 1, 1)
    assert T.channel_max(x).item() == 3 and T.channel_mean(x).item() == 2
    x = rng.standard_normal((1, 8, 4, 4))
    mx, mn = T.channel_max(x), T.channel_mean(x)
    for y in range(4):
        for xx in range(4):
            vals = [x[0, c, y, xx] for c in range(8)]
            assert mx[0, 0, y, xx] == max(vals)
            assert mn[0, 0, y, xx] == pytest.approx(sum(vals) / 8)
    assert np.all(mn <= mx)
    single = rng.standard_normal((1, 1, 3, 3))
    copy = T.channel_max(single)
    assert copy is not single and np.array_equal(copy, single)


def test_hadamard_add_concat(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(T.hadamard(x, np.ones_like(x)), x)
    np.testing.assert_array_equal(T.add(x, np.zeros_like(x)), x)
    np.testing.assert_array_equal(T.hadamard(np.array([2.0, 3.0]).reshape(1, 2, 1, 1), np.array([4.0, 5.0]).reshape(1, 2, 1, 1)).ravel(), [8, 15])
    with pytest.raises(ShapeError):
        T.add(x, x[:, :1])
    y = rng.standard_normal((1, 1, 3, 3))
    cat = T.concat_channels(x, y)
    assert cat.shape == (1, 3, 3, 3)
    np.testing.assert_array_equal(cat[:, :2], x)
    np.testing.assert_array_equal(cat[:, 2:], y)
    with pytest.raises(ShapeError):
        T.concat_channels(x, np.zeros((1, 0, 3, 3)))
    with pytest.raises(ShapeError) as err:
        T.concat_channels(x, np.zeros((1, 1, 3, 4)))
    assert err.value.axis == "w"


def test_mul_map_broadcasts_over_channels(rng):
    m = rng.standard_normal((2, 1, 3, 4))
    x = rng.standard_normal((2, 5, 3, 4))
    np.testing.assert_array_equal(T.mul_map(m, x), m * x)


def test_batch_norm_inference_and_training(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 3 + 1
    g, b = np.ones(3), np.zeros(3)
    np.testing.assert_allclose(T.batch_norm(x, g, b, np.zeros(3), np.ones(3), eps=0.0), x)
    out = T.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


# -- resize -----------------------------------------------------------------


def test_half_pixel_upsample_of_ramp():
    x = np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = T.bilinear_resize(x, ResizeSpec(4, 4))[0, 0]
    for row in out:
        np.testing.assert_allclose(row, [0, 0.25, 0.75, 1])


def test_identity_resize_is_bit_identical_copy(rng):
    x = rng.standard_normal((1, 2, 5, 7)).astype(np.float32)
    out = T.bilinear_resize(x, ResizeSpec(5, 7))
    assert out is not x and out.tobytes() == x.tobytes()


@given(
    value=st.floats(-100, 100),
    src=st.tuples(st.integers(1, 9), st.integers(1, 9)),
    dst=st.tuples(st.integers(1, 20), st.integers(1, 20)),
)
def test_resize_preserves_constants(value, src, dst):
    x = np.full((1, 2) + src, value)
    np.testing.assert_allclose(T.resize_to(x, *dst), value, rtol=1e-12, atol=1e-12)


@given(src=st.integers(1, 12), dst=st.integers(1, 24))
def test_resize_matrix_rows_are_convex_weights(src, dst):
    mat = T.resize_matrix(src, dst)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0)
    assert np.all(mat >= 0)


def test_resize_spec_validation():
    with pytest.raises(ValueError):
        ResizeSpec(0, 3)
    with pytest.raises(ValueError):
        ResizeSpec(3, 3, mode="nearest")


def test_thread_setting_round_trip():
    before = T.get_num_threads()
    try:
        T.set_num_threads(3)
        assert T.get_num_threads() == 3
        with pytest.raises(ValueError):
            T.set_num_threads(0)
    finally:
        T.set_num_threads(before)
