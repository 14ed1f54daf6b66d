import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madstereo import autodiff as ad
from madstereo.autodiff import Parameter, ShapeError, Tensor


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def _param(rng, shape, owner=None):
    return Parameter(rng.standard_normal(shape), owner=owner)


def test_conv2d_identity_scale():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Parameter(np.full((1, 1, 1, 1), 2.0))
    b = Parameter(np.zeros(1))
    out = ad.conv2d(x, w, b)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_zero_weights_gives_bias():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 5, 7)).astype(np.float32))
    w = Parameter(np.zeros((4, 3, 3, 3)))
    b = Parameter(np.array([0.5, -1.0, 2.0, 3.0]))
    out = ad.conv2d(x, w, b, padding=1)
    for c, v in enumerate(b.data):
        assert np.all(out.data[:, c] == v)


@pytest.mark.parametrize("h,w,stride,dilation,padding", [
    (6, 6, 2, 1, 1), (7, 9, 2, 1, 1), (8, 8, 1, 2, 2), (10, 5, 3, 1, 0), (12, 12, 1, 4, 4),
])
def test_conv2d_output_arithmetic(h, w, stride, dilation, padding):
    x = Tensor(np.zeros((1, 2, h, w), dtype=np.float32))
    wt = Parameter(np.zeros((3, 2, 3, 3)))
    out = ad.conv2d(x, wt, None, stride, dilation, padding)
    expect = lambda s: (s + 2 * padding - dilation * 2 - 1) // stride + 1  # noqa: E731
    assert out.shape == (1, 3, expect(h), expect(w))


def test_conv2d_stride2_halves_even_dims():
    x = Tensor(np.zeros((1, 1, 24, 40), dtype=np.float32))
    out = ad.conv2d(x, Parameter(np.zeros((1, 1, 3, 3))), None, stride=2, padding=1)
    assert out.shape[2:] == (12, 20)


def test_conv2d_channel_mismatch_names_dimension():
    x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError, match="channel"):
        ad.conv2d(x, Parameter(np.zeros((1, 3, 3, 3))))


def test_conv2d_gradients(f64):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w, b = _param(rng, (3, 2, 3, 3)), _param(rng, (3,))
    err = ad.check_gradients(lambda: ad.conv2d(x, w, b, 2, 1, 1), [x], epsilon=1e-5)
    assert err < 1e-5


def test_conv2d_dilated_gradients(f64):
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 2, 9, 9)), requires_grad=True)
    w, b = _param(rng, (2, 2, 3, 3)), _param(rng, (2,))
    assert ad.check_gradients(lambda: ad.conv2d(x, w, b, 1, 3, 3), [x], epsilon=1e-5) < 1e-5


def test_linear_op_gradient_is_machine_precision(f64):
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)
    w, b = _param(rng, (2, 3, 1, 1)), _param(rng, (2,))
    assert ad.check_gradients(lambda: ad.conv2d(x, w, b), [x], epsilon=1e-5) < 1e-9


def test_leaky_relu_values():
    out = ad.leaky_relu(Tensor(np.array([-1.0, 2.0])), 0.2)
    np.testing.assert_allclose(out.data, [-0.2, 2.0])
    assert np.all(ad.leaky_relu(Tensor(np.zeros((1, 1, 2, 2))), 0.2).data == 0)


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError):
        ad.leaky_relu(Tensor(np.zeros(2)), 1.5)


def test_leaky_relu_gradients_away_from_kink(f64):
    rng = np.random.default_rng(4)
    data = rng.standard_normal((1, 2, 4, 4))
    data[np.abs(data) < 0.05] = 0.3
    x = Tensor(data, requires_grad=True)
    assert ad.check_gradients(lambda: ad.leaky_relu(x, 0.2), [x], epsilon=1e-6) < 1e-7


def test_bilinear_upsample_examples():
    row = ad.bilinear_upsample(Tensor(np.array([[[[0.0, 1.0]]]])), 2)
    np.testing.assert_allclose(row.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
    const = ad.bilinear_upsample(Tensor(np.full((1, 2, 3, 4), 0.7)), 4)
    assert const.shape == (1, 2, 12, 16)
    np.testing.assert_allclose(const.data, 0.7)


def test_bilinear_upsample_matches_direct_sampling():
    # independent per-pixel evaluation of the half-pixel convention
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 3, 5))
    out = ad.bilinear_upsample(Tensor(x), 2).data[0, 0]

    def sample(v, n):
        p = min(max((v + 0.5) / 2 - 0.5, 0.0), n - 1)
        i = min(int(np.floor(p)), n - 2)
        return i, p - i

    for i in range(6):
        for j in range(10):
            yi, fy = sample(i, 3)
            xj, fx = sample(j, 5)
            top = x[0, 0, yi, xj] * (1 - fx) + x[0, 0, yi, xj + 1] * fx
            bot = x[0, 0, yi + 1, xj] * (1 - fx) + x[0, 0, yi + 1, xj + 1] * fx
            assert out[i, j] == pytest.approx(top * (1 - fy) + bot * fy)


def test_bilinear_upsample_gradients(f64):
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 2, 3, 4)), requires_grad=True)
    assert ad.check_gradients(lambda: ad.bilinear_upsample(x, 2), [x], epsilon=1e-5) < 1e-5


def test_correlation_self_match_peaks_at_zero_shift():
    rng = np.random.default_rng(7)
    raw = rng.standard_normal((1, 8, 6, 10))
    # equal per-pixel norms make the self-product the unique maximum
    f = Tensor(raw / np.linalg.norm(raw, axis=1, keepdims=True))
    out = ad.correlation1d(f, f, 2).data
    interior = out[:, :, :, 2:-2]
    assert np.all(interior.argmax(axis=1) == 2)


def test_correlation_zero_left():
    rng = np.random.default_rng(8)
    out = ad.correlation1d(Tensor(np.zeros((1, 3, 4, 5))), Tensor(rng.standard_normal((1, 3, 4, 5))), 2)
    assert np.all(out.data == 0)


def test_correlation_brute_force_table():
    left = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
    right = np.array([5.0, 6.0, 7.0, 8.0]).reshape(1, 1, 1, 4)
    out = ad.correlation1d(Tensor(left), Tensor(right), 1).data[0, :, 0]
    expected = np.zeros((3, 4))
    for d, s in enumerate((-1, 0, 1)):
        for x in range(4):
            if 0 <= x + s < 4:
                expected[d, x] = left[0, 0, 0, x] * right[0, 0, 0, x + s]
    np.testing.assert_allclose(out, expected)
    np.testing.assert_allclose(expected, [[0, 10, 18, 28], [5, 12, 21, 32], [6, 14, 24, 0]])


def test_correlation_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.correlation1d(Tensor(np.zeros((1, 2, 3, 4))), Tensor(np.zeros((1, 2, 3, 5))), 2)


def test_correlation_gradients(f64):
    rng = np.random.default_rng(9)
    a = Tensor(rng.standard_normal((1, 3, 4, 6)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 4, 6)), requires_grad=True)
    assert ad.check_gradients(lambda: ad.correlation1d(a, b, 2), [a, b], epsilon=1e-5) < 1e-5


def test_warp_identity_and_integer_shift():
    rng = np.random.default_rng(10)
    src = rng.random((1, 3, 4, 8))
    same = ad.warp_horizontal(Tensor(src), Tensor(np.zeros((1, 1, 4, 8))))
    np.testing.assert_array_equal(same.data, src)
    ramp = np.tile(np.arange(8.0), (1, 1, 3, 1))
    out = ad.warp_horizontal(Tensor(ramp), Tensor(np.ones((1, 1, 3, 8)))).data
    np.testing.assert_allclose(out[..., 1:], ramp[..., 1:] - 1)
    assert np.all(out[..., 0] == 0)  # clamped to the border


def test_warp_gradients_fractional(f64):
    rng = np.random.default_rng(11)
    src = Tensor(rng.standard_normal((1, 2, 3, 8)), requires_grad=True)
    # fractional parts kept away from cell boundaries, samples inside the image
    disp = Tensor((rng.integers(0, 4, (1, 1, 3, 8)) + rng.uniform(0.2, 0.8, (1, 1, 3, 8)))
                  * (np.arange(8) >= 4), requires_grad=True)
    disp.data[..., :4] = -rng.uniform(0.2, 0.8, (1, 1, 3, 4))
    err = ad.check_gradients(lambda: ad.warp_horizontal(src, disp), [src, disp], epsilon=1e-6)
    assert err < 1e-5


def test_box_filter_gradients(f64):
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((1, 2, 5, 6)), requires_grad=True)
    assert ad.check_gradients(lambda: ad.box_filter(x, 3), [x], epsilon=1e-5) < 1e-5


def test_elementwise_gradients(f64):
    rng = np.random.default_rng(13)
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(1, 2, (1, 2, 3, 3)), requires_grad=True)

    def op():
        return ad.channel_mean(ad.divide(a * b - 0.5 * a, b + 1.0)) + ad.mean(ad.absolute(a + 3.0))

    assert ad.check_gradients(op, [a, b], epsilon=1e-5) < 1e-5


def test_check_gradients_rejects_float32():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        ad.check_gradients(lambda: ad.leaky_relu(x), [x])


def test_check_gradients_flags_non_finite(f64):
    x = Tensor(np.array([[[[1.0, 2.0]]]]), requires_grad=True)

    def bad():
        return ad.Tensor(x.data * 2, (x,), lambda g, needs: (g * np.inf,), "bad")

    assert ad.check_gradients(bad, [x], epsilon=1e-5) == np.inf


def test_check_gradients_detects_wrong_backward(f64):
    x = Tensor(np.array([[[[1.0, 2.0]]]]), requires_grad=True)

    def wrong():
        return ad.Tensor(x.data * 2, (x,), lambda g, needs: (g * 3.0,), "wrong")

    assert ad.check_gradients(wrong, [x], epsilon=1e-5) > 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_is_linear_in_upstream(seed):
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        w, b = _param(rng, (3, 2, 3, 3)), _param(rng, (3,))
        d = Tensor(rng.uniform(0.1, 1.9, (1, 1, 3, 3)), requires_grad=True)

        def run(g):
            for t in (w, b, d):
                t.grad = np.zeros_like(t.data)
            y = ad.leaky_relu(ad.conv2d(x, w, b, stride=2, padding=1), 0.2)
            ad.backward(ad.warp_horizontal(y, d), g)
            return [t.grad.copy() for t in (w, b, d)]

        out_shape = (1, 3, 3, 3)
        g1, g2 = rng.standard_normal(out_shape), rng.standard_normal(out_shape)
        for s, a1, a2 in zip(run(g1 + g2), run(g1), run(g2)):
            np.testing.assert_allclose(s, a1 + a2, rtol=1e-12, atol=1e-12)


def test_scoped_backward_leaves_other_scopes_untouched():
    rng = np.random.default_rng(14)
    w1 = Parameter(rng.standard_normal((2, 3, 3, 3)), owner="a")
    w2 = Parameter(rng.standard_normal((2, 2, 3, 3)), owner="b")
    w2.grad[...] = 7.0
    before = w2.grad.copy()
    x = Tensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32))
    with ad.node_scope("a"):
        h = ad.conv2d(x, w1, padding=1)
    with ad.node_scope("b"):
        y = ad.conv2d(h, w2, padding=1)
    ad.backward(ad.mean(y), targets=[w1], tags={"a"})
    # the only route to w1 passes through scope "b", which is cut
    assert np.all(w1.grad == 0)
    assert np.array_equal(w2.grad, before)
    ad.backward(ad.mean(y), targets=[w1], tags={"a", "b"})
    assert np.any(w1.grad != 0)
    assert np.array_equal(w2.grad, before)


def test_float32_default_and_finiteness():
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    w = Parameter(rng.standard_normal((4, 3, 3, 3)))
    assert w.data.dtype == np.float32
    y = ad.bilinear_upsample(ad.leaky_relu(ad.conv2d(x, w, padding=1)), 2)
    assert y.data.dtype == np.float32
    assert np.all(np.isfinite(y.data))


def test_warp_rejects_non_finite_disparity():
    src = Tensor(np.zeros((1, 1, 2, 4)))
    with pytest.raises(FloatingPointError):
        ad.warp_horizontal(src, Tensor(np.full((1, 1, 2, 4), np.nan)))
