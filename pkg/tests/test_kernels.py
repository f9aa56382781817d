import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volperceiver import kernels
from volperceiver.tensor import Tensor, backward, default_dtype, gradcheck

from oracles import conv_naive, conv_transpose_naive, maxpool_naive


@st.composite
def conv_case(draw, nd):
    b = draw(st.integers(1, 2))
    c = draw(st.integers(1, 3))
    o = draw(st.integers(1, 3))
    k = tuple(draw(st.integers(1, 3)) for _ in range(nd))
    s = tuple(draw(st.integers(1, 2)) for _ in range(nd))
    p = tuple(draw(st.integers(0, kk - 1)) for kk in k)
    extent = tuple(draw(st.integers(max(kk - 2 * pp, 1), 6)) for kk, pp in zip(k, p))
    seed = draw(st.integers(0, 2 ** 16))
    return (b, c, o) + (k, s, p, extent, seed)


@settings(max_examples=25, deadline=None)
@given(conv_case(2))
def test_conv2d_matches_naive(case):
    b, c, o, k, s, p, extent, seed = case
    rng = np.random.default_rng(seed)
    x, w, bias = rng.normal(size=(b, c) + extent), rng.normal(size=(o, c) + k), rng.normal(size=o)
    got = kernels.conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=s, padding=p).data
    np.testing.assert_allclose(got, conv_naive(x, w, bias, s, p), rtol=0, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(conv_case(3))
def test_conv3d_matches_naive(case):
    b, c, o, k, s, p, extent, seed = case
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(b, c) + extent), rng.normal(size=(o, c) + k)
    got = kernels.conv3d(Tensor(x), Tensor(w), None, stride=s, padding=p).data
    np.testing.assert_allclose(got, conv_naive(x, w, None, s, p), rtol=0, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(conv_case(3))
def test_conv3d_transpose_matches_naive(case):
    b, c, o, k, s, p, extent, seed = case
    rng = np.random.default_rng(seed)
    x, w, bias = rng.normal(size=(b, c) + extent), rng.normal(size=(c, o) + k), rng.normal(size=o)
    if any((n - 1) * ss - 2 * pp + kk < 1 for n, ss, pp, kk in zip(extent, s, p, k)):
        with pytest.raises(ValueError):
            kernels.conv3d_transpose(Tensor(x), Tensor(w), Tensor(bias), stride=s, padding=p)
        return
    got = kernels.conv3d_transpose(Tensor(x), Tensor(w), Tensor(bias), stride=s, padding=p).data
    np.testing.assert_allclose(got, conv_transpose_naive(x, w, bias, s, p), rtol=0, atol=1e-12)


def test_conv2d_transpose_matches_naive():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 2, 2, 2))
    got = kernels.conv2d_transpose(Tensor(x), Tensor(w), stride=2).data
    np.testing.assert_allclose(got, conv_transpose_naive(x, w, None, 2, 0), atol=1e-12)
    assert got.shape == (2, 2, 8, 10)


def test_unbatched_input_matches_batched():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    single = kernels.conv2d(Tensor(x), Tensor(w), padding=1).data
    batched = kernels.conv2d(Tensor(x[None]), Tensor(w), padding=1).data[0]
    np.testing.assert_array_equal(single, batched)


def test_unet3d_upsampling_keeps_depth():
    # kernel (3, 2, 2), stride (1, 2, 2), padding (1, 0, 0): D fixed, H and W doubled
    x = Tensor(np.ones((1, 4, 5, 8, 8)))
    w = Tensor(np.ones((4, 2, 3, 2, 2)))
    assert kernels.conv3d_transpose(x, w, stride=(1, 2, 2), padding=(1, 0, 0)).shape == (1, 2, 5, 16, 16)


@pytest.mark.parametrize("extent,stride,padding", [((5, 7, 7), (1, 2, 2), 1), ((4, 6, 5), 1, 1),
                                                   ((3, 7, 5), (2, 2, 2), 0)])
def test_transpose_is_adjoint_of_conv(extent, stride, padding):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3) + extent)
    w = rng.normal(size=(4, 3, 3, 3, 3))
    y = kernels.conv3d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    z = rng.normal(size=y.shape)
    xt = kernels.conv3d_transpose(Tensor(z), Tensor(w), stride=stride, padding=padding).data
    assert xt.shape == x.shape
    lhs, rhs = np.vdot(y, z), np.vdot(x, xt)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("nd,kernel", [(2, (2, 2)), (3, (1, 2, 2)), (3, (2, 2, 2))])
def test_maxpool_matches_naive(nd, kernel):
    rng = np.random.default_rng(nd)
    x = rng.normal(size=(2, 3) + tuple(2 * k * 2 for k in kernel))
    fn = kernels.maxpool2d if nd == 2 else kernels.maxpool3d
    np.testing.assert_array_equal(fn(Tensor(x), kernel).data, maxpool_naive(x, kernel))


def test_maxpool_tie_routes_gradient_to_first_max():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    out = kernels.maxpool2d(x)
    backward(out.sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_rejects_overlap_and_ragged_extents():
    with pytest.raises(ValueError):
        kernels.maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), (2, 2), stride=1)
    with pytest.raises(ValueError):
        kernels.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channels"):
        kernels.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 4, 3, 3))))
    with pytest.raises(ValueError, match="rank"):
        kernels.conv3d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3, 3))))
    with pytest.raises(ValueError, match="smaller than kernel"):
        kernels.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("wrt", ["x", "w", "b"])
def test_conv3d_transpose_gradcheck(wrt):
    rng = np.random.default_rng(7)
    x0, w0, b0 = rng.normal(size=(2, 2, 3, 2, 2)), rng.normal(size=(2, 3, 3, 2, 2)), rng.normal(size=3)
    g = rng.normal(size=(2, 3, 3, 4, 4))
    kw = dict(stride=(1, 2, 2), padding=(1, 0, 0))

    def f(t):
        args = {"x": (t, Tensor(w0), Tensor(b0)), "w": (Tensor(x0), t, Tensor(b0)),
                "b": (Tensor(x0), Tensor(w0), t)}[wrt]
        return (kernels.conv3d_transpose(*args, **kw) * Tensor(g)).sum()

    with default_dtype(np.float64):
        assert gradcheck(f, {"x": x0, "w": w0, "b": b0}[wrt]) < 1e-6


def test_float32_path_stays_float32():
    x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32))
    w = Tensor(np.ones((3, 2, 3, 3), dtype=np.float32))
    assert kernels.conv2d(x, w, padding=1).dtype == np.float32
