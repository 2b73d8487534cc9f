"""Backend agreement: the compiled extension must match the NumPy fallback."""

import numpy as np
import pytest

from civiscan.kernels import NATIVE_AVAILABLE, get_backend

fb = get_backend("fallback")
needs_native = pytest.mark.skipif(not NATIVE_AVAILABLE, reason="compiled extension not built")


@needs_native
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_agreement(dtype, stride, pad):
    nt = get_backend("native")
    rng = np.random.default_rng(0)
    x = rng.random((3, 11, 9, 2)).astype(dtype)
    w = rng.random((3, 3, 2, 4)).astype(dtype)
    b = rng.random(4).astype(dtype)
    yf = fb.conv2d_forward(x, w, b, stride, pad)
    yn = nt.conv2d_forward(x, w, b, stride, pad)
    tol = 1e-12 if dtype == np.float64 else 1e-5
    np.testing.assert_allclose(yf, yn, rtol=tol, atol=tol)

    dout = rng.random(yf.shape).astype(dtype)
    gf = fb.conv2d_backward(x, w, stride, pad, dout)
    gn = nt.conv2d_backward(x, w, stride, pad, dout)
    for a, b_ in zip(gf, gn):
        np.testing.assert_allclose(a, b_, rtol=tol * 10, atol=tol * 10)


@needs_native
def test_maxpool_agreement_including_ties():
    nt = get_backend("native")
    rng = np.random.default_rng(1)
    x = rng.integers(0, 4, size=(2, 8, 8, 3)).astype(np.float32)  # many ties
    yf, af = fb.maxpool_forward(x, 2, 2)
    yn, an = nt.maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(yf, yn)
    np.testing.assert_array_equal(af, an)  # tie routing must match exactly
    dout = rng.random(yf.shape).astype(np.float32)
    np.testing.assert_array_equal(
        fb.maxpool_backward(dout, af, x.shape, 2, 2),
        nt.maxpool_backward(dout, an, x.shape, 2, 2),
    )


@needs_native
def test_blur_and_resize_agreement():
    nt = get_backend("native")
    rng = np.random.default_rng(2)
    img = rng.random((47, 31, 3))
    taps = np.exp(-np.arange(-4, 5) ** 2 / 4.0)
    taps /= taps.sum()
    np.testing.assert_allclose(fb.blur_separable(img, taps), nt.blur_separable(img, taps), atol=1e-12)
    np.testing.assert_allclose(fb.bilinear_resize(img, 64, 64), nt.bilinear_resize(img, 64, 64), atol=1e-12)
    np.testing.assert_allclose(fb.bilinear_resize(img, 13, 7), nt.bilinear_resize(img, 13, 7), atol=1e-12)


@needs_native
@pytest.mark.parametrize("density", [0.1, 0.5, 0.9])
def test_label_components_agreement(density):
    nt = get_backend("native")
    rng = np.random.default_rng(3)
    for _ in range(5):
        mask = rng.random((60, 45)) < density
        lf, nf = fb.label_components(mask)
        ln, nn = nt.label_components(mask)
        assert nf == nn
        np.testing.assert_array_equal(lf, ln)


def test_label_components_structure():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:3, 1:3] = True
    mask[5:7, 5:7] = True
    mask[0, 7] = True
    labels, count = fb.label_components(mask)
    assert count == 3
    # ids follow row-major order of each component's first pixel
    assert labels[0, 7] == 1
    assert labels[1, 1] == 2
    assert labels[5, 5] == 3


def test_label_components_diagonals_not_connected():
    mask = np.array([[1, 0], [0, 1]], dtype=bool)
    labels, count = fb.label_components(mask)
    assert count == 2
