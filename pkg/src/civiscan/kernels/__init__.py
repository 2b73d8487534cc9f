"""Numeric kernel backend selection.

The hot loops (convolution, pooling, blur, resampling, component labeling)
exist twice: a Cython extension (`civiscan.kernels._native`) and a NumPy
fallback with identical semantics. Selection happens once at import:

- default ("auto"): each op binds to the faster implementation measured for
  this codebase — convolution stays on the NumPy path (its shift-and-matmul
  formulation rides BLAS), everything else uses the compiled extension when
  built (`civiscan bench kernels` reproduces the comparison);
- CIVISCAN_KERNELS=fallback forces pure NumPy wholesale;
- CIVISCAN_KERNELS=native forces the extension wholesale (raises if absent).
"""

from __future__ import annotations

import os

from . import fallback as _fallback

try:
    from . import _native as _native
except ImportError:
    _native = None

_forced = os.environ.get("CIVISCAN_KERNELS", "").strip().lower()
if _forced == "fallback":
    _conv_impl = _other_impl = _fallback
    BACKEND = "fallback"
elif _forced == "native":
    if _native is None:
        raise ImportError(
            "CIVISCAN_KERNELS=native requested but the compiled extension is "
            "not built; run `python setup.py build_ext --inplace` or reinstall"
        )
    _conv_impl = _other_impl = _native
    BACKEND = "native"
elif _forced:
    raise ValueError(f"unknown CIVISCAN_KERNELS value: {_forced!r}")
else:
    _conv_impl = _fallback
    _other_impl = _native if _native is not None else _fallback
    BACKEND = "auto" if _native is not None else "fallback"

NATIVE_AVAILABLE = _native is not None

conv2d_forward = _conv_impl.conv2d_forward
conv2d_backward = _conv_impl.conv2d_backward
maxpool_forward = _other_impl.maxpool_forward
maxpool_backward = _other_impl.maxpool_backward
blur_separable = _other_impl.blur_separable
bilinear_resize = _other_impl.bilinear_resize
label_components = _other_impl.label_components


def get_backend(name: str):
    """Return the kernel module for `name` ("native" or "fallback")."""
    if name == "fallback":
        return _fallback
    if name == "native":
        if _native is None:
            raise ImportError("compiled kernel extension is not built")
        return _native
    raise ValueError(f"unknown backend: {name!r}")
