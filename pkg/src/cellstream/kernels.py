"""Hot pixel kernels with a compiled backend and a numpy fallback.

The compiled extension ``cellstream._core`` is used when it was built;
otherwise, or when ``CELLSTREAM_PURE_PYTHON=1`` is set, the numpy twins
from ``cellstream._pykernels`` are used. Both produce identical bytes.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CELLSTREAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # noqa: F811
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _pykernels


def backends():
    """Available implementations, keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _core
        out["compiled"] = _core
    except ImportError:
        pass
    return out


def render_discs(xs, ys, radii, colors, alphas, background, height, width, impl=None):
    """Draw filled discs in order with alpha blending; returns uint8 [3, H, W].

    A pixel belongs to a disc when its centre ``(col + 0.5, row + 0.5)``
    lies within ``radius`` of ``(x, y)``. Blending is done in float64 and
    rounded half up once at the end.
    """
    impl = impl or _impl
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    return impl.render_discs(xs, ys, radii, colors, alphas, background, int(height), int(width))


def box_blur(image, b, impl=None):
    impl = impl or _impl
    image = np.ascontiguousarray(image, dtype=np.uint8)
    return impl.box_blur(image, int(b))


def resample_bilinear(planes, iy0, iy1, wy, ix0, ix1, wx, impl=None):
    """Bilinear gather on a stack of uint8 planes [P, H, W] -> float32 [P, oh, ow]."""
    impl = impl or _impl
    planes = np.ascontiguousarray(planes, dtype=np.uint8)
    wy = np.ascontiguousarray(wy, dtype=np.float64)
    wx = np.ascontiguousarray(wx, dtype=np.float64)
    return impl.resample_bilinear(
        planes,
        np.ascontiguousarray(iy0, dtype=np.int_), np.ascontiguousarray(iy1, dtype=np.int_),
        wy, 1.0 - wy,
        np.ascontiguousarray(ix0, dtype=np.int_), np.ascontiguousarray(ix1, dtype=np.int_),
        wx, 1.0 - wx,
    )
