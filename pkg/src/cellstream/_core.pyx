# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pixel kernels.

Every routine here has a numpy twin in ``_pykernels`` that produces
bit-identical output; ``cellstream.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil

cnp.import_array()


def render_discs(const double[::1] xs, const double[::1] ys, const double[::1] radii,
                 const double[:, ::1] colors, const double[::1] alphas,
                 const double[::1] background, int height, int width):
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t k, r, c, ch
    cdef Py_ssize_t r0, r1, c0, c1, reach
    cdef double x, y, rad, rr, dx, dy, ia
    cdef double ac0, ac1, ac2
    buf_arr = np.empty((3, height, width), dtype=np.float64)
    cdef double[:, :, ::1] buf = buf_arr
    for ch in range(3):
        buf[ch, :, :] = background[ch]

    for k in range(n):
        x = xs[k]
        y = ys[k]
        rad = radii[k]
        rr = rad * rad
        reach = <Py_ssize_t>ceil(rad) + 1
        r0 = <Py_ssize_t>floor(y) - reach
        r1 = <Py_ssize_t>floor(y) + reach
        c0 = <Py_ssize_t>floor(x) - reach
        c1 = <Py_ssize_t>floor(x) + reach
        if r0 < 0:
            r0 = 0
        if c0 < 0:
            c0 = 0
        if r1 > height - 1:
            r1 = height - 1
        if c1 > width - 1:
            c1 = width - 1
        if r0 > r1 or c0 > c1:
            continue
        ia = 1.0 - alphas[k]
        ac0 = alphas[k] * colors[k, 0]
        ac1 = alphas[k] * colors[k, 1]
        ac2 = alphas[k] * colors[k, 2]
        for r in range(r0, r1 + 1):
            dy = (r + 0.5) - y
            for c in range(c0, c1 + 1):
                dx = (c + 0.5) - x
                if dx * dx + dy * dy <= rr:
                    buf[0, r, c] = ac0 + ia * buf[0, r, c]
                    buf[1, r, c] = ac1 + ia * buf[1, r, c]
                    buf[2, r, c] = ac2 + ia * buf[2, r, c]

    out_arr = np.empty((3, height, width), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef double v
    for ch in range(3):
        for r in range(height):
            for c in range(width):
                v = floor(buf[ch, r, c] + 0.5)
                if v < 0.0:
                    v = 0.0
                elif v > 255.0:
                    v = 255.0
                out[ch, r, c] = <cnp.uint8_t>v
    return out_arr


def box_blur(const cnp.uint8_t[:, :, ::1] image, int b):
    """Clamp-to-edge box mean over (2b+1)^2, rounded half up, exact integers."""
    cdef Py_ssize_t nch = image.shape[0]
    cdef Py_ssize_t h = image.shape[1]
    cdef Py_ssize_t w = image.shape[2]
    cdef Py_ssize_t ch, r, c, j, src
    cdef long long acc, area2
    out_arr = np.empty((nch, h, w), dtype=np.uint8)
    if b == 0:
        out_arr[...] = image
        return out_arr
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    rows_arr = np.empty((h, w), dtype=np.int64)
    cdef long long[:, ::1] rows = rows_arr
    area2 = 2 * (2 * b + 1) * (2 * b + 1)

    for ch in range(nch):
        # horizontal pass: window sums with clamped indices
        for r in range(h):
            acc = 0
            for j in range(-b, b + 1):
                src = j
                if src < 0:
                    src = 0
                elif src > w - 1:
                    src = w - 1
                acc += image[ch, r, src]
            rows[r, 0] = acc
            for c in range(1, w):
                src = c + b
                if src > w - 1:
                    src = w - 1
                acc += image[ch, r, src]
                src = c - b - 1
                if src < 0:
                    src = 0
                acc -= image[ch, r, src]
                rows[r, c] = acc
        # vertical pass
        for c in range(w):
            acc = 0
            for j in range(-b, b + 1):
                src = j
                if src < 0:
                    src = 0
                elif src > h - 1:
                    src = h - 1
                acc += rows[src, c]
            out[ch, 0, c] = <cnp.uint8_t>((2 * acc + area2 // 2) // area2)
            for r in range(1, h):
                src = r + b
                if src > h - 1:
                    src = h - 1
                acc += rows[src, c]
                src = r - b - 1
                if src < 0:
                    src = 0
                acc -= rows[src, c]
                out[ch, r, c] = <cnp.uint8_t>((2 * acc + area2 // 2) // area2)
    return out_arr


def resample_bilinear(const cnp.uint8_t[:, :, ::1] planes,
                      const long[::1] iy0, const long[::1] iy1, const double[::1] wy, const double[::1] vy,
                      const long[::1] ix0, const long[::1] ix1, const double[::1] wx, const double[::1] vx):
    """Gather-and-blend with precomputed indices and weights (``v = 1 - w``)."""
    cdef Py_ssize_t n = planes.shape[0]
    cdef Py_ssize_t oh = iy0.shape[0]
    cdef Py_ssize_t ow = ix0.shape[0]
    cdef Py_ssize_t p, i, j
    cdef double top, bot
    out_arr = np.empty((n, oh, ow), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    for p in range(n):
        for i in range(oh):
            for j in range(ow):
                top = vx[j] * planes[p, iy0[i], ix0[j]] + wx[j] * planes[p, iy0[i], ix1[j]]
                bot = vx[j] * planes[p, iy1[i], ix0[j]] + wx[j] * planes[p, iy1[i], ix1[j]]
                out[p, i, j] = <float>(vy[i] * top + wy[i] * bot)
    return out_arr
