"""Pure-numpy versions of the compiled kernels in ``_core``.

The float operations are ordered exactly as in the compiled code so both
paths agree bit for bit.
"""

import numpy as np


def _runs(colors, alphas):
    """Split draw order into maximal runs sharing one colour and alpha."""
    n = len(alphas)
    if n == 0:
        return []
    key = np.concatenate([colors, alphas[:, None]], axis=1)
    change = np.any(key[1:] != key[:-1], axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
    ends = np.concatenate([starts[1:], [n]])
    return list(zip(starts.tolist(), ends.tolist()))


def _coverage(xs, ys, radii, height, width):
    """Per-pixel count of discs covering each pixel centre."""
    counts = np.zeros(height * width, dtype=np.int64)
    if len(xs) == 0:
        return counts.reshape(height, width)
    # group by reach so each group shares one offset window
    reach = np.ceil(radii).astype(np.int64) + 1
    for rc in np.unique(reach):
        sel = reach == rc
        x, y, rad = xs[sel], ys[sel], radii[sel]
        off = np.arange(-rc, rc + 1)
        rows = np.floor(y).astype(np.int64)[:, None, None] + off[None, :, None]
        cols = np.floor(x).astype(np.int64)[:, None, None] + off[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        dy = (rows + 0.5) - y[:, None, None]
        dx = (cols + 0.5) - x[:, None, None]
        hit = (dx * dx + dy * dy <= (rad * rad)[:, None, None])
        hit &= (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        flat = rows[hit] * width + cols[hit]
        counts += np.bincount(flat, minlength=height * width)
    return counts.reshape(height, width)


def render_discs(xs, ys, radii, colors, alphas, background, height, width):
    buf = np.empty((3, height, width), dtype=np.float64)
    buf[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    for start, end in _runs(colors, alphas):
        cover = _coverage(xs[start:end], ys[start:end], radii[start:end], height, width)
        a = alphas[start]
        ia = 1.0 - a
        ac = a * colors[start]
        kmax = int(cover.max()) if cover.size else 0
        # per-pixel blend order is irrelevant inside a run: every step is the same map
        for k in range(1, kmax + 1):
            mask = cover >= k
            for ch in range(3):
                plane = buf[ch]
                plane[mask] = ac[ch] + ia * plane[mask]
    return np.clip(np.floor(buf + 0.5), 0.0, 255.0).astype(np.uint8)


def box_blur(image, b):
    image = np.asarray(image, dtype=np.uint8)
    if b == 0:
        return image.copy()
    n = 2 * b + 1
    padded = np.pad(image.astype(np.int64), ((0, 0), (b, b), (b, b)), mode="edge")
    csum = np.zeros((padded.shape[0], padded.shape[1] + 1, padded.shape[2] + 1), dtype=np.int64)
    csum[:, 1:, 1:] = padded.cumsum(axis=1).cumsum(axis=2)
    h, w = image.shape[1:]
    total = csum[:, n:n + h, n:n + w] - csum[:, :h, n:n + w] - csum[:, n:n + h, :w] + csum[:, :h, :w]
    area2 = 2 * n * n
    return ((2 * total + area2 // 2) // area2).astype(np.uint8)


def resample_bilinear(planes, iy0, iy1, wy, vy, ix0, ix1, wx, vx):
    p = planes.astype(np.float64)
    vx_, wx_ = vx[None, None, :], wx[None, None, :]
    top = vx_ * p[:, iy0][:, :, ix0] + wx_ * p[:, iy0][:, :, ix1]
    bot = vx_ * p[:, iy1][:, :, ix0] + wx_ * p[:, iy1][:, :, ix1]
    return (vy[None, :, None] * top + wy[None, :, None] * bot).astype(np.float32)
