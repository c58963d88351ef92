"""Training and multi-view augmentations: random resized crops and frame clips."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

MIN_SIDE = 8
MAX_ATTEMPTS = 10


@dataclass(frozen=True)
class CropSpec:
    area_scale_range: tuple[float, float] = (0.10, 0.20)
    aspect_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 32

    def __post_init__(self):
        lo, hi = self.area_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"area_scale_range must satisfy 0 < lo <= hi <= 1, got {self.area_scale_range}")
        rlo, rhi = self.aspect_ratio_range
        if not 0 < rlo <= rhi:
            raise ValueError("aspect_ratio_range must satisfy 0 < lo <= hi")
        if self.out_size < MIN_SIDE:
            raise ValueError(f"out_size must be >= {MIN_SIDE}")


@dataclass(frozen=True)
class ClipSpec:
    clip_len: int = 9

    def __post_init__(self):
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width


def _fallback_rect(h: int, w: int, spec: CropSpec) -> Rect:
    """Centred crop with admissible area and aspect closest to square."""
    lo, hi = spec.area_scale_range
    total = h * w
    target = 0.5 * (lo + hi) * total
    best = None
    for cw in range(1, w + 1):
        ch = min(h, max(1, int(round(target / cw))))
        if lo * total <= ch * cw <= hi * total:
            score = abs(math.log(cw / ch))
            if best is None or score < best[0]:
                best = (score, ch, cw)
    if best is None:
        ch, cw = h, w
    else:
        _, ch, cw = best
    return Rect((h - ch) // 2, (w - cw) // 2, ch, cw)


def crop_rect(h: int, w: int, spec: CropSpec, rng: np.random.Generator) -> Rect:
    """Draw a crop whose pixel area is within ``area_scale_range`` of ``h * w``."""
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    lo, hi = spec.area_scale_range
    total = h * w
    log_r = (math.log(spec.aspect_ratio_range[0]), math.log(spec.aspect_ratio_range[1]))
    for _ in range(MAX_ATTEMPTS):
        target = total * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h and lo * total <= ch * cw <= hi * total:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return Rect(top, left, ch, cw)
    return _fallback_rect(h, w, spec)


def _axis_taps(start: int, length: int, out: int):
    # half-pixel centres: src = (o + 0.5) * length / out - 0.5
    src = (np.arange(out, dtype=np.float64) + 0.5) * (length / out) - 0.5
    src = np.clip(src, 0.0, length - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, length - 1)
    return i0 + start, i1 + start, src - i0


def resize_region(image: np.ndarray, rect: Rect, out_size: int, impl=None) -> np.ndarray:
    """Bilinear resize of ``rect`` from every plane of ``image`` [..., H, W] to float32."""
    image = np.asarray(image)
    lead = image.shape[:-2]
    planes = image.reshape((-1,) + image.shape[-2:])
    iy0, iy1, wy = _axis_taps(rect.top, rect.height, out_size)
    ix0, ix1, wx = _axis_taps(rect.left, rect.width, out_size)
    out = kernels.resample_bilinear(planes, iy0, iy1, wy, ix0, ix1, wx, impl=impl)
    return out.reshape(lead + (out_size, out_size))


def random_resized_crop(image: np.ndarray, spec: CropSpec, rng: np.random.Generator) -> np.ndarray:
    """Crop one random rectangle and resize it to ``out_size``.

    ``image`` may be [C, H, W] or a clip [F, C, H, W]; a clip shares one
    rectangle across all its frames.
    """
    h, w = image.shape[-2:]
    rect = crop_rect(h, w, spec, rng)
    return resize_region(image, rect, spec.out_size)


def sample_clip(video: np.ndarray, spec: ClipSpec, rng: np.random.Generator) -> np.ndarray:
    n = video.shape[0]
    if spec.clip_len > n:
        raise ValueError(f"clip_len {spec.clip_len} exceeds video length {n}")
    start = int(rng.integers(0, n - spec.clip_len + 1))
    return np.asarray(video[start:start + spec.clip_len])


def make_view(video: np.ndarray, clip: ClipSpec, crop: CropSpec, rng: np.random.Generator) -> np.ndarray:
    """One augmented view: clip, shared crop, frames stacked on channels -> [3 * clip_len, s, s]."""
    frames = sample_clip(video, clip, rng)
    out = random_resized_crop(frames, crop, rng)
    return out.reshape((-1,) + out.shape[-2:])
