"""Procedural clean scenes so the pipeline runs without downloaded images."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

KINDS = ("gradient", "checker", "filtered_noise", "shapes")

# Default sRGB range keeps scenes under the benchmark camera's gain so the
# inverse ISP never saturates.
DEFAULT_RANGE = (0.03, 0.74)


def _tint(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.75, 1.0, size=3)


def _rescale(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    mn, mx = img.min(), img.max()
    if mx - mn < 1e-12:
        return np.full_like(img, 0.5 * (lo + hi))
    return lo + (img - mn) / (mx - mn) * (hi - lo)


def _gradient(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    base = ramp[..., None] * _tint(rng) + 0.2 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * yy)[..., None]
    return base


def _checker(h, w, rng):
    cell = int(rng.integers(6, 17))
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    c0, c1 = rng.uniform(0.0, 0.4, 3), rng.uniform(0.6, 1.0, 3)
    img = board[..., None] * c1 + (1 - board[..., None]) * c0
    return ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0))


def _filtered_noise(h, w, rng):
    sigma = rng.uniform(2.0, 6.0)
    lum = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma)
    chroma = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (2 * sigma, 2 * sigma, 0))
    return lum[..., None] * _tint(rng) + 0.3 * chroma * lum.std() / max(chroma.std(), 1e-12)


def _shapes(h, w, rng):
    img = _gradient(h, w, rng) * 0.5
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(0.1, 0.4) * h, rng.uniform(0.1, 0.4) * w
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img[mask] = color
    return ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))


_GENERATORS = {
    "gradient": _gradient,
    "checker": _checker,
    "filtered_noise": _filtered_noise,
    "shapes": _shapes,
}


def procedural_scene(kind: str, size: int | tuple[int, int], rng: np.random.Generator, value_range=DEFAULT_RANGE) -> np.ndarray:
    if kind not in _GENERATORS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {KINDS}")
    h, w = (size, size) if isinstance(size, int) else size
    img = _GENERATORS[kind](h, w, rng)
    return _rescale(img, *value_range)


def make_scenes(n: int, size: int | tuple[int, int] = 64, seed: int = 0, kinds=KINDS, value_range=DEFAULT_RANGE) -> list[np.ndarray]:
    """``n`` scenes cycling through ``kinds``, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    return [procedural_scene(kinds[i % len(kinds)], size, rng, value_range) for i in range(n)]


def smooth_scene(size: int = 64, seed: int = 0) -> np.ndarray:
    """Low-frequency scene for simulator self-inverse checks."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    fy, fx, ph = rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8), rng.uniform(0, 2 * np.pi)
    lum = 0.4 + 0.25 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    img = lum[..., None] * rng.uniform(0.85, 1.0, size=3)
    for c in range(3):
        img[..., c] += 0.03 * np.cos(2 * np.pi * rng.uniform(0.2, 0.6) * (xx - yy) + rng.uniform(0, 2 * np.pi))
    return img
