"""Small raster helpers shared by several stages: sampling, resizing, box sums."""
from __future__ import annotations

import numpy as np


def _fold(idx: np.ndarray, n: int, mode: str) -> np.ndarray:
    if mode == "edge":
        return np.clip(idx, 0, n - 1)
    if mode == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * n - 2
        idx = np.mod(idx, period)
        return np.where(idx >= n, period - idx, idx)
    raise ValueError(f"unknown padding mode {mode!r}")


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, mode: str = "edge") -> np.ndarray:
    """Sample ``img`` at float pixel coordinates (x = column, y = row).

    Works for (H, W) and (H, W, C) arrays; out-of-range taps are resolved by
    ``mode`` ("edge" replicate or "reflect" about the border pixel).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    xa, xb = _fold(x0, w, mode), _fold(x0 + 1, w, mode)
    ya, yb = _fold(y0, h, mode), _fold(y0 + 1, h, mode)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[ya, xa] * (1 - fx) + img[ya, xb] * fx
    bot = img[yb, xa] * (1 - fx) + img[yb, xb] * fx
    return top * (1 - fy) + bot * fy


def resize_region(img: np.ndarray, x0: float, y0: float, side_w: float, side_h: float,
                  out_w: int, out_h: int) -> np.ndarray:
    """Bilinearly resample the box [x0, x0+side_w) x [y0, y0+side_h) onto an out_h x out_w grid.

    Pixel-center convention: output pixel j maps to x0 + (j + 0.5) * side_w / out_w - 0.5.
    """
    xs = x0 + (np.arange(out_w) + 0.5) * (side_w / out_w) - 0.5
    ys = y0 + (np.arange(out_h) + 0.5) * (side_h / out_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(img, gx, gy, mode="edge")


def block_sum(values: np.ndarray, cell: int) -> np.ndarray:
    h, w = values.shape
    return values.reshape(h // cell, cell, w // cell, cell).sum(axis=(1, 3))


def box_mean3(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter with replicate padding."""
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    acc = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / 9.0


def disk(radius: int) -> np.ndarray:
    """Digital disk: offsets within radius + 0.5, so radius 1 is the full 3x3 block."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= (r + 0.5) ** 2
