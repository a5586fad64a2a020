"""Multi-scale per-cell descriptors of the ROI crop.

Level i partitions the crop into square cells of side ``base_cell * 2**i``
and describes each cell with 14 numbers:

====  =============================================
0     mean intensity
1     intensity standard deviation
2-3   mean |d/dx|, mean |d/dy|
4     mean |Laplacian|
5-8   first-derivative energy at 0, 45, 90, 135 deg
9-12  the same on a 3x3-smoothed image, step 2
13    coating coverage fraction
====  =============================================

Statistics are taken over coating pixels only, so the metal ring never
leaks into a descriptor. Derivative channels use the coating eroded by the
stencil radius; a cell with no such pixels falls back to the plain coating.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .imops import block_sum, box_mean3
from .preprocess import SensorROI, laplacian

DIM = 14
CHANNELS = (
    "mean", "std", "abs_dx", "abs_dy", "abs_lap",
    "e1_0", "e1_45", "e1_90", "e1_135",
    "e2_0", "e2_45", "e2_90", "e2_135",
    "coverage",
)
_ANGLES = np.radians([0.0, 45.0, 90.0, 135.0])


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMap:
    data: np.ndarray      # (h, w, DIM)
    valid: np.ndarray     # (h, w) bool
    scale_index: int
    cell: int

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def valid_vectors(self) -> np.ndarray:
        return self.data[self.valid]


@dataclass
class FeaturePyramid:
    levels: List[FeatureMap]
    crop_size: int
    mask: Optional[np.ndarray] = None   # coating pixels of the source crop


@dataclass
class FeatureNormStats:
    mean: List[np.ndarray]
    std: List[np.ndarray]

    def to_json(self) -> dict:
        return {"mean": [m.tolist() for m in self.mean], "std": [s.tolist() for s in self.std]}

    @classmethod
    def from_json(cls, d: dict) -> "FeatureNormStats":
        return cls([np.array(m, dtype=np.float64) for m in d["mean"]],
                   [np.array(s, dtype=np.float64) for s in d["std"]])


def _central_dx(img: np.ndarray, step: int = 1) -> np.ndarray:
    p = np.pad(img, ((0, 0), (step, step)), mode="edge")
    return (p[:, 2 * step:] - p[:, :-2 * step]) / (2.0 * step)


def _central_dy(img: np.ndarray, step: int = 1) -> np.ndarray:
    p = np.pad(img, ((step, step), (0, 0)), mode="edge")
    return (p[2 * step:, :] - p[:-2 * step, :]) / (2.0 * step)


def _oriented(gx, gy):
    return [(np.cos(a) * gx + np.sin(a) * gy) ** 2 for a in _ANGLES]


def pixel_channels(crop: np.ndarray):
    """Per-pixel quantities whose cell averages form the descriptor.

    Returns (values for channels 2-12 as a (11, H, W) array, stencil radius per channel).
    """
    gx, gy = _central_dx(crop), _central_dy(crop)
    lap = laplacian(crop)
    smooth = box_mean3(crop)
    gx2, gy2 = _central_dx(smooth, 2), _central_dy(smooth, 2)
    maps = [np.abs(gx), np.abs(gy), np.abs(lap)] + _oriented(gx, gy) + _oriented(gx2, gy2)
    radius = [1] * 7 + [3] * 4
    return np.stack(maps), radius


def _cell_mean(values, w_main, w_fallback, cell):
    n_main = block_sum(w_main, cell)
    n_fb = block_sum(w_fallback, cell)
    s_main = block_sum(values * w_main, cell)
    s_fb = block_sum(values * w_fallback, cell)
    return np.where(n_main > 0, s_main / np.maximum(n_main, 1),
                    np.where(n_fb > 0, s_fb / np.maximum(n_fb, 1), 0.0))


def extract_level(crop: np.ndarray, mask: np.ndarray, cell: int, scale_index: int,
                  _pixel=None) -> FeatureMap:
    s = crop.shape[0]
    if crop.shape[0] % cell or crop.shape[1] % cell:
        raise FeatureError(f"crop {crop.shape} not divisible by cell size {cell}")
    maps, radius = _pixel if _pixel is not None else pixel_channels(crop)
    w0 = mask.astype(np.float64)
    eroded = {r: ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), iterations=r,
                                        border_value=1).astype(np.float64)
              for r in sorted(set(radius))}
    h, w = s // cell, crop.shape[1] // cell
    out = np.zeros((h, w, DIM))
    n0 = block_sum(w0, cell)
    mean = np.where(n0 > 0, block_sum(crop * w0, cell) / np.maximum(n0, 1), 0.0)
    mean_px = np.kron(mean, np.ones((cell, cell)))
    var = np.where(n0 > 0, block_sum((crop - mean_px) ** 2 * w0, cell) / np.maximum(n0, 1), 0.0)
    out[..., 0] = mean
    out[..., 1] = np.sqrt(var)
    for k in range(maps.shape[0]):
        out[..., 2 + k] = _cell_mean(maps[k], eroded[radius[k]], w0, cell)
    out[..., 13] = n0 / float(cell * cell)
    return FeatureMap(out, n0 > 0, scale_index, cell)


def extract_pyramid(roi: SensorROI, n_levels: int = 3, base_cell: int = 8) -> FeaturePyramid:
    crop = np.asarray(roi.crop, dtype=np.float64)
    if crop.shape[0] != crop.shape[1]:
        raise FeatureError("crop must be square")
    pix = pixel_channels(crop)
    levels = []
    for i in range(n_levels):
        cell = base_cell * 2 ** i
        levels.append(extract_level(crop, roi.coating_mask, cell, i, _pixel=pix))
    return FeaturePyramid(levels, crop.shape[0], np.asarray(roi.coating_mask, dtype=bool).copy())


def fit_norm_stats(pyramids: Sequence[FeaturePyramid], floor: float = 1e-6) -> FeatureNormStats:
    if len(pyramids) == 0:
        raise FeatureError("no pyramids to fit normalization statistics on")
    if len(pyramids) < 2:
        raise FeatureError("need at least two pyramids")
    means, stds = [], []
    for i in range(len(pyramids[0].levels)):
        x = np.concatenate([p.levels[i].valid_vectors() for p in pyramids])
        if len(x) == 0:
            raise FeatureError(f"level {i} has no valid cells")
        m = x.mean(axis=0)
        sd = np.sqrt(((x - m) ** 2).mean(axis=0))
        means.append(m)
        stds.append(np.maximum(sd, floor))
    return FeatureNormStats(means, stds)


def normalize(pyr: FeaturePyramid, stats: FeatureNormStats) -> FeaturePyramid:
    if len(pyr.levels) != len(stats.mean):
        raise FeatureError("pyramid and statistics have different level counts")
    levels = []
    for lv, m, sd in zip(pyr.levels, stats.mean, stats.std):
        if lv.dim != len(m):
            raise FeatureError(f"feature dim {lv.dim} != stats dim {len(m)}")
        levels.append(FeatureMap((lv.data - m) / sd, lv.valid.copy(), lv.scale_index, lv.cell))
    return FeaturePyramid(levels, pyr.crop_size, pyr.mask)


def denormalize(pyr: FeaturePyramid, stats: FeatureNormStats) -> FeaturePyramid:
    levels = [FeatureMap(lv.data * sd + m, lv.valid.copy(), lv.scale_index, lv.cell)
              for lv, m, sd in zip(pyr.levels, stats.mean, stats.std)]
    return FeaturePyramid(levels, pyr.crop_size, pyr.mask)


def dump_pyramids(pyramids: Sequence[FeaturePyramid]) -> bytes:
    """Flat binary: u32 image count, u32 level count, (u32 h, w, dim) per level, then f32 data."""
    if not pyramids:
        return struct.pack("<II", 0, 0)
    shapes = [lv.data.shape for lv in pyramids[0].levels]
    parts = [struct.pack("<II", len(pyramids), len(shapes))]
    parts += [struct.pack("<III", *s) for s in shapes]
    for p in pyramids:
        for lv in p.levels:
            parts.append(np.ascontiguousarray(lv.data, dtype="<f4").tobytes())
    return b"".join(parts)


def load_pyramid_dump(raw: bytes) -> List[List[np.ndarray]]:
    n, n_levels = struct.unpack_from("<II", raw, 0)
    off = 8
    shapes = []
    for _ in range(n_levels):
        shapes.append(struct.unpack_from("<III", raw, off))
        off += 12
    out = []
    for _ in range(n):
        levels = []
        for s in shapes:
            count = s[0] * s[1] * s[2]
            levels.append(np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(s))
            off += 4 * count
        out.append(levels)
    return out
