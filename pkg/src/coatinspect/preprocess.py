"""Sensor ROI extraction.

Stages: grayscale -> Laplacian edges -> Otsu binarization -> morphological
closing -> contour tracing -> direct ellipse fit -> center-distance outlier
removal -> crop of the largest circle -> CLAHE -> 2-means segmentation ->
coating-region extraction.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import rgb_to_gray
from .imops import disk, resize_region, sample_bilinear

EIGHT = np.ones((3, 3), dtype=bool)

# Moore neighbourhood, clockwise on screen (y grows downward), starting west.
_MOORE = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


class PreprocessError(ValueError):
    pass


class DegenerateFitError(PreprocessError):
    pass


class NoCircleFoundError(PreprocessError):
    pass


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b

    def half_extents(self) -> Tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw = math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        hh = math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return hw, hh

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xs - self.cx, ys - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class CircleCandidate:
    ellipse: Ellipse
    support: int

    def __post_init__(self):
        if self.support < 5:
            raise ValueError("a conic fit needs at least 5 support points")


@dataclass(frozen=True)
class CropBox:
    """Square source-image window that was resampled into the crop."""
    x0: float
    y0: float
    side: float
    size: int

    def to_crop(self, x, y):
        k = self.size / self.side
        return (x + 0.5 - self.x0) * k - 0.5, (y + 0.5 - self.y0) * k - 0.5

    def to_source(self, u, v):
        k = self.side / self.size
        return self.x0 + (u + 0.5) * k - 0.5, self.y0 + (v + 0.5) * k - 0.5


@dataclass(frozen=True)
class SensorROI:
    crop: np.ndarray
    coating_mask: np.ndarray
    source_ellipse: Ellipse
    box: CropBox

    def __post_init__(self):
        h, w = self.crop.shape
        if h != w:
            raise ValueError("ROI crop must be square")
        if self.coating_mask.shape != self.crop.shape:
            raise ValueError("coating mask must match crop shape")
        if not self.coating_mask.any():
            raise ValueError("coating mask is empty")

    def warp_mask(self, mask: np.ndarray) -> np.ndarray:
        """Map a source-image mask (e.g. ground truth) into crop coordinates."""
        return resize_region(mask.astype(np.float64), self.box.x0, self.box.y0,
                             self.box.side, self.box.side, self.box.size, self.box.size) >= 0.5


@dataclass(frozen=True)
class PreprocessConfig:
    crop_size: int = 256
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    min_radius_fraction: float = 0.15
    close_radius: int = 2
    seed: int = 0
    blur_sigma: float = 1.5
    max_axis_ratio: float = 3.0
    outlier_min_tolerance: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown preprocess config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# stage 1: edges


def laplacian(img: np.ndarray) -> np.ndarray:
    """5-point discrete Laplacian with replicate padding."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise PreprocessError(f"laplacian needs a 2-D image of at least 3x3, got {img.shape}")
    p = np.pad(img, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * img


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def morphological_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation followed by erosion with a disk of the given radius."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    se = disk(radius)
    # pad so the closing is not clipped by the image border
    padded = np.pad(mask, radius + 1)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    r = radius + 1
    return closed[r:-r, r:-r]


# ---------------------------------------------------------------------------
# stage 2: contours and ellipses


def _trace_one(labels: np.ndarray, lab: int, start: Tuple[int, int]) -> List[Tuple[int, int]]:
    # Moore-neighbour tracing with Jacob's stopping criterion: stop when the
    # start pixel is about to be left in the same direction as the first move.
    # labels is padded so neighbour lookups never leave the array.
    contour = [start]
    p = start
    back = 0  # west of the first raster pixel is background
    first_move = None
    while True:
        for step in range(1, 9):
            j = (back + step) % 8
            q = (p[0] + _MOORE[j][0], p[1] + _MOORE[j][1])
            if labels[q[1], q[0]] == lab:
                break
        else:
            return contour  # isolated pixel
        if first_move is None:
            first_move = j
        elif p == start and j == first_move:
            contour.pop()
            return contour
        pd = _MOORE[(j - 1) % 8]
        prev = (p[0] + pd[0], p[1] + pd[1])
        back = _MOORE_INDEX[(prev[0] - q[0], prev[1] - q[1])]
        p = q
        contour.append(p)


def trace_contours(mask: np.ndarray) -> List[np.ndarray]:
    """Outer boundary of every 8-connected component, as (N, 2) arrays of (x, y).

    Components are visited in raster order of their first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=EIGHT)
    padded = np.pad(labels, 1)
    objects = ndimage.find_objects(labels)
    out = []
    for lab in range(1, n + 1):
        sl = objects[lab - 1]
        sub = labels[sl] == lab
        ys, xs = np.nonzero(sub)
        i = int(np.lexsort((xs, ys))[0])
        start = (int(xs[i]) + sl[1].start + 1, int(ys[i]) + sl[0].start + 1)
        pts = _trace_one(padded, lab, start)
        out.append(np.asarray(pts, dtype=np.int64) - 1)
    return out


def fit_ellipse(points) -> Ellipse:
    """Direct least-squares ellipse fit (Fitzgibbon, with Halir-Flusser partitioning)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 5:
        raise DegenerateFitError("ellipse fit needs at least 5 (x, y) points")
    mean = pts.mean(axis=0)
    centered = pts - mean
    scale = math.sqrt((centered ** 2).sum(axis=1).mean())
    if scale == 0 or not np.isfinite(scale):
        raise DegenerateFitError("all points coincide")
    x = centered[:, 0] / scale
    y = centered[:, 1] / scale

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    if np.linalg.cond(s3) > 1e12:
        raise DegenerateFitError("points are collinear")
    t = -np.linalg.solve(s3, s2.T)
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if len(ok) == 0:
        raise DegenerateFitError("no elliptical solution")
    a1 = evecs[:, ok[0]]
    A, B, C = a1
    D, E, F = t @ a1
    return _conic_to_ellipse(A, B, C, D, E, F, mean, scale)


def _conic_to_ellipse(A, B, C, D, E, F, mean, scale) -> Ellipse:
    det = 4 * A * C - B * B
    if det <= 0:
        raise DegenerateFitError("fitted conic is not an ellipse")
    x0 = (B * E - 2 * C * D) / det
    y0 = (B * D - 2 * A * E) / det
    f0 = A * x0 * x0 + B * x0 * y0 + C * y0 * y0 + D * x0 + E * y0 + F
    q = np.array([[A, B / 2.0], [B / 2.0, C]])
    lam, vec = np.linalg.eigh(q)
    axes2 = -f0 / lam
    if np.any(axes2 <= 0) or not np.all(np.isfinite(axes2)):
        raise DegenerateFitError("fitted conic is imaginary")
    axes = np.sqrt(axes2)
    major = int(np.argmax(axes))
    a, b = float(axes[major]), float(axes[1 - major])
    vx, vy = vec[:, major]
    theta = math.atan2(vy, vx) % math.pi
    if a - b <= 1e-12 * a:
        theta = 0.0
    return Ellipse(cx=float(x0 * scale + mean[0]), cy=float(y0 * scale + mean[1]),
                   a=a * scale, b=b * scale, theta=theta)


def filter_outliers(candidates: Sequence[CircleCandidate],
                    min_tolerance: float = 0.0) -> List[CircleCandidate]:
    """Drop candidates whose center lies far from the mean center.

    d_i = |c_i - mean(c)|; the cutoff is median(d) + 2 robust sigma (1.4826 MAD),
    but never below ``min_tolerance`` pixels. At least one candidate always survives.
    """
    if len(candidates) == 0:
        raise PreprocessError("no circle candidates to filter")
    centers = np.array([[c.ellipse.cx, c.ellipse.cy] for c in candidates])
    d = np.linalg.norm(centers - centers.mean(axis=0), axis=1)
    med = float(np.median(d))
    sigma = 1.4826 * float(np.median(np.abs(d - med)))
    cutoff = max(med + 2.0 * sigma, min_tolerance)
    kept = [c for c, di in zip(candidates, d) if di <= cutoff]
    if not kept:
        kept = [candidates[int(np.argmin(d))]]
    return kept


def crop_largest(img: np.ndarray, candidates: Sequence[CircleCandidate], size: int):
    """Crop the bounding square of the largest-area candidate and resample to size x size.

    Returns (crop, ellipse, box).
    """
    if len(candidates) == 0:
        raise PreprocessError("no circle candidates to crop")
    best = max(candidates, key=lambda c: c.ellipse.a * c.ellipse.b).ellipse
    h, w = img.shape[:2]
    hw, hh = best.half_extents()
    side = min(2.0 * max(hw, hh), float(w), float(h))
    x0 = min(max(best.cx + 0.5 - side / 2.0, 0.0), w - side)
    y0 = min(max(best.cy + 0.5 - side / 2.0, 0.0), h - side)
    box = CropBox(x0, y0, side, size)
    crop = resize_region(img, x0, y0, side, side, size, size)
    return crop, best, box


# ---------------------------------------------------------------------------
# stage 5: CLAHE


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def clahe(img: np.ndarray, tiles=(8, 8), clip: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a 0-255 float image.

    ``clip`` is relative: each 256-bin tile histogram is clipped at
    clip * tile_pixels / 256 and the excess is spread uniformly over all bins.
    Pixel mappings are bilinearly blended between the four nearest tile centers.
    """
    img = np.asarray(img, dtype=np.float64)
    if isinstance(tiles, int):
        tiles = (tiles, tiles)
    ty, tx = tiles
    if ty < 1 or tx < 1:
        raise ValueError("tile grid must be at least 1x1")
    if clip <= 0:
        raise ValueError("clip limit must be positive")
    h, w = img.shape
    if h < ty or w < tx:
        raise PreprocessError(f"image {w}x{h} is smaller than the {tx}x{ty} tile grid")
    levels = np.clip(np.rint(img), 0, 255).astype(np.int64)
    ye, xe = _tile_edges(h, ty), _tile_edges(w, tx)
    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = levels[ye[i]:ye[i + 1], xe[j]:xe[j + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            if np.isfinite(clip):
                limit = clip * n / 256.0
                excess = np.maximum(hist - limit, 0).sum()
                hist = np.minimum(hist, limit) + excess / 256.0
            luts[i, j] = np.cumsum(hist) * (255.0 / n)

    # fractional tile coordinates of every pixel relative to tile centers
    cy = 0.5 * (ye[:-1] + ye[1:]) - 0.5
    cx = 0.5 * (xe[:-1] + xe[1:]) - 0.5
    fy = np.interp(np.arange(h), cy, np.arange(ty))
    fx = np.interp(np.arange(w), cx, np.arange(tx))
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    v = levels
    out = ((1 - wy) * ((1 - wx) * luts[Y0, X0, v] + wx * luts[Y0, X1, v])
           + wy * ((1 - wx) * luts[Y1, X0, v] + wx * luts[Y1, X1, v]))
    return np.clip(out, 0.0, 255.0)


# ---------------------------------------------------------------------------
# stage 6: k-means


def _kmeanspp_1d(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
            continue
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        centers.append(x[min(idx, len(x) - 1)])
    return np.array(centers, dtype=np.float64)


def kmeans_1d(values: np.ndarray, k: int = 2, seed: int = 0, restarts: int = 10,
              tol: float = 1e-4, max_iter: int = 100):
    """k-means on scalars with k-means++ seeding; best of ``restarts`` runs by SSE.

    For k=2 the exact best cut of the sorted values is one more candidate, so the
    returned partition is globally SSE-optimal in that case.

    Returns (centers sorted ascending, labels, sse_history of the winning run).
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if len(x) == 0:
        raise PreprocessError("k-means on an empty input")
    if len(np.unique(x)) < k:
        raise PreprocessError(f"fewer than {k} distinct values")
    # identical pixel values are interchangeable, so cluster the histogram of
    # unique values when that is cheaper
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = _kmeanspp_1d(x, k, rng)
        centers, labels, hist = _lloyd_weighted(uniq, counts, init, tol, max_iter)
        if best is None or hist[-1] < best[2][-1] - 1e-12:
            best = (centers, labels, hist)
    if k == 2:
        # in 1-D the optimal 2-partition is a cut of the sorted values; add it as a candidate
        centers, labels, hist = _lloyd_weighted(uniq, counts, _best_cut_centers(uniq, counts), tol, max_iter)
        if hist[-1] < best[2][-1] - 1e-12:
            best = (centers, labels, hist)
    centers, labels, hist = best
    order = np.argsort(centers)
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return centers[order], remap[labels][inverse], hist


def _best_cut_centers(x: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """Means of the two sides of the SSE-minimizing cut of sorted weighted values."""
    w = np.cumsum(wts)
    s = np.cumsum(wts * x)
    q = np.cumsum(wts * x * x)
    wl, sl, ql = w[:-1], s[:-1], q[:-1]
    wr, sr, qr = w[-1] - wl, s[-1] - sl, q[-1] - ql
    sse = (ql - sl * sl / wl) + (qr - sr * sr / wr)
    i = int(np.argmin(sse))
    return np.array([sl[i] / wl[i], sr[i] / wr[i]])


def _lloyd_weighted(x, wts, centers, tol, max_iter):
    history = []
    centers = centers.copy()
    for _ in range(max_iter):
        labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        history.append(float((wts * (x - centers[labels]) ** 2).sum()))
        new = centers.copy()
        for j in range(len(centers)):
            sel = labels == j
            if sel.any():
                new[j] = (wts[sel] * x[sel]).sum() / wts[sel].sum()
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < tol:
            break
    labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    history.append(float((wts * (x - centers[labels]) ** 2).sum()))
    return centers, labels, history


def kmeans_segment(img: np.ndarray, k: int = 2, seed: int = 0,
                   region: Optional[np.ndarray] = None) -> np.ndarray:
    """Cluster pixel intensities and return the mask of the most central cluster.

    ``region`` restricts clustering to a subset of pixels; others are background.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise PreprocessError("empty image")
    if region is None:
        region = np.ones(img.shape, dtype=bool)
    vals = img[region]
    _, labels, _ = kmeans_1d(vals, k=k, seed=seed)
    h, w = img.shape
    ys, xs = np.nonzero(region)
    dist = np.hypot(xs - (w - 1) / 2.0, ys - (h - 1) / 2.0)
    mean_dist = [dist[labels == j].mean() if np.any(labels == j) else np.inf for j in range(k)]
    chosen = int(np.argmin(mean_dist))
    mask = np.zeros(img.shape, dtype=bool)
    mask[ys[labels == chosen], xs[labels == chosen]] = True
    return mask


# ---------------------------------------------------------------------------
# full pipeline


def _refine_to_zero_crossing(points: np.ndarray, lap: np.ndarray, smooth: np.ndarray,
                             reach: float = 4.0, step: float = 0.25) -> np.ndarray:
    """Move contour points along the intensity gradient onto the steepest Laplacian zero crossing.

    Points with no crossing within ``reach`` pixels are dropped.
    """
    pts = points.astype(np.float64)
    gy, gx = np.gradient(smooth)
    nx = sample_bilinear(gx, pts[:, 0], pts[:, 1])
    ny = sample_bilinear(gy, pts[:, 0], pts[:, 1])
    norm = np.hypot(nx, ny)
    ok = norm > 1e-9
    nx = np.where(ok, nx / np.where(ok, norm, 1), 0)
    ny = np.where(ok, ny / np.where(ok, norm, 1), 0)
    s = np.arange(-reach, reach + step / 2, step)
    sx = pts[:, 0:1] + s[None, :] * nx[:, None]
    sy = pts[:, 1:2] + s[None, :] * ny[:, None]
    vals = sample_bilinear(lap, sx, sy)
    sign_change = np.signbit(vals[:, :-1]) != np.signbit(vals[:, 1:])
    # the edge is the steepest crossing; faint ones come from residual noise
    jump = np.where(sign_change, np.abs(vals[:, :-1] - vals[:, 1:]), -1.0)
    j = np.argmax(jump, axis=1)
    has = (jump[np.arange(len(pts)), j] > 0) & ok
    v0 = vals[np.arange(len(pts)), j]
    v1 = vals[np.arange(len(pts)), j + 1]
    denom = np.where(v0 - v1 == 0, 1.0, v0 - v1)
    t = s[j] + step * (v0 / denom)
    out = pts[has].copy()
    out[:, 0] += t[has] * nx[has]
    out[:, 1] += t[has] * ny[has]
    return out


def detect_circles(gray: np.ndarray, cfg: PreprocessConfig) -> List[CircleCandidate]:
    """Stages 1-3: edge map, contours, ellipse fits, validity and outlier filtering."""
    h, w = gray.shape
    smooth = ndimage.gaussian_filter(gray, cfg.blur_sigma, mode="nearest") if cfg.blur_sigma > 0 else gray
    lap = laplacian(smooth)
    mag = np.abs(lap)
    edges = mag > otsu_threshold(mag)
    edges = morphological_close(edges, cfg.close_radius)

    min_r = cfg.min_radius_fraction * min(w, h)
    # components too small to bound a valid circle are skipped before tracing
    labels, n = ndimage.label(edges, structure=EIGHT)
    keep = np.zeros(n + 1, dtype=bool)
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        ext = max(sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        keep[lab] = ext >= min_r
    edges = keep[labels]

    candidates = []
    for contour in trace_contours(edges):
        if len(contour) < 5:
            continue
        pts = _refine_to_zero_crossing(contour, lap, smooth)
        try:
            e = fit_ellipse(pts)
        except DegenerateFitError:
            continue
        if e.b < min_r or e.a > cfg.max_axis_ratio * e.b or e.a > max(w, h):
            continue
        if not (0 <= e.cx < w and 0 <= e.cy < h):
            continue
        candidates.append(CircleCandidate(e, len(contour)))
    if not candidates:
        raise NoCircleFoundError(
            f"no ellipse with radius >= {min_r:.1f} px found")
    return filter_outliers(candidates, cfg.outlier_min_tolerance)


def extract_coating(segment: np.ndarray) -> np.ndarray:
    """Final area of interest: largest connected piece of the segment with holes filled."""
    labels, n = ndimage.label(segment, structure=EIGHT)
    if n == 0:
        raise PreprocessError("segmentation produced no coating pixels")
    sizes = np.bincount(labels.ravel())[1:]
    largest = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)


def preprocess_pipeline(img: np.ndarray, cfg: Optional[PreprocessConfig] = None) -> SensorROI:
    cfg = cfg or PreprocessConfig()
    gray = rgb_to_gray(img) if np.ndim(img) == 3 else np.asarray(img, dtype=np.float64)
    candidates = detect_circles(gray, cfg)
    crop, ellipse, box = crop_largest(gray, candidates, cfg.crop_size)
    enhanced = clahe(crop, (cfg.clahe_tiles, cfg.clahe_tiles), cfg.clahe_clip)

    s = cfg.crop_size
    ecx, ecy = box.to_crop(ellipse.cx, ellipse.cy)
    k = s / box.side
    local = Ellipse(ecx, ecy, ellipse.a * k, ellipse.b * k, ellipse.theta)
    yy, xx = np.mgrid[0:s, 0:s]
    inside = local.contains(xx, yy)
    try:
        segment = kmeans_segment(enhanced, k=2, seed=cfg.seed, region=inside)
    except PreprocessError as exc:
        raise PreprocessError(f"coating segmentation failed: {exc}") from exc
    coating = extract_coating(segment)
    return SensorROI(crop=enhanced, coating_mask=coating, source_ellipse=ellipse, box=box)
