"""Defect-type structure discovery: region descriptors, PCA and exact t-SNE."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import DatasetManifest, ManifestError
from .flow import FlowModel
from .imops import box_mean3
from .features import pixel_channels
from .postprocess import AnomalyResult
from .preprocess import SensorROI

log = logging.getLogger(__name__)

# per-pixel channels pooled over a defect region
POOLED = ("intensity_dev", "local_std", "abs_dx", "abs_dy", "abs_lap",
          "e1_0", "e1_45", "e1_90", "e1_135", "e2_0", "e2_45", "e2_90", "e2_135")
DESCRIPTOR_LEN = 2 * len(POOLED) + 3


class ClusterError(ValueError):
    pass


@dataclass
class Embedding:
    points: np.ndarray
    ids: List[str]
    method: str
    eigenvalues: Optional[np.ndarray] = None   # pca: full spectrum, descending
    components: Optional[np.ndarray] = None    # pca: (d, D) rows
    mean: Optional[np.ndarray] = None
    kl_history: List[float] = field(default_factory=list)
    row_entropy: Optional[np.ndarray] = None   # tsne: entropy of each conditional row, nats
    perplexity: Optional[float] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise ClusterError("embedding has non-finite coordinates")
        if len(self.ids) != len(self.points):
            raise ClusterError("one id per point required")

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        d = self.points.shape[1]
        return self.eigenvalues[:d] / total if total > 0 else np.zeros(d)

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def back_project(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) @ self.components + self.mean


# ---------------------------------------------------------------------------
# descriptors


def region_pixels(result: AnomalyResult) -> np.ndarray:
    """Foreground pixels that belong to surviving detections."""
    if not result.detections:
        raise ClusterError("result has no detections")
    keep = np.zeros(result.map.shape, dtype=bool)
    for d in result.detections:
        keep[d.y:d.y + d.h, d.x:d.x + d.w] = True
    return keep & result.mask


def _elongation(rows: np.ndarray, cols: np.ndarray) -> float:
    if len(rows) < 2:
        return 1.0
    cov = np.cov(np.stack([cols, rows]).astype(np.float64))
    ev = np.linalg.eigvalsh(cov)
    return float(math.sqrt((ev[1] + 1e-9) / (ev[0] + 1e-9)))


def defect_descriptor(result: AnomalyResult, roi: SensorROI) -> np.ndarray:
    """Mean and max of each pooled channel over the detected region, plus shape terms.

    Intensity is taken relative to the median coating level, so dark and white
    defects land on opposite sides of zero. Trailing entries: region area as a
    fraction of the coating, bounding-box aspect (long/short side), and the
    second-moment elongation of the region.
    """
    region = region_pixels(result)
    if not region.any():
        raise ClusterError("detections cover no foreground pixels")
    crop = np.asarray(roi.crop, dtype=np.float64)
    coat = roi.coating_mask
    dev = crop - np.median(crop[coat])
    local_std = np.sqrt(np.maximum(box_mean3(crop ** 2) - box_mean3(crop) ** 2, 0.0))
    maps, _ = pixel_channels(crop)
    stack = np.concatenate([dev[None], local_std[None], maps])
    vals = stack[:, region]
    rows, cols = np.nonzero(region)
    h = rows.max() - rows.min() + 1
    w = cols.max() - cols.min() + 1
    shape = [region.sum() / max(coat.sum(), 1), max(h, w) / min(h, w), _elongation(rows, cols)]
    return np.concatenate([vals.mean(axis=1), vals.max(axis=1), shape])


# ---------------------------------------------------------------------------
# PCA


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be square and symmetric")
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a ** 2) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale * n:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau           # tau * tau would overflow
                else:
                    t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def pca(points, out_dim: int, ids: Optional[Sequence[str]] = None) -> Embedding:
    """Project onto the top principal axes of the sample covariance (ddof=1).

    Each component is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ClusterError("PCA needs at least two points")
    n, dim = x.shape
    if out_dim < 1 or out_dim > min(n - 1, dim):
        raise ClusterError(f"out_dim {out_dim} exceeds min(n-1, D) = {min(n - 1, dim)}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = jacobi_eigh(cov)
    comps = evecs[:, :out_dim].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    return Embedding(xc @ comps.T, ids, "pca", np.maximum(evals, 0.0), comps, mean)


# ---------------------------------------------------------------------------
# t-SNE


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x ** 2, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(x: np.ndarray, perplexity: float = 30.0, tol: float = 1e-5,
                              max_iter: int = 200):
    """Row-stochastic P(j|i) with each row's entropy (nats) matched to log(perplexity).

    Returns (P, precisions, entropies).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if perplexity <= 1.0 or perplexity > n - 1:
        raise ClusterError(f"perplexity {perplexity} infeasible for {n} points")
    d = _sq_distances(x)
    target = math.log(perplexity)
    p = np.zeros((n, n))
    betas = np.ones(n)
    ents = np.zeros(n)
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()          # shift for stability; P is shift invariant
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            sw = w.sum()
            row = w / sw
            h = math.log(sw) + beta * float(np.dot(di, row))
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        p[i, np.arange(n) != i] = row
        betas[i], ents[i] = beta, h
    return p, betas, ents


def tsne(points, perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
         ids: Optional[Sequence[str]] = None, exaggeration: float = 12.0,
         exaggeration_iters: int = 250, learning_rate: Optional[float] = None) -> Embedding:
    """Exact t-SNE to two dimensions with momentum and per-coordinate gains."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n > 2000:
        raise ClusterError("exact t-SNE is limited to 2000 points")
    cond, _, ents = conditional_probabilities(x, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    lr = max(n / exaggeration / 4.0, 50.0) if learning_rate is None else learning_rate
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    kl = []
    for it in range(iters):
        ex = exaggeration if it < exaggeration_iters else 1.0
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (ex * p - q) * num
        np.fill_diagonal(pq, 0.0)
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        kl.append(float(np.sum(p * np.log(p / q))))
        mom = 0.5 if it < exaggeration_iters else 0.8
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        vel = mom * vel - lr * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    return Embedding(y, ids, "tsne", kl_history=kl, row_entropy=ents, perplexity=float(perplexity))


def knn_purity(points: np.ndarray, labels: Sequence[str]) -> float:
    """Fraction of points whose nearest other point shares their label."""
    d = _sq_distances(np.asarray(points, dtype=np.float64))
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)
    lab = np.asarray(labels)
    return float(np.mean(lab == lab[nn]))


# ---------------------------------------------------------------------------
# report

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class ClusterReport:
    embedding: Embedding
    kinds: List[str]
    purity: float
    skipped: List[str]
    pca_dim: int

    def csv(self) -> str:
        lines = ["id,kind,x,y"]
        for i, k, (px, py) in zip(self.embedding.ids, self.kinds, self.embedding.points):
            lines.append(f"{i},{k},{px:.6f},{py:.6f}")
        return "\n".join(lines) + "\n"

    def svg(self, size: int = 480) -> str:
        pts = self.embedding.points
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        pad = 40
        xy = pad + (pts - lo) / span * (size - 2 * pad)
        kinds = sorted(set(self.kinds))
        color = {k: _PALETTE[i % len(_PALETTE)] for i, k in enumerate(kinds)}
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size}">',
               f'<rect width="{size + 160}" height="{size}" fill="white"/>']
        for (px, py), k, i in zip(xy, self.kinds, self.embedding.ids):
            out.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="4" fill="{color[k]}">'
                       f'<title>{i} ({k})</title></circle>')
        for j, k in enumerate(kinds):
            out.append(f'<circle cx="{size + 12}" cy="{20 + 18 * j}" r="5" fill="{color[k]}"/>')
            out.append(f'<text x="{size + 22}" y="{24 + 18 * j}" font-size="12">{k}</text>')
        out.append("</svg>")
        return "\n".join(out)

    def to_json(self) -> dict:
        return {"schema_version": 1, "n_points": len(self.kinds), "purity": self.purity,
                "pca_dim": self.pca_dim, "skipped": self.skipped}


def embed_descriptors(desc: np.ndarray, ids: Sequence[str], kinds: Sequence[str],
                      pca_dim: int = 16, perplexity: float = 30.0, iters: int = 1000,
                      seed: int = 0, skipped: Sequence[str] = ()) -> ClusterReport:
    """Standardize descriptors, reduce with PCA, then embed with t-SNE."""
    desc = np.asarray(desc, dtype=np.float64)
    sd = desc.std(axis=0)
    z = (desc - desc.mean(axis=0)) / np.where(sd > 1e-12, sd, 1.0)
    d = min(pca_dim, len(z) - 1, z.shape[1])
    reduced = pca(z, d, ids).points
    perp = min(perplexity, (len(z) - 1) / 3.0)
    emb = tsne(reduced, perp, iters, seed, ids)
    lab = list(kinds)
    purity = knn_purity(emb.points, lab) if len(set(lab)) > 1 else 1.0
    return ClusterReport(emb, lab, purity, list(skipped), d)


def cluster_items(model: FlowModel, items, kinds: dict, pca_dim: int = 16,
                  perplexity: float = 30.0, iters: int = 1000, seed: int = 0) -> ClusterReport:
    """Describe every bad item's detected regions and embed them."""
    from .pipeline import inspect

    descs, ids, labs, skipped = [], [], [], []
    for it in items:
        if it.label != "bad":
            continue
        result, roi = inspect(model, it.image)
        if not result.detections:
            skipped.append(it.name)
            continue
        descs.append(defect_descriptor(result, roi))
        ids.append(it.name)
        labs.append(kinds.get(it.name, "unknown"))
    if not descs:
        raise ClusterError("no bad images with detections to cluster")
    if skipped:
        log.warning("%d bad images had no detections and were skipped", len(skipped))
    return embed_descriptors(np.array(descs), ids, labs, pca_dim, perplexity, iters, seed, skipped)


def cluster_report(manifest: DatasetManifest, model: FlowModel, pca_dim: int = 16,
                   perplexity: float = 30.0, iters: int = 1000, seed: int = 0) -> ClusterReport:
    """Embed the bad images of a manifest; kinds come from a defects.json sidecar if present."""
    from .pipeline import iter_manifest

    if not any(e.label == "bad" for e in manifest):
        raise ManifestError("manifest has no bad images")
    kinds = {}
    if manifest.root is not None and (manifest.root / "defects.json").exists():
        side = json.loads((manifest.root / "defects.json").read_text())
        kinds = {k: v["kind"] for k, v in side.get("defects", {}).items()}
    bad_only = DatasetManifest(tuple(e for e in manifest if e.label == "bad"), manifest.root)
    return cluster_items(model, iter_manifest(bad_only), kinds, pca_dim, perplexity, iters, seed)
