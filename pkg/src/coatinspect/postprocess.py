"""From anomaly maps to decisions: F1-optimal thresholds, components, boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .flow import AnomalyMap, image_score

EIGHT = np.ones((3, 3), dtype=bool)


class CalibrationError(ValueError):
    pass


def _as_binary_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        return arr == "bad"
    return arr.astype(bool)


@dataclass(frozen=True)
class Threshold:
    value: float
    achieved_f1: float
    source: str = "image-level"

    def to_json(self) -> dict:
        v = self.value
        return {"value": v if math.isfinite(v) else ("inf" if v > 0 else "-inf"),
                "achieved_f1": self.achieved_f1, "source": self.source}

    @classmethod
    def from_json(cls, d: dict) -> "Threshold":
        return cls(float(d["value"]), float(d["achieved_f1"]), d.get("source", "image-level"))


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    w: int
    h: int
    confidence: float
    area: int

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "confidence": self.confidence, "area": self.area}


@dataclass
class AnomalyResult:
    map: AnomalyMap
    image_score: float
    decision: str
    detections: List[Detection] = field(default_factory=list)
    threshold_used: Optional[Threshold] = None
    pixel_threshold: Optional[Threshold] = None
    mask: Optional[np.ndarray] = None


def f1_sweep(scores, labels):
    """F1 at every candidate threshold (midpoints of distinct scores plus +-inf).

    A sample is predicted positive when its score is strictly above the threshold.
    Returns (candidates ascending, f1 per candidate).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_binary_labels(labels).ravel()
    uniq, inv = np.unique(s, return_inverse=True)
    pos = np.bincount(inv, weights=y, minlength=len(uniq))
    neg = np.bincount(inv, weights=~y, minlength=len(uniq))
    # candidate k predicts positive for unique indices >= k
    tp = np.concatenate([np.cumsum(pos[::-1])[::-1], [0.0]])
    fp = np.concatenate([np.cumsum(neg[::-1])[::-1], [0.0]])
    fn = pos.sum() - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    cands = np.concatenate([[-np.inf], 0.5 * (uniq[:-1] + uniq[1:]), [np.inf]])
    return cands, f1


def optimal_threshold(scores, labels, source: str = "image-level") -> Threshold:
    """Threshold maximizing F1; ties go to the larger threshold."""
    y = _as_binary_labels(labels)
    if y.all() or not y.any():
        raise CalibrationError("threshold calibration needs both good and bad samples")
    cands, f1 = f1_sweep(scores, y)
    best = f1.max()
    k = int(np.nonzero(f1 == best)[0][-1])
    return Threshold(float(cands[k]), float(best), source)


def f1_at(scores, labels, t) -> float:
    y = _as_binary_labels(labels)
    if y.all() or not y.any():
        raise CalibrationError("F1 needs both classes")
    value = t.value if isinstance(t, Threshold) else float(t)
    pred = np.asarray(scores, dtype=np.float64) > value
    tp = float(np.sum(pred & y))
    fp = float(np.sum(pred & ~y))
    fn = float(np.sum(~pred & y))
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


def binarize_map(amap: AnomalyMap, t) -> np.ndarray:
    value = t.value if isinstance(t, Threshold) else float(t)
    return (amap.data > value) & amap.valid


def connected_components(mask: np.ndarray) -> List[np.ndarray]:
    """8-connected components as (N, 2) arrays of (row, col), in raster order of first pixel."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    bounds = np.cumsum(counts)
    w = mask.shape[1]
    out = []
    for lab in range(1, n + 1):
        idx = order[bounds[lab - 1]:bounds[lab]]
        out.append(np.column_stack([idx // w, idx % w]))
    return out


def components_to_detections(components: Sequence[np.ndarray], amap: AnomalyMap,
                             min_area: int = 20) -> List[Detection]:
    dets = []
    for comp in components:
        if len(comp) < min_area:
            continue
        r, c = comp[:, 0], comp[:, 1]
        y0, x0 = int(r.min()), int(c.min())
        dets.append(Detection(x=x0, y=y0, w=int(c.max()) - x0 + 1, h=int(r.max()) - y0 + 1,
                              confidence=float(amap.data[r, c].max()), area=int(len(comp))))
    dets.sort(key=lambda d: -d.confidence)
    return dets


def decide(amap: AnomalyMap, thresholds: Optional[dict], min_area: int = 20) -> AnomalyResult:
    """Image decision is bad when the image score beats the image threshold or any region survives."""
    if not thresholds or "image" not in thresholds or "pixel" not in thresholds:
        raise CalibrationError("model has no calibrated thresholds; run calibration first")
    t_img, t_pix = thresholds["image"], thresholds["pixel"]
    if isinstance(t_img, dict):
        t_img = Threshold.from_json(t_img)
    if isinstance(t_pix, dict):
        t_pix = Threshold.from_json(t_pix)
    score = image_score(amap)
    mask = binarize_map(amap, t_pix)
    dets = components_to_detections(connected_components(mask), amap, min_area)
    bad = score > t_img.value or len(dets) > 0
    return AnomalyResult(amap, score, "bad" if bad else "good", dets, t_img, t_pix, mask)


def result_json(result: AnomalyResult, path: str = "") -> dict:
    return {
        "path": path,
        "score": result.image_score,
        "decision": result.decision,
        "threshold": None if result.threshold_used is None else result.threshold_used.to_json(),
        "pixel_threshold": None if result.pixel_threshold is None else result.pixel_threshold.to_json(),
        "detections": [d.to_json() for d in result.detections],
    }


def overlay_svg(width: int, height: int, detections: Sequence[Detection], image_href: str = "") -> str:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
             f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">']
    if image_href:
        parts.append(f'<image xlink:href="{image_href}" width="{width}" height="{height}"/>')
    for d in detections:
        parts.append(f'<rect x="{d.x}" y="{d.y}" width="{d.w}" height="{d.h}" fill="none" '
                     f'stroke="lime" stroke-width="1.5"><title>{d.confidence:.3f}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts)
