"""End-to-end glue: image -> ROI -> features -> anomaly map -> decision, and model fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .core import DatasetManifest, load_entry
from .features import FeaturePyramid, extract_pyramid, fit_norm_stats
from .flow import AnomalyMap, FlowModel, anomaly_map, image_score, train
from .postprocess import AnomalyResult, Threshold, decide, optimal_threshold
from .preprocess import PreprocessConfig, SensorROI, preprocess_pipeline

log = logging.getLogger(__name__)


@dataclass
class LabeledImage:
    name: str
    image: np.ndarray
    label: str
    mask: Optional[np.ndarray] = None


@dataclass
class Scored:
    name: str
    label: str
    map: AnomalyMap
    roi: SensorROI
    gt: Optional[np.ndarray]   # crop-space defect mask


def iter_manifest(manifest: DatasetManifest) -> Iterable[LabeledImage]:
    for e in manifest:
        img, mask = load_entry(manifest, e)
        yield LabeledImage(e.path, img, e.label, mask)


def prepare(img: np.ndarray, pcfg: PreprocessConfig, n_levels: int = 3,
            base_cell: int = 8) -> Tuple[SensorROI, FeaturePyramid]:
    roi = preprocess_pipeline(img, pcfg)
    return roi, extract_pyramid(roi, n_levels, base_cell)


def _model_prep(model: FlowModel):
    pcfg = PreprocessConfig.from_dict(model.preprocess_config) if model.preprocess_config \
        else PreprocessConfig()
    fc = model.feature_config or {}
    return pcfg, int(fc.get("n_levels", 3)), int(fc.get("base_cell", 8))


def score_map(model: FlowModel, img: np.ndarray) -> Tuple[AnomalyMap, SensorROI]:
    pcfg, n_levels, base_cell = _model_prep(model)
    roi, pyr = prepare(img, pcfg, n_levels, base_cell)
    return anomaly_map(model, pyr), roi


def inspect(model: FlowModel, img: np.ndarray) -> Tuple[AnomalyResult, SensorROI]:
    """Full inference for one image using the model's own preprocessing and thresholds."""
    amap, roi = score_map(model, img)
    return decide(amap, model.thresholds, int(model.postprocess.get("min_area", 20))), roi


def score_items(model: FlowModel, items: Iterable[LabeledImage]) -> List[Scored]:
    out = []
    for it in items:
        amap, roi = score_map(model, it.image)
        gt = None if it.mask is None else roi.warp_mask(it.mask) & roi.coating_mask
        out.append(Scored(it.name, it.label, amap, roi, gt))
    return out


def split_goods(n: int, val_fraction: float, seed: int):
    """Seeded train/validation split of n good images; returns sorted index arrays."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_flows(items: Sequence[LabeledImage], cfg: RunConfig) -> FlowModel:
    """Preprocess, extract features and train the per-level flows on good images."""
    if len(items) == 0:
        raise ValueError("no training images")
    bad = [it.name for it in items if it.label != "good"]
    if bad:
        raise ValueError(f"training split contains non-good images: {bad[:3]}")
    fc = {"n_levels": cfg.features.n_levels, "base_cell": cfg.features.base_cell}
    pyramids = []
    for it in items:
        _, pyr = prepare(it.image, cfg.preprocess, **fc)
        pyramids.append(pyr)
    stats = fit_norm_stats(pyramids)
    model = train(pyramids, cfg.flow, stats, fc)
    model.preprocess_config = cfg.preprocess.to_dict()
    model.postprocess = {"min_area": cfg.postprocess.min_area}
    return model


def calibrate(model: FlowModel, scored: Sequence[Scored], split: str = "calibration") -> dict:
    """Set F1-optimal image and pixel thresholds from labeled scored images."""
    labels = np.array([s.label == "bad" for s in scored])
    scores = np.array([image_score(s.map) for s in scored])
    t_img = optimal_threshold(scores, labels, source="image-level")
    with_gt = [s for s in scored if s.label == "good" or s.gt is not None]
    has_pixels = any(s.gt is not None and s.gt.any() for s in with_gt)
    if has_pixels:
        vals, lab = [], []
        for s in with_gt:
            v = s.map.valid
            vals.append(s.map.data[v])
            lab.append(np.zeros(int(v.sum()), bool) if s.gt is None else s.gt[v])
        t_pix = optimal_threshold(np.concatenate(vals), np.concatenate(lab), source="pixel-level")
    else:
        # no ground-truth masks: regions are cut at the image threshold
        t_pix = Threshold(t_img.value, t_img.achieved_f1, "pixel-level")
    model.thresholds = {"image": t_img.to_json(), "pixel": t_pix.to_json()}
    model.calibration = {"split": split, "n_good": int((~labels).sum()), "n_bad": int(labels.sum()),
                         "pixel_source": "masks" if has_pixels else "image-threshold"}
    return {"thresholds": model.thresholds, **model.calibration}


def simplex_grid(n: int, step: float = 0.1) -> np.ndarray:
    """All weight vectors of length n on the simplex with the given step, lexicographic order."""
    m = int(round(1.0 / step))
    out = []

    def rec(prefix, left, slots):
        if slots == 1:
            out.append(prefix + [left])
            return
        for k in range(left, -1, -1):
            rec(prefix + [k], left - k, slots - 1)

    rec([], m, n)
    return np.array(out, dtype=np.float64) / m


def calibrate_lambda(model: FlowModel, scored: Sequence[Scored], step: float = 0.1) -> dict:
    """Grid search of level weights maximizing image AUROC; ties go to the weights nearest uniform."""
    from .evaluation import auroc
    from .imops import box_mean3

    labels = np.array([s.label == "bad" for s in scored])
    n = len(model.stacks)
    # smoothing is linear, so smooth each level once and combine afterwards
    smoothed = [[box_mean3(m) for m in s.map.per_level] for s in scored]
    valid = [s.map.valid for s in scored]
    uniform = np.full(n, 1.0 / n)
    best, best_key = None, None
    for lam in simplex_grid(n, step):
        scores = [float(sum(l * m for l, m in zip(lam, lv))[v].max()) for lv, v in zip(smoothed, valid)]
        key = (auroc(scores, labels), -float(np.sum((lam - uniform) ** 2)))
        if best_key is None or key > best_key:
            best, best_key = lam, key
    model.lam = best
    for s in scored:
        s.map.data = sum(l * m for l, m in zip(best, s.map.per_level))
    return {"lambda": best.tolist(), "auroc": best_key[0]}


def fit_system(goods: Sequence[LabeledImage], calib: Sequence[LabeledImage], cfg: RunConfig):
    """Train on the 80% good split; calibrate on the held-out goods plus ``calib``.

    Returns (model, info) where info records the split sizes and calibration results.
    """
    train_idx, val_idx = split_goods(len(goods), cfg.eval.val_fraction, cfg.eval.seed)
    model = fit_flows([goods[i] for i in train_idx], cfg)
    info = {"n_train": int(len(train_idx)), "n_val_good": int(len(val_idx))}
    pool = [goods[i] for i in val_idx] + list(calib)
    labels = {it.label for it in pool}
    if labels == {"good", "bad"}:
        scored = score_items(model, pool)
        if cfg.flow.calibrate_lambda:
            info["lambda"] = calibrate_lambda(model, scored)
        info["calibration"] = calibrate(model, scored, split="validation-goods+calibration-bads")
    else:
        log.warning("calibration pool lacks both classes; model left uncalibrated")
    return model, info
