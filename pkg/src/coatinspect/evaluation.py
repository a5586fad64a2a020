"""Image/pixel AUROC, F1, per-class accuracy and timing on labeled sets."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .core import DatasetManifest, ManifestError, load_entry
from .flow import FlowModel, image_score
from .pipeline import LabeledImage, Scored, calibrate, fit_system, inspect
from .postprocess import CalibrationError, Threshold, decide, f1_at, _as_binary_labels
from .preprocess import PreprocessError

log = logging.getLogger(__name__)
REPORT_SCHEMA = 1


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC via average ranks; ties earn half credit."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_binary_labels(labels).ravel()
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    uniq, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts).astype(np.float64)
    avg_rank = upper - (counts - 1) / 2.0          # 1-based mean rank of each tie group
    r_pos = avg_rank[inv][y].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    image_auroc: float
    pixel_auroc: Optional[float]
    f1: float
    decision_f1: float
    accuracy_good: float
    accuracy_bad: float
    confusion: dict
    mean_inference_seconds: float
    n_images: int
    n_good: int
    n_bad: int
    n_failed: int = 0
    failures: List[dict] = field(default_factory=list)
    threshold_split: str = ""
    images: List[dict] = field(default_factory=list)

    def to_json(self, include_images: bool = True) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA
        if not include_images:
            d.pop("images")
        return d

    def without_timing(self) -> dict:
        d = self.to_json()
        d.pop("mean_inference_seconds")
        return d


def _safe_rate(num, den) -> float:
    return float(num) / den if den else 0.0


def report_from_scored(model: FlowModel, scored: Sequence[Scored], seconds: Sequence[float],
                       failures: Sequence[dict] = ()) -> EvalReport:
    """Metrics for already-scored images using the model's calibrated thresholds."""
    if not scored:
        raise ValueError("nothing was scored")
    if not model.thresholds:
        raise CalibrationError("model is not calibrated")
    min_area = int(model.postprocess.get("min_area", 20))
    labels = np.array([s.label == "bad" for s in scored])
    scores = np.array([image_score(s.map) for s in scored])
    decisions = np.array([decide(s.map, model.thresholds, min_area).decision == "bad" for s in scored])
    t_img = Threshold.from_json(model.thresholds["image"])
    tp = int(np.sum(decisions & labels))
    fp = int(np.sum(decisions & ~labels))
    tn = int(np.sum(~decisions & ~labels))
    fn = int(np.sum(~decisions & labels))
    both = labels.any() and (~labels).any()

    pixel = None
    if both and any(s.gt is not None for s in scored if s.label == "bad"):
        vals, labs = [], []
        for s in scored:
            if s.label == "bad" and s.gt is None:
                continue
            v = s.map.valid
            vals.append(s.map.data[v])
            labs.append(np.zeros(int(v.sum()), bool) if s.gt is None else s.gt[v])
        pl = np.concatenate(labs)
        if pl.any() and not pl.all():
            pixel = auroc(np.concatenate(vals), pl)

    images = [{"path": s.name, "label": s.label, "score": float(sc),
               "decision": "bad" if d else "good"}
              for s, sc, d in zip(scored, scores, decisions)]
    return EvalReport(
        image_auroc=auroc(scores, labels) if both else float("nan"),
        pixel_auroc=pixel,
        f1=f1_at(scores, labels, t_img) if both else float("nan"),
        decision_f1=_safe_rate(2 * tp, 2 * tp + fp + fn),
        accuracy_good=_safe_rate(tn, tn + fp),
        accuracy_bad=_safe_rate(tp, tp + fn),
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        mean_inference_seconds=float(np.mean(seconds)) if len(seconds) else 0.0,
        n_images=len(scored),
        n_good=int((~labels).sum()),
        n_bad=int(labels.sum()),
        n_failed=len(failures),
        failures=list(failures),
        threshold_split=str(model.calibration.get("split", "")),
        images=images,
    )


def score_timed(model: FlowModel, items: Iterable[LabeledImage]):
    """Run full inference per image, timing each; preprocessing failures are collected."""
    scored, seconds, failures = [], [], []
    for it in items:
        t0 = time.perf_counter()
        try:
            result, roi = inspect(model, it.image)
        except PreprocessError as exc:
            log.warning("%s: preprocessing failed: %s", it.name, exc)
            failures.append({"path": it.name, "error": str(exc)})
            continue
        seconds.append(time.perf_counter() - t0)
        gt = None if it.mask is None else roi.warp_mask(it.mask) & roi.coating_mask
        scored.append(Scored(it.name, it.label, result.map, roi, gt))
    return scored, seconds, failures


def evaluate_items(model: FlowModel, items: Iterable[LabeledImage]) -> EvalReport:
    scored, seconds, failures = score_timed(model, items)
    return report_from_scored(model, scored, seconds, failures)


def evaluate(model: FlowModel, manifest: DatasetManifest, cfg: Optional[RunConfig] = None) -> EvalReport:
    """Evaluate a calibrated model on every manifest entry."""
    if len(manifest) == 0:
        raise ManifestError("manifest is empty")
    labels = {e.label for e in manifest}
    if labels != {"good", "bad"}:
        raise ManifestError("evaluation manifest needs both good and bad images")

    def items():
        for e in manifest:
            img, mask = load_entry(manifest, e)
            yield LabeledImage(e.path, img, e.label, mask)

    return evaluate_items(model, items())


# ---------------------------------------------------------------------------
# cross-validation


def fold_assignment(n: int, folds: int, seed: int) -> List[np.ndarray]:
    """Seeded partition of range(n) into ``folds`` sorted parts whose sizes differ by at most one."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise ValueError(f"{n} good images cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def summarize(reports: Sequence[EvalReport]) -> dict:
    keys = ("image_auroc", "pixel_auroc", "f1", "decision_f1", "accuracy_good", "accuracy_bad",
            "mean_inference_seconds")
    out = {}
    for k in keys:
        vals = [getattr(r, k) for r in reports if getattr(r, k) is not None]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def cross_validate(manifest: DatasetManifest, folds: int = 5, cfg: Optional[RunConfig] = None):
    """k-fold over good images; bad images only ever appear in the test side.

    With no separate calibration set, each fold's thresholds are calibrated on
    its own test fold, and every report says so in ``threshold_split``.
    Returns (reports, summary).
    """
    cfg = cfg or RunConfig()
    goods = [e for e in manifest if e.label == "good"]
    bads = [e for e in manifest if e.label == "bad"]
    if not bads:
        raise ManifestError("cross-validation needs bad images for testing")
    parts = fold_assignment(len(goods), folds, cfg.eval.seed)

    def load(entries):
        out = []
        for e in entries:
            img, mask = load_entry(manifest, e)
            out.append(LabeledImage(e.path, img, e.label, mask))
        return out

    bad_items = load(bads)
    reports = []
    for k, part in enumerate(parts):
        held = set(part.tolist())
        train_items = load([g for i, g in enumerate(goods) if i not in held])
        test_items = load([goods[i] for i in part]) + bad_items
        fold_cfg = replace(cfg, eval=replace(cfg.eval, val_fraction=0.0))
        model, _ = fit_system(train_items, [], fold_cfg)
        scored, seconds, failures = score_timed_uncalibrated(model, test_items)
        calibrate(model, scored, split=f"test-fold-{k}")
        rep = report_from_scored(model, scored, seconds, failures)
        log.info("fold %d: image AUROC %.4f", k, rep.image_auroc)
        reports.append(rep)
    return reports, summarize(reports)


def score_timed_uncalibrated(model: FlowModel, items: Iterable[LabeledImage]):
    from .pipeline import score_map

    scored, seconds, failures = [], [], []
    for it in items:
        t0 = time.perf_counter()
        try:
            amap, roi = score_map(model, it.image)
        except PreprocessError as exc:
            failures.append({"path": it.name, "error": str(exc)})
            continue
        seconds.append(time.perf_counter() - t0)
        gt = None if it.mask is None else roi.warp_mask(it.mask) & roi.coating_mask
        scored.append(Scored(it.name, it.label, amap, roi, gt))
    return scored, seconds, failures
