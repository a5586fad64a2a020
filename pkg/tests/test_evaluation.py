import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coatinspect.evaluation import (auroc, cross_validate, evaluate, evaluate_items,
                                    fold_assignment, report_from_scored)
from coatinspect.flow import AnomalyMap, model_from_bytes
from coatinspect.pipeline import Scored
from coatinspect.postprocess import Threshold


def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.85, 0.7, 0.1], [1, 1, 0, 0, 0]) == pytest.approx(5 / 6, abs=1e-15)
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auroc([0.9, 0.1], ["bad", "good"]) == 1.0


def test_auroc_single_class():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 0])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=200))
def test_auroc_matches_pair_counting(pairs):
    s = [p[0] / 7 for p in pairs]
    y = [p[1] for p in pairs]
    if all(y) or not any(y):
        return
    assert abs(auroc(s, y) - pair_count_auroc(s, y)) <= 1e-12


def test_auroc_monotone_invariance(rng):
    s = rng.normal(size=80)
    y = rng.random(80) > 0.4
    a = auroc(s, y)
    assert auroc(np.exp(3 * s) + 2, y) == pytest.approx(a, abs=1e-15)
    assert auroc(np.arctan(s), y) == pytest.approx(a, abs=1e-15)


def test_auroc_label_flip(rng):
    s = rng.permutation(60).astype(float)
    y = rng.random(60) > 0.5
    assert auroc(s, ~y) == pytest.approx(1 - auroc(s, y), abs=1e-15)


class _StubModel:
    thresholds = {"image": Threshold(0.5, 1.0).to_json(),
                  "pixel": Threshold(10.0, 1.0, "pixel-level").to_json()}
    postprocess = {"min_area": 20}
    calibration = {"split": "hand"}


def _scored(name, label, value, gt_frac=0.0):
    data = np.full((8, 8), value)
    gt = None
    if label == "bad":
        gt = np.zeros((8, 8), bool)
        gt[:int(8 * gt_frac)] = True
        data = np.where(gt, value + 1, value)
    return Scored(name, label, AnomalyMap(data, np.ones((8, 8), bool)), None, gt)


def test_hand_computed_report():
    scored = [_scored("g", "good", 0.2), _scored("b", "bad", 0.9, 0.5)]
    rep = report_from_scored(_StubModel(), scored, [0.1, 0.3])
    assert rep.image_auroc == 1.0 and rep.f1 == 1.0
    assert rep.confusion == {"tp": 1, "fp": 0, "tn": 1, "fn": 0}
    assert rep.accuracy_good == 1.0 and rep.accuracy_bad == 1.0
    assert rep.mean_inference_seconds == pytest.approx(0.2)
    # pixels: 64 good at 0.2, 32 bad-bg at 0.9, 32 defect at 1.9 -> every defect pixel outranks all
    assert rep.pixel_auroc == 1.0
    assert rep.threshold_split == "hand"


def test_confusion_reconciles(rng):
    scored = [_scored(f"i{k}", "bad" if k % 3 == 0 else "good", float(rng.random()), 0.25)
              for k in range(15)]
    rep = report_from_scored(_StubModel(), scored, [0.0] * 15)
    c = rep.confusion
    assert sum(c.values()) == rep.n_images == 15
    assert rep.accuracy_good == pytest.approx(c["tn"] / (c["tn"] + c["fp"]))
    assert rep.accuracy_bad == pytest.approx(c["tp"] / (c["tp"] + c["fn"]))


def test_fold_assignment():
    parts = fold_assignment(23, 5, seed=3)
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(23))
    assert all(np.array_equal(a, b) for a, b in zip(parts, fold_assignment(23, 5, seed=3)))
    with pytest.raises(ValueError):
        fold_assignment(3, 5, 0)


def test_evaluate_deterministic(small_model, small_data):
    m = model_from_bytes(small_model)
    a = evaluate_items(m, small_data["test"])
    b = evaluate_items(m, small_data["test"])
    assert a.without_timing() == b.without_timing()
    assert a.n_images == len(small_data["test"]) and a.n_bad == 8
    assert 0.0 <= a.image_auroc <= 1.0 and a.pixel_auroc is not None
    assert a.to_json()["schema_version"] == 1


def test_evaluate_manifest_checks(small_model, tmp_path):
    from coatinspect.core import ManifestError
    from coatinspect.synthgen import generate_dataset

    m = generate_dataset(2, 0, tmp_path, seed=1)
    with pytest.raises(ManifestError):
        evaluate(model_from_bytes(small_model), m)


def test_cross_validate_small(tmp_path, small_config):
    from coatinspect.synthgen import generate_dataset

    m = generate_dataset(6, 2, tmp_path, seed=21)
    reports, summary = cross_validate(m, folds=2, cfg=small_config)
    assert len(reports) == 2
    assert [r.n_good for r in reports] == [3, 3] and all(r.n_bad == 2 for r in reports)
    assert reports[1].threshold_split == "test-fold-1"
    assert "image_auroc" in summary and math.isfinite(summary["image_auroc"]["mean"])
