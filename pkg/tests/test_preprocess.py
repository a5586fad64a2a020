import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coatinspect.preprocess import (CircleCandidate, DegenerateFitError, Ellipse, NoCircleFoundError,
                                    PreprocessConfig, PreprocessError, clahe, crop_largest,
                                    fit_ellipse, filter_outliers, kmeans_1d, kmeans_segment,
                                    laplacian, morphological_close, otsu_threshold,
                                    preprocess_pipeline, trace_contours)
from coatinspect.synthgen import good_sample


# -- laplacian ---------------------------------------------------------------

def _naive_laplacian(img):
    h, w = img.shape
    out = np.zeros_like(img, dtype=float)
    for y in range(h):
        for x in range(w):
            def at(yy, xx):
                return img[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
            out[y, x] = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4 * img[y, x]
    return out


def test_laplacian_constant_is_zero():
    assert np.all(laplacian(np.full((6, 7), 42.0)) == 0)


def test_laplacian_of_x_squared():
    x = np.arange(8, dtype=float)
    img = np.tile(x ** 2, (6, 1))
    assert np.allclose(laplacian(img)[1:-1, 1:-1], 2.0)


def test_laplacian_matches_naive_convolution(rng):
    img = rng.uniform(0, 255, (5, 5))
    assert np.allclose(laplacian(img), _naive_laplacian(img), atol=1e-12)


def test_laplacian_too_small():
    with pytest.raises(PreprocessError):
        laplacian(np.zeros((2, 5)))


@settings(max_examples=30)
@given(arrays(np.float64, (6, 6), elements=st.floats(-100, 100)),
       arrays(np.float64, (6, 6), elements=st.floats(-100, 100)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_laplacian_linear(i, j, a, b):
    lhs = laplacian(a * i + b * j)
    rhs = a * laplacian(i) + b * laplacian(j)
    assert np.allclose(lhs[1:-1, 1:-1], rhs[1:-1, 1:-1], atol=1e-8)


# -- otsu --------------------------------------------------------------------

def test_otsu_separates_two_modes(rng):
    lo, hi = rng.normal(10, 1, 500), rng.normal(100, 1, 500)
    t = otsu_threshold(np.concatenate([lo, hi]))
    assert lo.max() <= t < hi.min()


# -- closing -----------------------------------------------------------------

def test_close_isolated_pixel_is_extensive():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    assert np.all(morphological_close(m, 1)[m])


def test_close_fills_gap():
    m = np.zeros((5, 7), bool)
    m[2, 2] = m[2, 4] = True
    out = morphological_close(m, 1)
    # direct set computation with the 3x3 radius-1 disk: the dilation is the
    # 3x5 block rows 1-3, cols 1-5; erosion leaves its interior row 2, cols 2-4
    expected = np.zeros_like(m)
    expected[2, 2:5] = True
    assert np.array_equal(out, expected)


def test_close_empty():
    assert not morphological_close(np.zeros((5, 5), bool), 2).any()


def test_close_radius_checked():
    with pytest.raises(ValueError):
        morphological_close(np.zeros((5, 5), bool), 0)


# -- contours ----------------------------------------------------------------

def test_trace_square_border():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    (c,) = trace_contours(m)
    expected = {(x, y) for x in range(1, 4) for y in range(1, 4)} - {(2, 2)}
    assert len(c) == 8
    assert {tuple(p) for p in c} == expected


def test_trace_two_blobs_and_empty():
    m = np.zeros((8, 8), bool)
    m[1:3, 1:3] = True
    m[5:7, 5:7] = True
    assert len(trace_contours(m)) == 2
    assert trace_contours(np.zeros((4, 4), bool)) == []


def test_trace_is_closed_walk():
    yy, xx = np.mgrid[0:40, 0:40]
    m = (xx - 20) ** 2 / 150 + (yy - 19) ** 2 / 60 <= 1
    (c,) = trace_contours(m)
    steps = np.abs(np.diff(np.vstack([c, c[:1]]), axis=0)).max(axis=1)
    assert np.all(steps == 1)
    assert len({tuple(p) for p in c}) == len(c)


# -- ellipse fit -------------------------------------------------------------

def test_fit_exact_circle():
    t = np.arange(8) * 2 * math.pi / 8
    e = fit_ellipse(np.column_stack([10 + 5 * np.cos(t), 10 + 5 * np.sin(t)]))
    assert e.cx == pytest.approx(10, abs=1e-6) and e.cy == pytest.approx(10, abs=1e-6)
    assert e.a == pytest.approx(5, abs=1e-6) and e.b == pytest.approx(5, abs=1e-6)


def _ellipse_points(cx, cy, a, b, th, n, rng=None, noise=0.0):
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = math.cos(th), math.sin(th)
    pts = np.column_stack([cx + c * x - s * y, cy + s * x + c * y])
    if noise:
        pts = pts + rng.normal(0, noise, pts.shape)
    return pts


def test_fit_noisy_ellipse(rng):
    e = fit_ellipse(_ellipse_points(0, 0, 8, 4, 0.3, 20, rng, 0.1))
    assert e.a == pytest.approx(8, rel=0.05)
    assert e.b == pytest.approx(4, rel=0.05)
    assert e.theta == pytest.approx(0.3, abs=0.05 * math.pi)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(2, 40), st.floats(0.3, 1.0),
       st.floats(0, math.pi - 1e-3))
def test_fit_exact_conic_samples(cx, cy, a, ratio, th):
    b = a * ratio
    e = fit_ellipse(_ellipse_points(cx, cy, a, b, th, 24))
    assert e.cx == pytest.approx(cx, abs=1e-6 * a + 1e-9)
    assert e.cy == pytest.approx(cy, abs=1e-6 * a + 1e-9)
    assert e.a == pytest.approx(a, rel=1e-6)
    assert e.b == pytest.approx(b, rel=1e-6)
    if ratio < 0.99:
        d = abs(e.theta - th) % math.pi
        assert min(d, math.pi - d) < 1e-5
    assert 0 <= e.theta < math.pi and e.a >= e.b > 0


def test_fit_collinear():
    with pytest.raises(DegenerateFitError):
        fit_ellipse([(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)])


# -- outliers ----------------------------------------------------------------

def _cand(cx, cy, r=5.0):
    return CircleCandidate(Ellipse(cx, cy, r, r, 0.0), 10)


def test_outlier_removed():
    cands = [_cand(10, 10), _cand(11, 10), _cand(10, 11), _cand(50, 50)]
    kept = filter_outliers(cands)
    assert [(c.ellipse.cx, c.ellipse.cy) for c in kept] == [(10, 10), (11, 10), (10, 11)]


def test_outlier_single_and_identical():
    one = [_cand(3, 4)]
    assert filter_outliers(one) == one
    same = [_cand(7, 7) for _ in range(4)]
    assert filter_outliers(same) == same


def test_outlier_empty():
    with pytest.raises(PreprocessError):
        filter_outliers([])


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=12))
def test_outliers_never_empty(centers):
    assert len(filter_outliers([_cand(x, y) for x, y in centers])) >= 1


# -- crop --------------------------------------------------------------------

def test_crop_size_and_choice():
    img = np.zeros((100, 100))
    small, big = _cand(50, 50, 5.0), _cand(50, 50, 10.0)
    crop, e, _ = crop_largest(img, [small, big], 64)
    assert crop.shape == (64, 64)
    assert e.a == 10.0


def test_crop_recenters_disk():
    yy, xx = np.mgrid[0:120, 0:120]
    img = np.where((xx - 47.0) ** 2 + (yy - 61.0) ** 2 <= 30 ** 2, 200.0, 20.0)
    crop, e, box = crop_largest(img, [_cand(47, 61, 30)], 64)
    ys, xs = np.nonzero(crop > 110)
    u, v = box.to_source(xs.mean(), ys.mean())
    assert math.hypot(u - 47, v - 61) <= 2.0


# -- CLAHE -------------------------------------------------------------------

@pytest.mark.parametrize("clip", [0.5, 2.0, np.inf])
def test_clahe_constant_stays_constant(clip):
    out = clahe(np.full((32, 32), 77.0), (4, 4), clip)
    assert np.ptp(out) == 0


def test_clahe_global_equalization_two_levels():
    img = np.zeros((16, 16))
    img[:, 8:] = 255
    out = clahe(img, (1, 1), np.inf)
    # CDF: half the pixels at 0 -> 0.5*255, all at 255 -> 255
    assert np.allclose(out[:, :8], 127.5)
    assert np.allclose(out[:, 8:], 255.0)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (24, 24), elements=st.floats(0, 255)), st.floats(0.1, 10))
def test_clahe_range(img, clip):
    out = clahe(img, (3, 3), clip)
    assert out.min() >= 0 and out.max() <= 255


def test_clahe_errors():
    with pytest.raises(PreprocessError):
        clahe(np.zeros((4, 4)), (8, 8))
    with pytest.raises(ValueError):
        clahe(np.zeros((16, 16)), (2, 2), 0.0)


# -- k-means -----------------------------------------------------------------

def test_kmeans_quadrants():
    img = np.zeros((4, 4))
    img[:2, 2:] = 1
    img[2:, :2] = 10
    img[2:, 2:] = 11
    centers, labels, _ = kmeans_1d(img.ravel(), 2, seed=0)
    assert np.allclose(centers, [0.5, 10.5])
    assert set(labels[img.ravel() < 5]) == {0} and set(labels[img.ravel() > 5]) == {1}


def _brute_sse(x):
    best = np.inf
    n = len(x)
    for bits in itertools.product([0, 1], repeat=n):
        b = np.array(bits, bool)
        if b.all() or not b.any():
            continue
        sse = ((x[b] - x[b].mean()) ** 2).sum() + ((x[~b] - x[~b].mean()) ** 2).sum()
        best = min(best, sse)
    return best


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=2, max_size=8).filter(lambda v: len(set(v)) >= 2),
       st.integers(0, 2 ** 31))
def test_kmeans_matches_brute_force(vals, seed):
    x = np.array(vals, dtype=float)
    _, _, hist = kmeans_1d(x, 2, seed=seed)
    assert hist[-1] == pytest.approx(_brute_sse(x), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(0, 255)).filter(lambda a: len(np.unique(a)) >= 3),
       st.integers(0, 1000))
def test_kmeans_sse_nonincreasing(x, seed):
    _, _, hist = kmeans_1d(x, 3, seed=seed, restarts=1)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_constant_image():
    with pytest.raises(PreprocessError):
        kmeans_segment(np.full((5, 5), 3.0))


def test_kmeans_segment_picks_central_cluster():
    yy, xx = np.mgrid[0:32, 0:32]
    r = np.hypot(xx - 15.5, yy - 15.5)
    img = np.where(r < 10, 200.0, 50.0)
    assert np.array_equal(kmeans_segment(img, seed=1), r < 10)
    # darker coating: still chosen by centrality, not intensity
    assert np.array_equal(kmeans_segment(255 - img, seed=1), r < 10)


# -- full pipeline -----------------------------------------------------------

def _iou(a, b):
    return (a & b).sum() / (a | b).sum()


def test_pipeline_coating_iou():
    s = good_sample(7)
    roi = preprocess_pipeline(s.image)
    gt = roi.warp_mask(s.coating_mask)
    assert roi.crop.shape == (256, 256)
    assert _iou(roi.coating_mask, gt) >= 0.9


def test_pipeline_blank_image():
    with pytest.raises(NoCircleFoundError):
        preprocess_pipeline(np.zeros((128, 128, 3), np.uint8))


def test_pipeline_deterministic():
    img = good_sample(3).image
    a, b = preprocess_pipeline(img), preprocess_pipeline(img)
    assert np.array_equal(a.crop, b.crop) and np.array_equal(a.coating_mask, b.coating_mask)
    assert a.source_ellipse == b.source_ellipse


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        PreprocessConfig.from_dict({"crop_size": 128, "bogus": 1})
