import hashlib
import json
import math

import numpy as np
import pytest

from coatinspect.core import load_manifest, load_mask
from coatinspect.synthgen import (DEFECT_KINDS, CoatingTexture, DefectError, DefectSpec,
                                  Illumination, SensorSpec, bad_sample, derive_seed,
                                  generate_dataset, generate_good, good_sample, inject_defect,
                                  render, splitmix64)


def _plain_spec(**kw):
    return SensorSpec(illumination=Illumination(0.0, 0.0), center_jitter=0.0, **kw)


def test_splitmix_reference_values():
    # first outputs of splitmix64 seeded with 0 (published reference sequence)
    state, a = splitmix64(0)
    _, b = splitmix64(state)
    assert a == 0xE220A8397B1DCDAF
    assert b == 0x6E789E6AA1B965F4


def test_derive_seed_distinct():
    seeds = {derive_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000


def test_good_is_deterministic():
    a, b = good_sample(11), good_sample(11)
    assert np.array_equal(a.image, b.image)


def test_zero_grain_gives_flat_coating():
    spec = _plain_spec(coating_texture=CoatingTexture(base_level=80.0, grain_amplitude=0.0))
    gray, coating, _, _ = render(spec)
    inner = coating & (np.hypot(*np.meshgrid(np.arange(256) - 127.5, np.arange(256) - 127.5)) < 70)
    assert np.allclose(gray[inner], 80.0)


def test_many_seeds_distinct_images():
    digests = {hashlib.sha256(good_sample(derive_seed(5, i)).image.tobytes()).hexdigest()
               for i in range(200)}
    assert len(digests) == 200


def test_spec_validation():
    with pytest.raises(ValueError):
        SensorSpec(ring_outer_r=0.5, ring_inner_r=0.6)
    with pytest.raises(ValueError):
        SensorSpec(coating_texture=CoatingTexture(grain_amplitude=-1.0))


def test_delta_sign_matches_kind():
    with pytest.raises(DefectError):
        DefectSpec("darkScratch", 10.0, {})
    with pytest.raises(DefectError):
        DefectSpec("whiteStain", -10.0, {})
    with pytest.raises(DefectError):
        DefectSpec("rust", 10.0, {})


def test_dark_scratch_depth():
    base = generate_good(_plain_spec())
    p0, p1 = (108.0, 128.0), (148.0, 128.0)
    bad = inject_defect(base, DefectSpec("darkScratch", -60.0, {"points": [p0, p1], "width": 3.0}), 0)
    core = np.s_[128, 110:147]
    diff = base.image[core].astype(float) - bad.image[core].astype(float)
    # compare pre/post along the polyline core (green channel carries the tint 0.97)
    assert np.median(diff[:, 0]) == pytest.approx(60, abs=1)
    assert bad.defect_mask[core].all()


@pytest.mark.parametrize("r", [5.0, 8.0, 12.0])
def test_blob_mask_area(r):
    base = generate_good(_plain_spec())
    bad = inject_defect(base, DefectSpec("whiteBlobMark", 50.0, {"center": [120, 130], "radius": r,
                                                                 "softness": 2.0}), 0)
    assert abs(bad.defect_mask.sum() - math.pi * r * r) <= 0.1 * math.pi * r * r


def test_degenerate_injection_rejected():
    base = generate_good(_plain_spec())
    with pytest.raises(DefectError):
        inject_defect(base, DefectSpec("darkBlobMark", 0.0, {"center": [128, 128], "radius": 5}), 0)
    with pytest.raises(DefectError):
        inject_defect(base, DefectSpec("darkBlobMark", -40.0, {"center": [128, 128], "radius": 0}), 0)


def test_footprint_outside_coating_rejected():
    base = generate_good(_plain_spec())
    with pytest.raises(DefectError):
        inject_defect(base, DefectSpec("whiteBlobMark", 40.0, {"center": [5, 5], "radius": 4}), 0)


def test_only_good_samples_take_defects():
    bad = bad_sample(3, "darkScratch")
    with pytest.raises(DefectError):
        inject_defect(bad, bad.defect, 0)


@pytest.mark.parametrize("kind", DEFECT_KINDS)
def test_every_kind_mask_inside_coating(kind):
    s = bad_sample(derive_seed(9, DEFECT_KINDS.index(kind)), kind)
    assert s.label == "bad" and s.defect_mask.any()
    assert not (s.defect_mask & ~s.coating_mask).any()
    assert s.defect.kind == kind


def test_good_masks_empty():
    assert not good_sample(1).defect_mask.any()


def test_dataset_counts_and_layout(tmp_path):
    m = generate_dataset(8, 16, tmp_path / "d", seed=4)
    assert len(m) == 24
    assert sum(e.mask is not None for e in m) == 16
    loaded = load_manifest(tmp_path / "d" / "manifest.json")
    assert loaded.entries == m.entries
    kinds = json.loads((tmp_path / "d" / "defects.json").read_text())["defects"]
    assert sorted(v["kind"] for v in kinds.values()) == sorted(DEFECT_KINDS * 2)
    e = next(e for e in m if e.label == "bad")
    assert load_mask(m.resolve(e.mask)).any()


def test_dataset_empty(tmp_path):
    assert len(generate_dataset(0, 0, tmp_path, seed=0)) == 0


def test_dataset_deterministic(tmp_path):
    generate_dataset(2, 3, tmp_path / "a", seed=8)
    generate_dataset(2, 3, tmp_path / "b", seed=8)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
