"""Procedural sensor images: defect-free renders and defect-injected renders with exact masks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import DatasetManifest, ManifestEntry, atomic_write_bytes, quantize, save_image, save_manifest

DEFECT_KINDS = (
    "circularGroove", "darkBlobMark", "darkScratch", "deteriorate",
    "groove", "whiteBlobMark", "whiteScratch", "whiteStain",
)

_MASK64 = (1 << 64) - 1


class DefectError(ValueError):
    pass


def splitmix64(state: int) -> tuple:
    """One step of splitmix64: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Per-sample seed: the index-th output of a splitmix64 stream started at ``seed``."""
    state = seed & _MASK64
    state = (state + index * 0x9E3779B97F4A7C15) & _MASK64
    _, out = splitmix64(state)
    return out


@dataclass(frozen=True)
class CoatingTexture:
    base_level: float = 70.0
    grain_amplitude: float = 10.0
    grain_scale: float = 8.0


@dataclass(frozen=True)
class Illumination:
    gradient_strength: float = 0.12
    vignette: float = 0.15


@dataclass(frozen=True)
class SensorSpec:
    image_size: int = 256
    ring_outer_r: float = 0.85
    ring_inner_r: float = 0.68
    coating_texture: CoatingTexture = field(default_factory=CoatingTexture)
    illumination: Illumination = field(default_factory=Illumination)
    rng_seed: int = 0
    ring_level: float = 190.0
    background_level: float = 35.0
    background_noise: float = 4.0
    center_jitter: float = 6.0

    def __post_init__(self):
        if not 0 < self.ring_inner_r < self.ring_outer_r <= 1:
            raise ValueError("need 0 < ring_inner_r < ring_outer_r <= 1")
        t, il = self.coating_texture, self.illumination
        if min(t.grain_amplitude, t.grain_scale, il.gradient_strength, il.vignette,
               self.background_noise, self.center_jitter) < 0:
            raise ValueError("amplitudes must be non-negative")


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    intensity_delta: float
    geometry: dict

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise DefectError(f"unknown defect kind {self.kind!r}")
        if self.kind.startswith("dark") and self.intensity_delta > 0:
            raise DefectError(f"{self.kind} needs a negative intensity delta")
        if self.kind.startswith("white") and self.intensity_delta < 0:
            raise DefectError(f"{self.kind} needs a positive intensity delta")


@dataclass(frozen=True)
class GeneratedSample:
    image: np.ndarray
    label: str
    defect_mask: np.ndarray
    coating_mask: np.ndarray
    center: tuple
    coating_radius: float
    spec: SensorSpec
    defect: Optional[DefectSpec] = None


def value_noise(shape, scale: float, rng: np.random.Generator, octaves: int = 2) -> np.ndarray:
    """Seeded lattice noise, bilinearly interpolated, roughly in [-1, 1]."""
    h, w = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    s = max(float(scale), 1.0)
    for _ in range(octaves):
        gh, gw = int(math.ceil(h / s)) + 2, int(math.ceil(w / s)) + 2
        lattice = rng.uniform(-1.0, 1.0, size=(gh, gw))
        ys = np.arange(h) / s
        xs = np.arange(w) / s
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        # smoothstep weights keep the interpolant C1
        fy = fy * fy * (3 - 2 * fy)
        fx = fx * fx * (3 - 2 * fx)
        a = lattice[np.ix_(y0, x0)]
        b = lattice[np.ix_(y0, x0 + 1)]
        c = lattice[np.ix_(y0 + 1, x0)]
        d = lattice[np.ix_(y0 + 1, x0 + 1)]
        out += amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy)
        total += amp
        amp *= 0.5
        s = max(s / 2.0, 1.0)
    return out / total


def _disk_alpha(r: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(radius - r + 0.5, 0.0, 1.0)


TINT = np.array([1.0, 0.97, 0.92])


def render(spec: SensorSpec):
    """Render a defect-free sensor. Returns (gray float image, coating mask, center, coating radius)."""
    rng = np.random.default_rng(spec.rng_seed)
    n = spec.image_size
    half = n / 2.0
    jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2) if spec.center_jitter > 0 else np.zeros(2)
    cx, cy = (n - 1) / 2.0 + jitter[0], (n - 1) / 2.0 + jitter[1]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    r = np.hypot(xx - cx, yy - cy)
    r_out, r_in = spec.ring_outer_r * half, spec.ring_inner_r * half

    img = spec.background_level + spec.background_noise * rng.standard_normal((n, n))
    a_out = _disk_alpha(r, r_out)
    ring = spec.ring_level * (1.0 - 0.08 * ((r - r_in) / (r_out - r_in) - 0.5) ** 2)
    img = img * (1 - a_out) + ring * a_out
    tex = spec.coating_texture
    grain = value_noise((n, n), tex.grain_scale, rng)
    coating = tex.base_level + tex.grain_amplitude * grain
    a_in = _disk_alpha(r, r_in)
    img = img * (1 - a_in) + coating * a_in

    il = spec.illumination
    phi = rng.uniform(0, 2 * math.pi)
    ramp = ((xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)) / half
    img = img * (1.0 + il.gradient_strength * ramp) * (1.0 - il.vignette * (r / half) ** 2)
    return img, a_in >= 0.5, (cx, cy), r_in


def _to_rgb(gray: np.ndarray) -> np.ndarray:
    return quantize(gray[:, :, None] * TINT[None, None, :])


def generate_good(spec: SensorSpec) -> GeneratedSample:
    gray, coating, center, r_in = render(spec)
    return GeneratedSample(image=_to_rgb(gray), label="good",
                           defect_mask=np.zeros(coating.shape, dtype=bool),
                           coating_mask=coating, center=center, coating_radius=r_in, spec=spec)


# ---------------------------------------------------------------------------
# defects


def _segment_distance(xx, yy, p, q):
    px, py = p
    qx, qy = q
    vx, vy = qx - px, qy - py
    L2 = vx * vx + vy * vy
    if L2 == 0:
        return np.hypot(xx - px, yy - py)
    t = np.clip(((xx - px) * vx + (yy - py) * vy) / L2, 0.0, 1.0)
    return np.hypot(xx - (px + t * vx), yy - (py + t * vy))


def defect_alpha(defect: DefectSpec, shape, seed: int = 0) -> np.ndarray:
    """Coverage in [0, 1] of a defect footprint, before clipping to the coating."""
    g = defect.geometry
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = defect.kind
    if kind.endswith("Scratch"):
        pts = [tuple(p) for p in g["points"]]
        width = float(g["width"])
        length = sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))
        if width <= 0 or length <= 0:
            raise DefectError("scratch has zero area")
        d = np.full(shape, np.inf)
        for a, b in zip(pts, pts[1:]):
            d = np.minimum(d, _segment_distance(xx, yy, a, b))
        return np.clip(width / 2.0 - d + 0.5, 0.0, 1.0)
    if kind.endswith("BlobMark"):
        radius = float(g["radius"])
        if radius <= 0:
            raise DefectError("blob has zero radius")
        soft = float(g.get("softness", 2.0))
        r = np.hypot(xx - g["center"][0], yy - g["center"][1])
        return np.clip(0.5 + (radius - r) / (2.0 * soft), 0.0, 1.0)
    if kind in ("circularGroove", "groove"):
        radius, width = float(g["radius"]), float(g["width"])
        if radius <= 0 or width <= 0:
            raise DefectError("groove has zero area")
        dx, dy = xx - g["center"][0], yy - g["center"][1]
        alpha = np.clip(width / 2.0 - np.abs(np.hypot(dx, dy) - radius) + 0.5, 0.0, 1.0)
        sweep = float(g.get("sweep", 2 * math.pi))
        if sweep < 2 * math.pi:
            ang = np.mod(np.arctan2(dy, dx) - float(g["start"]), 2 * math.pi)
            arc_px = np.minimum(ang, sweep - ang) * radius  # distance to arc end, along the arc
            alpha = alpha * np.where(ang <= sweep, np.clip(arc_px + 0.5, 0.0, 1.0), 0.0)
        return alpha
    # stains and deterioration: thresholded value-noise patch
    radius = float(g["radius"])
    if radius <= 0:
        raise DefectError("patch has zero radius")
    rng = np.random.default_rng(seed)
    noise = 0.5 + 0.5 * value_noise(shape, float(g.get("scale", 6.0)), rng)
    r = np.hypot(xx - g["center"][0], yy - g["center"][1])
    envelope = np.clip(1.0 - (r / radius) ** 2, 0.0, 1.0)
    alpha = np.clip((noise * 0.6 + 0.7 * envelope - float(g.get("threshold", 0.6))) * 6.0, 0.0, 1.0)
    alpha = alpha * (r <= radius)
    if kind == "deteriorate":
        speckle = 0.5 + 0.5 * value_noise(shape, 1.5, rng, octaves=1)
        alpha = alpha * (0.45 + 0.55 * speckle)
    return alpha


def inject_defect(sample: GeneratedSample, defect: DefectSpec, seed: int) -> GeneratedSample:
    if sample.label != "good":
        raise DefectError("defects are only injected into good samples")
    if defect.intensity_delta == 0:
        raise DefectError("zero intensity delta")
    alpha = defect_alpha(defect, sample.coating_mask.shape, seed)
    interior = ndimage.binary_erosion(sample.coating_mask, iterations=2)
    alpha = alpha * interior
    mask = alpha >= 0.5
    if not mask.any():
        raise DefectError("defect footprint falls outside the coating")
    img = sample.image.astype(np.float64) + defect.intensity_delta * alpha[:, :, None]
    return replace(sample, image=quantize(img), label="bad", defect_mask=mask, defect=defect)


def random_defect(kind: str, sample: GeneratedSample, rng: np.random.Generator) -> DefectSpec:
    """Draw a defect of ``kind`` at default difficulty, placed inside the coating."""
    cx, cy = sample.center
    rc = sample.coating_radius
    u = rng.uniform

    def point(max_frac=0.7):
        rr = rc * max_frac * math.sqrt(u(0, 1))
        a = u(0, 2 * math.pi)
        return [cx + rr * math.cos(a), cy + rr * math.sin(a)]

    sign = -1.0 if kind in ("darkScratch", "darkBlobMark", "circularGroove", "groove", "deteriorate") else 1.0
    if kind.endswith("Scratch"):
        p0 = point(0.55)
        a = u(0, 2 * math.pi)
        total = u(40, 80)
        bend = u(-0.5, 0.5)
        l1 = total * u(0.4, 0.6)
        p1 = [p0[0] + l1 * math.cos(a), p0[1] + l1 * math.sin(a)]
        p2 = [p1[0] + (total - l1) * math.cos(a + bend), p1[1] + (total - l1) * math.sin(a + bend)]
        geom = {"points": [p0, p1, p2], "width": u(2.5, 3.5)}
        delta = sign * u(50, 70)
    elif kind.endswith("BlobMark"):
        geom = {"center": point(0.7), "radius": u(5, 10), "softness": 2.0}
        delta = sign * u(45, 60)
    elif kind == "circularGroove":
        geom = {"center": [cx, cy], "radius": rc * u(0.35, 0.8), "width": u(2.5, 3.5)}
        delta = sign * u(35, 45)
    elif kind == "groove":
        geom = {"center": [cx, cy], "radius": rc * u(0.3, 0.75), "width": u(5, 7),
                "start": u(0, 2 * math.pi), "sweep": math.radians(u(50, 110))}
        delta = sign * u(35, 45)
    else:
        geom = {"center": point(0.6), "radius": u(14, 22), "scale": 6.0, "threshold": 0.6}
        delta = sign * (u(35, 45) if kind == "whiteStain" else u(40, 50))
    return DefectSpec(kind, float(delta), geom)


def random_spec(seed: int) -> SensorSpec:
    """Default-difficulty sensor with mild per-sample variation in level, grain and lighting."""
    rng = np.random.default_rng(seed)
    tex = CoatingTexture(base_level=float(rng.uniform(62, 78)),
                         grain_amplitude=float(rng.uniform(8, 12)), grain_scale=8.0)
    il = Illumination(gradient_strength=float(rng.uniform(0.04, 0.15)),
                      vignette=float(rng.uniform(0.08, 0.2)))
    return SensorSpec(coating_texture=tex, illumination=il, rng_seed=int(rng.integers(2 ** 63)))


def good_sample(seed: int) -> GeneratedSample:
    return generate_good(random_spec(seed))


def bad_sample(seed: int, kind: str) -> GeneratedSample:
    base = good_sample(seed)
    rng = np.random.default_rng(derive_seed(seed, 1))
    defect = random_defect(kind, base, rng)
    return inject_defect(base, defect, seed=derive_seed(seed, 2) & 0xFFFFFFFF)


def iter_dataset(n_good: int, n_bad: int, seed: int):
    """Yield (name, sample) pairs; defect kinds cycle round-robin over all eight families."""
    if n_good < 0 or n_bad < 0:
        raise ValueError("counts must be non-negative")
    for i in range(n_good):
        yield f"good_{i:04d}", good_sample(derive_seed(seed, 2 * i))
    for i in range(n_bad):
        kind = DEFECT_KINDS[i % len(DEFECT_KINDS)]
        yield f"bad_{i:04d}", bad_sample(derive_seed(seed, 2 * i + 1), kind)


def generate_dataset(n_good: int, n_bad: int, out_dir, seed: int) -> DatasetManifest:
    """Write DIR/good/*.ppm, DIR/bad/*.ppm, DIR/masks/*.pgm, DIR/manifest.json (+ DIR/defects.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, defects = [], {}
    for name, s in iter_dataset(n_good, n_bad, seed):
        if s.label == "good":
            rel = f"good/{name}.ppm"
            save_image(out / rel, s.image)
            entries.append(ManifestEntry(rel, "good", None))
        else:
            rel, mrel = f"bad/{name}.ppm", f"masks/{name}.pgm"
            save_image(out / rel, s.image)
            save_image(out / mrel, s.defect_mask)
            entries.append(ManifestEntry(rel, "bad", mrel))
            defects[rel] = {"kind": s.defect.kind, "intensity_delta": s.defect.intensity_delta,
                            "geometry": s.defect.geometry}
    manifest = DatasetManifest(tuple(entries), out)
    save_manifest(out / "manifest.json", manifest)
    atomic_write_bytes(out / "defects.json", json.dumps(
        {"schema_version": 1, "seed": seed, "defects": defects}, indent=1, sort_keys=True).encode())
    return manifest


def spec_dict(spec: SensorSpec) -> dict:
    return asdict(spec)
