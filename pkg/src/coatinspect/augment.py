"""Seeded geometric and photometric augmentation of good images."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core import DatasetManifest, ManifestEntry, load_image, quantize, save_image, save_manifest
from .imops import sample_bilinear
from .synthgen import derive_seed


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotation_deg: float = 0.0
    translate_px: float = 0.0
    hue_shift: float = 0.0        # degrees on the hue circle
    saturation_pct: float = 0.0
    brightness_pct: float = 0.0   # additive offset, percent of full scale
    exposure_pct: float = 0.0     # multiplicative gain in linear light
    contrast_pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and v < 0:
                raise ValueError(f"{f.name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown augment policy keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def offline_policy(seed: int = 0) -> AugmentPolicy:
    """Offline expansion recipe: flips, +-45 deg, hue +-25, sat +-30%, brightness +-25%, exposure +-5%."""
    return AugmentPolicy(horizontal_flip=True, vertical_flip=True, rotation_deg=45.0,
                         hue_shift=25.0, saturation_pct=30.0, brightness_pct=25.0,
                         exposure_pct=5.0, seed=seed)


def train_policy(seed: int = 0) -> AugmentPolicy:
    """Train-time recipe: +-15 deg, +-10 px, brightness/contrast +-25%."""
    return AugmentPolicy(rotation_deg=15.0, translate_px=10.0, brightness_pct=25.0,
                         contrast_pct=25.0, seed=seed)


POLICIES = {"offline": offline_policy, "train": train_policy}


# ---------------------------------------------------------------------------
# primitives


def flip(img: np.ndarray, horizontal: bool = True) -> np.ndarray:
    return img[:, ::-1].copy() if horizontal else img[::-1].copy()


def warp_affine(img: np.ndarray, angle_deg: float, tx: float = 0.0, ty: float = 0.0) -> np.ndarray:
    """Rotate about the image center then translate; bilinear, reflect padding. Returns float."""
    h, w = img.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    dx, dy = xx - cx - tx, yy - cy - ty
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    return sample_bilinear(img, sx, sy, mode="reflect")


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 1] -> HSV with hue in [0, 1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h % 1.0, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _srgb_to_linear(x):
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(x):
    x = np.clip(x, 0.0, None)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1 / 2.4) - 0.055)


# ---------------------------------------------------------------------------


def sample_params(policy: AugmentPolicy, index: int) -> dict:
    rng = np.random.default_rng(derive_seed(policy.seed, index))

    def sym(r):
        # always consume a draw so parameters stay aligned across policies
        return float(rng.uniform(-1.0, 1.0) * r)

    return {
        "hflip": bool(rng.random() < 0.5) and policy.horizontal_flip,
        "vflip": bool(rng.random() < 0.5) and policy.vertical_flip,
        "rotation": sym(policy.rotation_deg),
        "tx": sym(policy.translate_px),
        "ty": sym(policy.translate_px),
        "hue": sym(policy.hue_shift),
        "saturation": sym(policy.saturation_pct) / 100.0,
        "brightness": sym(policy.brightness_pct) / 100.0,
        "exposure": sym(policy.exposure_pct) / 100.0,
        "contrast": sym(policy.contrast_pct) / 100.0,
    }


def apply_params(img: np.ndarray, p: dict) -> np.ndarray:
    out = np.asarray(img)
    if p["hflip"]:
        out = flip(out, horizontal=True)
    if p["vflip"]:
        out = flip(out, horizontal=False)
    x = out.astype(np.float64) / 255.0
    if p["rotation"] or p["tx"] or p["ty"]:
        x = warp_affine(x, p["rotation"], p["tx"], p["ty"])
    if p["hue"] or p["saturation"]:
        hsv = rgb_to_hsv(np.clip(x, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + p["hue"] / 360.0) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + p["saturation"]), 0.0, 1.0)
        x = hsv_to_rgb(hsv)
    if p["brightness"]:
        x = x + p["brightness"]
    if p["exposure"]:
        x = _linear_to_srgb(_srgb_to_linear(np.clip(x, 0, 1)) * (1.0 + p["exposure"]))
    if p["contrast"]:
        x = (x - x.mean()) * (1.0 + p["contrast"]) + x.mean()
    return quantize(x * 255.0)


def augment(img: np.ndarray, policy: AugmentPolicy, index: int) -> np.ndarray:
    """Deterministic augmentation of an RGB uint8 image for (policy.seed, index)."""
    return apply_params(img, sample_params(policy, index))


def expand_dataset(manifest: DatasetManifest, policy: AugmentPolicy, copies: int,
                   out_dir) -> DatasetManifest:
    """Add ``copies`` augmented variants of every good image; bad images pass through untouched."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if copies < 0:
        raise ValueError("copies must be >= 0")
    if copies == 0:
        return manifest
    out = Path(out_dir)
    entries = []
    for e in manifest:
        src = manifest.resolve(e.path)
        mask = None if e.mask is None else str(manifest.resolve(e.mask).resolve())
        entries.append(ManifestEntry(str(src.resolve()), e.label, mask))
    index = 0
    for e in manifest:
        if e.label != "good":
            continue
        img = load_image(manifest.resolve(e.path))
        stem = Path(e.path).stem
        for c in range(copies):
            rel = f"aug/{stem}_aug{c:02d}.ppm"
            save_image(out / rel, augment(img, policy, index))
            index += 1
            entries.append(ManifestEntry(str((out / rel).resolve()), "good", None))
    result = DatasetManifest(tuple(entries), out)
    save_manifest(out / "manifest.json", result)
    return result
