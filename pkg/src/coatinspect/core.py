"""Image containers, raster I/O and dataset manifests.

Images are plain numpy arrays:

* RGB: ``(H, W, 3)`` ``uint8``
* gray: ``(H, W)`` ``float64``, nominal range 0-255
* masks: ``(H, W)`` ``bool``
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

BT601 = np.array([0.299, 0.587, 0.114])
LABELS = ("good", "bad")


class ImageFormatError(ValueError):
    """Base class for raster decode failures."""


class MalformedHeaderError(ImageFormatError):
    pass


class UnsupportedDepthError(ImageFormatError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raster I/O


def _read_netpbm(raw: bytes, path) -> np.ndarray:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"{path}: not a binary PGM/PPM file")
    fields = []
    pos = 2
    n = len(raw)
    while len(fields) < 3:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: truncated or malformed header")
        fields.append(int(raw[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: truncated or malformed header")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedDepthError(f"{path}: maxval {maxval} (only 8-bit supported)")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = raw[pos:pos + need]
    if len(body) != need:
        raise MalformedHeaderError(
            f"{path}: raster truncated ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def read_raster(path) -> np.ndarray:
    """Decode a PPM/PGM/PNG file into a uint8 array, (H, W) or (H, W, 3)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    raw = path.read_bytes()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode in ("I;16", "I", "F"):
                raise UnsupportedDepthError(f"{path}: PNG mode {im.mode} is not 8-bit")
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
            return np.asarray(im, dtype=np.uint8).copy()
    return _read_netpbm(raw, path)


def load_image(path) -> np.ndarray:
    """Load an RGB image (H, W, 3) uint8; grayscale files are broadcast to 3 channels."""
    arr = read_raster(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def load_mask(path) -> np.ndarray:
    arr = read_raster(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return arr > 127


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_netpbm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    if arr.ndim == 3:
        h, w, c = arr.shape
        if c != 3:
            raise ValueError(f"expected 3 channels, got {c}")
        magic = b"P6"
    elif arr.ndim == 2:
        h, w = arr.shape
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def save_image(path, arr: np.ndarray) -> None:
    """Write RGB/gray/bool arrays as PPM/PGM (or PNG by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        import io

        from PIL import Image

        arr = np.asarray(arr)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8) * 255
        elif arr.dtype != np.uint8:
            arr = quantize(arr)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
        return
    atomic_write_bytes(path, encode_netpbm(arr))


def save_pgm16(path, arr: np.ndarray) -> None:
    """16-bit big-endian PGM, as the netpbm format requires."""
    arr = np.asarray(arr, dtype=">u2")
    h, w = arr.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n65535\n".encode() + arr.tobytes())


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image as float64."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * BT601[0] + img[..., 1] * BT601[1] + img[..., 2] * BT601[2]


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    mask: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = field(default_factory=tuple)
    root: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.label not in LABELS:
                raise ManifestError(f"unknown label {e.label!r} for {e.path}")
            if e.path in seen:
                raise ManifestError(f"duplicate path {e.path!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def select(self, label: str) -> "DatasetManifest":
        return DatasetManifest(tuple(e for e in self.entries if e.label == label), self.root)

    def to_json(self) -> list:
        return [{"path": e.path, "label": e.label, "mask": e.mask} for e in self.entries]


def parse_manifest(items, root=None) -> DatasetManifest:
    if not isinstance(items, list):
        raise ManifestError("manifest must be a JSON array")
    entries = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "path" not in item or "label" not in item:
            raise ManifestError(f"entry {i}: expected object with 'path' and 'label'")
        mask = item.get("mask")
        if mask is not None and not isinstance(mask, str):
            raise ManifestError(f"entry {i}: 'mask' must be a string or null")
        entries.append(ManifestEntry(str(item["path"]), str(item["label"]), mask))
    return DatasetManifest(tuple(entries), None if root is None else Path(root))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        items = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    return parse_manifest(items, root=path.parent)


def save_manifest(path, manifest: DatasetManifest) -> None:
    text = json.dumps(manifest.to_json(), indent=1)
    atomic_write_bytes(path, text.encode())


def load_entry(manifest: DatasetManifest, entry: ManifestEntry):
    """Return (image, mask or None) for a manifest entry, checking mask shape."""
    img = load_image(manifest.resolve(entry.path))
    mask = None
    if entry.mask is not None:
        mask = load_mask(manifest.resolve(entry.mask))
        if mask.shape != img.shape[:2]:
            raise ManifestError(
                f"{entry.mask}: mask shape {mask.shape} != image shape {img.shape[:2]}")
    return img, mask
