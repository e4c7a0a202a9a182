"""Image and buffer I/O: 8-bit PNG for color, little-endian PFM for float
channels, indexed PNG for group maps, plus a deterministic synthetic style
image for self-contained runs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ValidationError
from .grouping import BACKGROUND, GroupIdentityMap

GROUP_PNG_BACKGROUND = 255


def save_png(img: np.ndarray, path) -> None:
    """Clamp to [0, 1] and write 8-bit RGB."""
    arr = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"image not found: {p}")
    return np.asarray(Image.open(p).convert("RGB"), dtype=float) / 255.0


def save_pfm(arr: np.ndarray, path) -> None:
    """Grayscale (H, W) or multi-channel (H, W, C) float buffer as
    little-endian PFM; multi-channel data is stored as C stacked planes
    ((H*C) x W) in one 'Pf' file."""
    if arr.ndim == 3:
        arr = np.concatenate([arr[:, :, c] for c in range(arr.shape[2])], axis=0)
    h, w = arr.shape
    data = np.flipud(arr).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")   # negative scale marks little-endian
        fh.write(data)


def load_pfm(path, channels: int = 1) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"PFM file not found: {p}")
    with open(p, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValidationError(f"{p}: not a grayscale PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(fh.read(4 * w * h), dtype=dtype).reshape(h, w)
    arr = np.flipud(arr).astype(float)
    if channels > 1:
        plane_h = h // channels
        arr = np.stack([arr[c * plane_h:(c + 1) * plane_h] for c in range(channels)],
                       axis=2)
    return arr


def save_group_map(gmap: GroupIdentityMap, path) -> None:
    """8-bit indexed PNG (background = 255) with a JSON sidecar carrying K
    and the view tag."""
    ids = gmap.ids.copy()
    ids[ids == BACKGROUND] = GROUP_PNG_BACKGROUND
    img = Image.fromarray(ids.astype(np.uint8), mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    for i in range(gmap.k):
        palette[i] = [(37 * (i + 1)) % 256, (97 * (i + 1)) % 256, (173 * (i + 1)) % 256]
    palette[GROUP_PNG_BACKGROUND] = [0, 0, 0]
    img.putpalette(palette.ravel().tolist())
    img.save(path)
    Path(str(path) + ".json").write_text(json.dumps(
        {"k": gmap.k, "source": gmap.source}, sort_keys=True))


def load_group_map(path) -> GroupIdentityMap:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"group map not found: {p}")
    meta = json.loads(Path(str(path) + ".json").read_text())
    ids = np.asarray(Image.open(p), dtype=np.int32).copy()
    ids[ids == GROUP_PNG_BACKGROUND] = BACKGROUND
    return GroupIdentityMap(ids=ids, k=int(meta["k"]), source=meta.get("source", ""))


def make_style_image(seed: int, height: int = 64, width: int = 64) -> np.ndarray:
    """Deterministic synthetic style reference: layered color waves with a
    few high-contrast seeded blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.zeros((height, width, 3))
    for c in range(3):
        fx_, fy_, ph = rng.uniform(2, 9), rng.uniform(2, 9), rng.uniform(0, 6.28)
        img[:, :, c] = 0.5 + 0.35 * np.sin(fx_ * xx * 6.283 + fy_ * yy * 6.283 + ph)
    for _ in range(6):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.18)
        col = rng.uniform(0, 1, 3)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2)))
        img = img * (1 - blob[..., None]) + blob[..., None] * col
    return np.clip(img, 0.0, 1.0)
