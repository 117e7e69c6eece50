"""Image and mask I/O plus small drawing helpers.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1].
Masks are boolean arrays of shape (H, W); on disk they are single-channel
PNGs with 0 = background and 255 = foreground.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError


def load_image(path: str | Path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    mask = Image.open(path).convert("L")
    return np.asarray(mask) >= 128


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def image_to_png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def draw_bbox_overlay(image: np.ndarray, bbox, thickness: int = 3,
                      color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Return a copy of the image with a rectangle drawn along the box edge.

    The rectangle grows outward from the box by up to `thickness` pixels,
    clipped at the image bounds, so box contents stay visible.
    """
    h, w = image.shape[:2]
    out = image.copy()
    color = np.asarray(color, dtype=image.dtype)
    for k in range(thickness):
        y0, y1 = bbox.y_min - k, bbox.y_max + k
        x0, x1 = bbox.x_min - k, bbox.x_max + k
        yy0, yy1 = max(y0, 0), min(y1, h - 1)
        xx0, xx1 = max(x0, 0), min(x1, w - 1)
        if 0 <= y0 < h:
            out[y0, xx0:xx1 + 1] = color
        if 0 <= y1 < h:
            out[y1, xx0:xx1 + 1] = color
        if 0 <= x0 < w:
            out[yy0:yy1 + 1, x0] = color
        if 0 <= x1 < w:
            out[yy0:yy1 + 1, x1] = color
    return out


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"{what}: {a.shape[:2]} vs {b.shape[:2]}")
