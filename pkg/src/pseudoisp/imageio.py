"""8/16-bit PNG read/write for float sRGB images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


def write_png(path, img: np.ndarray, bits: int = 16) -> None:
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    peak = 255 if bits == 8 else 65535
    q = np.round(np.clip(img, 0.0, 1.0) * peak).astype(np.uint8 if bits == 8 else np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), q[..., ::-1]):
        raise OSError(f"failed to write PNG {path}")


def read_png(path) -> np.ndarray:
    path = Path(path)
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise OSError(f"failed to read PNG {path}")
    if q.ndim == 2:
        q = np.repeat(q[..., None], 3, axis=2)
    q = q[..., :3][..., ::-1]
    peak = 255.0 if q.dtype == np.uint8 else 65535.0
    return np.ascontiguousarray(q, dtype=np.float64) / peak
