"""8-bit RGB PNG input/output for [0,1] float images.

Quantization is round-to-nearest, so a save/load round trip moves each
component by at most 1/510.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


class ImageReadError(IOError):
    pass


def load_png(path) -> np.ndarray:
    """Load any PIL-readable image as (H, W, 3) float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except Exception as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_bytes(image), mode="RGB").save(path, format="PNG")
