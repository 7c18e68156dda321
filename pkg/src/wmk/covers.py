"""Synthetic cover images for desk-scale training and evaluation.

Smooth random fields (low-frequency sinusoid mixtures plus soft blobs and a
touch of grain) standing in for natural photos. Values stay inside
[0.06, 0.94] so alpha blending never saturates.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


def synth_cover(rng: Rng, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) / max(h, w)
    img = np.tile(rng.uniform(0.3, 0.7, size=3)[None, None, :], (h, w, 1))
    for _ in range(4):
        fy, fx = rng.uniform(0.4, 3.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.05, 0.22)
        cvec = rng.uniform(-1.0, 1.0, size=3)
        img += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[:, :, None] * cvec[None, None, :]
    for _ in range(3):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        r = rng.uniform(0.05, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += rng.uniform(-0.2, 0.2) * blob[:, :, None] * rng.uniform(0.2, 1.0, size=3)[None, None, :]
    img += rng.normal(0.008, size=img.shape)
    lo, hi = img.min(), img.max()
    img = 0.06 + 0.88 * (img - lo) / max(hi - lo, 1e-9)
    return img.astype(np.float32)


def make_cover_set(rng: Rng, count: int, h: int, w: int) -> list[np.ndarray]:
    return [synth_cover(rng.child("cover", i), h, w) for i in range(count)]
