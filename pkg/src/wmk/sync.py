"""Scale/translation synchronization via a universal template field.

A watermarked image that went through uniform scaling s and translation
(dx, dy) is mapped by SyncNet to a two-channel field whose channel X is
periodic along x (period 64*s, constant along y) and channel Y periodic
along y (period 32*s): bump centers sit at the centers of the overlay
tiles, x = s*(n + 1/2)*64 + dx and y = s*(m + 1/2)*32 + dy. Matching the
observed field against synthetically transformed templates by brute force
recovers (s, dx, dy); offsets are identifiable only modulo one tile period
(64*s, 32*s), which is harmless because the overlay is tiled.

The search is separable: channel X constant along columns means the full
2-D residual decomposes into a 1-D column-profile residual plus terms
independent of (s, dx), and likewise for Y, so scanning 1-D profiles is
exactly equivalent to the exhaustive 3-D scan on the same grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .distortions import scale_translate
from .encoder import MASK_H, MASK_W
from .rng import Rng
from .tensor import Tensor

MIN_SYNC_INPUT = 16

DEFAULT_SYNC_LAYERS = ((16, 3), (16, 3), (2, 3))


class SyncError(ValueError):
    pass


# ---------------------------------------------------------------------------
# universal template
# ---------------------------------------------------------------------------


def _axis_profile(n: int, tile: int, s: float, offset: float, shape: str) -> np.ndarray:
    """Periodic bump profile at integer coordinates 0..n-1 (float64).

    Peaks of height 1 at offset + s*(k + 1/2)*tile for all integers k;
    'gauss' bumps have sigma = period/8, 'cosine' is a raised cosine.
    """
    period = s * tile
    t = np.arange(n, dtype=np.float64) - offset
    m = np.mod(t - period / 2.0, period)
    if shape == "gauss":
        d = np.minimum(m, period - m)
        sigma = period / 8.0
        return np.exp(-0.5 * (d / sigma) ** 2)
    if shape == "cosine":
        return 0.5 + 0.5 * np.cos(2.0 * np.pi * m / period)
    raise ValueError(f"unknown bump shape: {shape!r}")


def universal_template(h: int, w: int, s: float = 1.0, dx: float = 0.0, dy: float = 0.0,
                       shape: str = "gauss") -> np.ndarray:
    """(2, h, w) float32 field: channel 0 periodic in x, channel 1 in y."""
    if h < 1 or w < 1:
        raise ValueError(f"template dims must be >= 1, got {h}x{w}")
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    px = _axis_profile(w, MASK_W, s, dx, shape).astype(np.float32)
    py = _axis_profile(h, MASK_H, s, dy, shape).astype(np.float32)
    field = np.empty((2, h, w), dtype=np.float32)
    field[0] = px[None, :]
    field[1] = py[:, None]
    return field


# ---------------------------------------------------------------------------
# SyncNet
# ---------------------------------------------------------------------------


@dataclass
class SyncNetParams:
    """Conv stack mapping a 3-channel image to the 2-channel field."""

    tensors_by_name: dict[str, Tensor]
    layers: tuple = DEFAULT_SYNC_LAYERS

    def tensors(self) -> dict[str, Tensor]:
        return self.tensors_by_name


def init_syncnet_params(rng: Rng, layers=DEFAULT_SYNC_LAYERS) -> SyncNetParams:
    if layers[-1][0] != 2:
        raise ValueError("final sync layer must emit 2 channels")
    named = {}
    c_in = 3
    for i, (c_out, k) in enumerate(layers):
        bound = np.sqrt(6.0 / (c_in * k * k))
        named[f"sync/l{i}/w"] = Tensor(
            rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32), requires_grad=True)
        named[f"sync/l{i}/b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        c_in = c_out
    return SyncNetParams(named, layers)


def syncnet_forward_graph(image_chw, params: SyncNetParams, accum: str = "f64") -> Tensor:
    """Differentiable (3, H, W) -> (2, H, W) field with sigmoid output."""
    x = image_chw if isinstance(image_chw, Tensor) else Tensor(image_chw)
    _, h, w = x.shape
    if h < MIN_SYNC_INPUT or w < MIN_SYNC_INPUT:
        raise SyncError(f"sync input must be at least {MIN_SYNC_INPUT}x{MIN_SYNC_INPUT}, got {h}x{w}")
    n = len(params.layers)
    for i in range(n):
        w_t = params.tensors_by_name[f"sync/l{i}/w"]
        x = T.conv2d(x, w_t, stride=1, padding="same", accum=accum)
        x = T.add(x, T.reshape(params.tensors_by_name[f"sync/l{i}/b"], (w_t.shape[0], 1, 1)))
        x = T.relu(x) if i < n - 1 else T.sigmoid(x)
    return x


def syncnet_forward(image: np.ndarray, params: SyncNetParams) -> np.ndarray:
    chw = np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1))
    return syncnet_forward_graph(Tensor(chw), params).data


# ---------------------------------------------------------------------------
# brute-force transform search
# ---------------------------------------------------------------------------


@dataclass
class SearchGrid:
    scale_min: float = 0.5
    scale_max: float = 2.0
    scale_step: float = 0.005

    def __post_init__(self):
        if self.scale_min <= 0 or self.scale_max < self.scale_min or self.scale_step <= 0:
            raise ValueError(f"invalid search grid: {self}")

    def scales(self) -> np.ndarray:
        n = int(np.floor((self.scale_max - self.scale_min) / self.scale_step + 1e-9)) + 1
        return self.scale_min + self.scale_step * np.arange(n)


@dataclass
class TransformEstimate:
    """Recovered transform; offsets are canonical in [0, period*scale)."""

    scale: float
    dx: float
    dy: float
    residual: float  # achieved squared error per field component
    confident: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {"scale": round(self.scale, 6), "dx": self.dx, "dy": self.dy,
             "residual": self.residual, "confident": self.confident})


def offsets_in_period(s: float, tile: int) -> int:
    """Number of integer offsets in [0, tile*s)."""
    period = s * tile
    return int(np.floor(period - 1e-9)) + 1


def _axis_residuals(profile: np.ndarray, tile: int, s: float, shape: str) -> np.ndarray:
    """Sum of squared errors of the 1-D model vs profile for every integer
    offset in [0, tile*s); index d of the result is offset d."""
    n = profile.shape[0]
    n_off = offsets_in_period(s, tile)
    # model(x; d) = g(x - d); evaluate g once on coords [-(n_off-1), n) and slide.
    # _axis_profile(N, ..., offset=o)[i] = g(i - o), so passing o = n_off - 1
    # makes base[i] = g(i - (n_off - 1)); window j covers g(j + x - (n_off - 1)),
    # i.e. offset d corresponds to window j = n_off - 1 - d.
    base = _axis_profile(n + n_off - 1, tile, s, float(n_off - 1), shape)
    base32 = base.astype(np.float32).astype(np.float64)
    wins = np.lib.stride_tricks.sliding_window_view(base32, n)
    diffs = wins - profile[None, :]
    res = np.einsum("ij,ij->i", diffs, diffs)
    return res[::-1].copy()


def estimate_transform(field: np.ndarray, grid: SearchGrid | None = None,
                       shape: str = "gauss") -> TransformEstimate:
    """Exhaustive grid search minimizing the squared template mismatch.

    Channel X is reduced to a 1-D profile by averaging over rows and matched
    against the shifted bump comb per candidate scale (and Y likewise over
    columns); the joint scale minimizing the combined residual wins. Model
    values are rounded to float32 before differencing, matching the field
    quantization, so grid-generated templates reach an exactly zero residual.
    Ties break toward the smallest scale, then dx, then dy.
    """
    grid = grid or SearchGrid()
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[0] != 2:
        raise SyncError(f"field must be (2, H, W), got {field.shape}")
    f64 = field.astype(np.float64)
    _, H, W = f64.shape
    prof_x = f64[0].mean(axis=0)
    prof_y = f64[1].mean(axis=1)
    # parts of the 2-D residual independent of the candidate transform
    const_x = float((f64[0] ** 2).sum() - H * (prof_x ** 2).sum())
    const_y = float((f64[1] ** 2).sum() - W * (prof_y ** 2).sum())

    best = None  # (total, s, dx, dy)
    for s in grid.scales():
        rx = _axis_residuals(prof_x, MASK_W, s, shape)
        ry = _axis_residuals(prof_y, MASK_H, s, shape)
        dx = int(np.argmin(rx))
        dy = int(np.argmin(ry))
        total = H * rx[dx] + W * ry[dy]
        if best is None or total < best[0]:
            best = (total, float(s), dx, dy)

    total, s, dx, dy = best
    residual = max(0.0, (total + const_x + const_y) / (2.0 * H * W))
    baseline = float(((f64 - 0.5) ** 2).mean())
    confident = bool(residual < 0.9 * baseline)
    return TransformEstimate(s, float(dx), float(dy), float(residual), confident)


def canonical_offset(value: float, s: float, tile: int) -> float:
    """Reduce an offset to the canonical range [0, tile*s)."""
    period = s * tile
    return float(np.mod(value, period))


def rectify(image: np.ndarray, est: TransformEstimate) -> np.ndarray:
    """Invert the estimated transform so overlay tiles realign to the grid."""
    if est.scale <= 0:
        raise SyncError(f"estimate has non-positive scale {est.scale}")
    s = est.scale
    return scale_translate(image, 1.0 / s, -est.dx / s, -est.dy / s)
