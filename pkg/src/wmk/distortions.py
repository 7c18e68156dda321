"""Differentiable distortion pipeline and benchmark-time corruptions.

All distortions are deterministic given (input, parameters, seed) and exist
in two flavors sharing one implementation: a graph path over (3, H, W)
tensors used inside training (``*_t`` functions, differentiable w.r.t. the
image), and numpy wrappers over (H, W, 3) arrays for benchmark use.

The JPEG codec covers the lossy stages only: YCbCr conversion, optional 2x2
chroma averaging (4:2:0), 8x8 block DCT, quantization with the standard
tables scaled by the conventional quality law, rounding, and the inverse
path. Rounding is either hard or straight-through (hard forward, identity
gradient). Entropy coding is irrelevant to robustness and omitted. Results
approximate but do not bit-match libjpeg.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor, make_op

# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class DistortionConfig:
    jpeg_quality: int = 85
    jpeg_mode: str = "444"
    noise_std_range: tuple = (0.01, 0.03)
    offset_range: tuple = (0.0, 4.0)
    scale_range: tuple = (1.0, 1.02)
    crop_fraction: float = 0.8
    compose_mode: str = "all"  # "all" composes every distortion; "one_of" samples one

    def __post_init__(self):
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must be in [1, 100], got {self.jpeg_quality}")
        if self.jpeg_mode not in ("444", "420"):
            raise ValueError(f"jpeg_mode must be '444' or '420', got {self.jpeg_mode!r}")
        for name in ("noise_std_range", "offset_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered (lo <= hi), got ({lo}, {hi})")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.compose_mode not in ("all", "one_of"):
            raise ValueError(f"compose_mode must be 'all' or 'one_of', got {self.compose_mode!r}")


def _to_chw_tensor(img: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))


def _to_hwc(x: Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.data.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# gaussian noise
# ---------------------------------------------------------------------------


def gaussian_noise_t(x: Tensor, std: float, rng: Rng) -> Tensor:
    """Add i.i.d. N(0, std^2) per component; gradient is the identity."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return x
    noise = rng.normal(std, size=x.shape).astype(x.dtype)

    def backward(g):
        x.accumulate_grad(g)

    return make_op(x.data + noise, (x,), backward)


def gaussian_noise(image: np.ndarray, std: float, rng: Rng, clamp: bool = True) -> np.ndarray:
    out = _to_hwc(gaussian_noise_t(_to_chw_tensor(image), std, rng))
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# scale + translation warp
# ---------------------------------------------------------------------------


def scale_translate_t(x: Tensor, s: float, dx: float, dy: float) -> Tensor:
    """Uniform scale and shift: output(y, x) samples input at ((y-dy)/s, (x-dx)/s).

    The output canvas is round(s*H) x round(s*W); samples falling outside
    the input clamp to the nearest edge. Differentiable w.r.t. the image.
    """
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    C, H, W = x.shape
    out_h = max(1, int(round(s * H)))
    out_w = max(1, int(round(s * W)))
    ys = np.clip((np.arange(out_h) - dy) / s, 0.0, H - 1)
    xs = np.clip((np.arange(out_w) - dx) / s, 0.0, W - 1)
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(H - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(W - 2, 0))
    wy = (ys - y0).astype(x.dtype)
    wx = (xs - x0).astype(x.dtype)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)

    d = x.data
    top = d[:, y0][:, :, x0] * (1 - wx) + d[:, y0][:, :, x1] * wx
    bot = d[:, y1][:, :, x0] * (1 - wx) + d[:, y1][:, :, x1] * wx
    out = top * (1 - wy[None, :, None]) + bot * wy[None, :, None]

    def backward(g):
        gi = np.zeros((C, H, W), dtype=np.float64)
        for rows, gw_y in ((y0, 1 - wy), (y1, wy)):
            gpart = g * gw_y[None, :, None]
            for cols, gw_x in ((x0, 1 - wx), (x1, wx)):
                contrib = gpart * gw_x
                flat = (rows[:, None] * W + cols[None, :]).ravel()
                for c in range(C):
                    gi[c] += np.bincount(flat, weights=contrib[c].ravel(), minlength=H * W).reshape(H, W)
        x.accumulate_grad(gi)

    return make_op(out.astype(x.dtype), (x,), backward)


def scale_translate(image: np.ndarray, s: float, dx: float, dy: float) -> np.ndarray:
    return _to_hwc(scale_translate_t(_to_chw_tensor(image), s, dx, dy))


# ---------------------------------------------------------------------------
# random crop
# ---------------------------------------------------------------------------


def rand_crop(image: np.ndarray, fraction: float, rng: Rng):
    """Axis-aligned crop of floor(fraction * dims) at a uniform origin.

    Returns (crop, (x0, y0)) so callers can reconstruct the true transform.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    h, w = image.shape[:2]
    ch, cw = int(fraction * h), int(fraction * w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return image[y0 : y0 + ch, x0 : x0 + cw], (x0, y0)


# ---------------------------------------------------------------------------
# JPEG
# ---------------------------------------------------------------------------

_QT_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_QT_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def quantization_table(quality: int, chroma: bool) -> np.ndarray:
    """Standard table scaled by the conventional quality law."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    base = _QT_CHROMA if chroma else _QT_LUMA
    return np.clip(np.floor((base * s + 50.0) / 100.0), 1.0, 255.0)


def _dct_basis() -> np.ndarray:
    k = np.arange(8)
    u = k[:, None]
    a = np.sqrt(np.where(u == 0, 1.0, 2.0) / 8.0)
    return a * np.cos((2 * k[None, :] + 1) * u * np.pi / 16.0)


_DCT_A = _dct_basis()

_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])
_YCBCR_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def _channel_affine(x: Tensor, mat: np.ndarray, off: np.ndarray) -> Tensor:
    """Per-pixel affine map on the channel axis of a (3, H, W) tensor."""
    out = np.einsum("ck,khw->chw", mat, x.data.astype(np.float64)) + off[:, None, None]

    def backward(g):
        x.accumulate_grad(np.einsum("kc,khw->chw", mat, g.astype(np.float64)))

    return make_op(out.astype(x.dtype), (x,), backward)


def _channel_select(x: Tensor, c: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[c] = g
        x.accumulate_grad(full)

    return make_op(np.ascontiguousarray(x.data[c]), (x,), backward)


def _stack3(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(g[0])
        b.accumulate_grad(g[1])
        c.accumulate_grad(g[2])

    return make_op(np.stack([a.data, b.data, c.data]), (a, b, c), backward)


def _avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling of a (H, W) tensor with even dims."""
    H, W = x.shape
    out = x.data.reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3), dtype=np.float64)

    def backward(g):
        x.accumulate_grad(np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25)

    return make_op(out.astype(x.dtype), (x,), backward)


def _upsample2(x: Tensor) -> Tensor:
    """2x nearest upsampling of a (H, W) tensor."""
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    H, W = x.shape

    def backward(g):
        x.accumulate_grad(g.reshape(H, 2, W, 2).sum(axis=(1, 3)))

    return make_op(out, (x,), backward)


def _round_op(x: Tensor, rounding: str) -> Tensor:
    """Round to nearest; gradient is identity (straight_through) or zero (hard)."""

    def backward(g):
        if rounding == "straight_through":
            x.accumulate_grad(g)

    return make_op(np.round(x.data), (x,), backward)


def _blockify(x: Tensor) -> Tensor:
    """(H, W) -> (H/8 * W/8, 8, 8) in raster block order."""
    H, W = x.shape
    t = T.reshape(x, (H // 8, 8, W // 8, 8))
    t = T.transpose(t, (0, 2, 1, 3))
    return T.reshape(t, (H // 8 * (W // 8), 8, 8))


def _unblockify(x: Tensor, H: int, W: int) -> Tensor:
    t = T.reshape(x, (H // 8, W // 8, 8, 8))
    t = T.transpose(t, (0, 2, 1, 3))
    return T.reshape(t, (H, W))


def _dct8(x: Tensor, inverse: bool = False) -> Tensor:
    a = _DCT_A.T if inverse else _DCT_A
    out = a[None] @ x.data.astype(np.float64) @ a.T[None]

    def backward(g):
        x.accumulate_grad(a.T[None] @ g.astype(np.float64) @ a[None])

    return make_op(out.astype(x.dtype), (x,), backward)


def _jpeg_component(comp: Tensor, table: np.ndarray, rounding: str) -> Tensor:
    H, W = comp.shape
    blocks = _blockify(T.add_const(comp, -128.0))
    coeffs = _dct8(blocks)
    q = _round_op(mul_const_array(coeffs, 1.0 / table), rounding)
    deq = mul_const_array(q, table)
    rec = T.add_const(_dct8(deq, inverse=True), 128.0)
    return _unblockify(rec, H, W)


def mul_const_array(x: Tensor, arr: np.ndarray) -> Tensor:
    arr = np.asarray(arr, dtype=x.dtype)

    def backward(g):
        x.accumulate_grad(g * arr)

    return make_op(x.data * arr, (x,), backward)


def diff_jpeg_t(x: Tensor, quality: int, mode: str = "444",
                rounding: str = "straight_through") -> Tensor:
    """JPEG compression loss applied to a (3, H, W) tensor in [0, 1].

    Pads to multiples of 16 with edge replication, runs the DCT/quantize
    round trip per component (chroma at half resolution in 420 mode), and
    crops back. Output is not clamped; callers wanting byte semantics clamp.
    """
    if rounding not in ("straight_through", "hard"):
        raise ValueError(f"rounding must be 'straight_through' or 'hard', got {rounding!r}")
    if mode not in ("444", "420"):
        raise ValueError(f"mode must be '444' or '420', got {mode!r}")
    C, H, W = x.shape
    pad_h = (-H) % 16
    pad_w = (-W) % 16
    p = T.pad2d(x, 0, pad_h, 0, pad_w, mode="edge") if (pad_h or pad_w) else x
    p = T.scale(p, 255.0)
    ycc = _channel_affine(p, _RGB_TO_YCBCR, _YCBCR_OFFSET)

    t_luma = quantization_table(quality, chroma=False)
    t_chroma = quantization_table(quality, chroma=True)

    y = _jpeg_component(_channel_select(ycc, 0), t_luma, rounding)
    cb = _channel_select(ycc, 1)
    cr = _channel_select(ycc, 2)
    if mode == "420":
        cb = _upsample2(_jpeg_component(_avg_pool2(cb), t_chroma, rounding))
        cr = _upsample2(_jpeg_component(_avg_pool2(cr), t_chroma, rounding))
    else:
        cb = _jpeg_component(cb, t_chroma, rounding)
        cr = _jpeg_component(cr, t_chroma, rounding)

    rgb = _channel_affine(_stack3(y, cb, cr), _YCBCR_TO_RGB,
                          -_YCBCR_TO_RGB @ _YCBCR_OFFSET)
    rgb = T.scale(rgb, 1.0 / 255.0)
    if pad_h or pad_w:
        rgb = T.crop2d(rgb, 0, H, 0, W)
    return rgb


def diff_jpeg(image: np.ndarray, quality: int, mode: str = "444",
              rounding: str = "hard", clamp: bool = True) -> np.ndarray:
    out = _to_hwc(diff_jpeg_t(_to_chw_tensor(image), quality, mode, rounding))
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# sampled training distortion
# ---------------------------------------------------------------------------


class ComposedDistortion:
    """One draw from the training distortion distributions.

    Applies scale_translate -> gaussian_noise -> straight-through JPEG in
    that fixed order (or a single sampled stage in one-of mode). Calling it
    twice with the same draw reproduces the same noise field.
    """

    def __init__(self, cfg: DistortionConfig, rng: Rng):
        self.scale = float(rng.uniform(*cfg.scale_range))
        self.dx = float(rng.uniform(*cfg.offset_range))
        self.dy = float(rng.uniform(*cfg.offset_range))
        self.noise_std = float(rng.uniform(*cfg.noise_std_range))
        self.quality = cfg.jpeg_quality
        self.mode = cfg.jpeg_mode
        if cfg.compose_mode == "one_of":
            self.stages = (("geometry", "noise", "jpeg")[rng.choice(3)],)
        else:
            self.stages = ("geometry", "noise", "jpeg")
        self._noise_rng = rng.child("noise")

    def __call__(self, x: Tensor) -> Tensor:
        noise_rng = Rng(self._noise_rng.seed)
        if "geometry" in self.stages:
            x = scale_translate_t(x, self.scale, self.dx, self.dy)
        if "noise" in self.stages:
            x = gaussian_noise_t(x, self.noise_std, noise_rng)
        if "jpeg" in self.stages:
            x = diff_jpeg_t(x, self.quality, self.mode, rounding="straight_through")
        return x


def sample_training_distortion(cfg: DistortionConfig, rng: Rng) -> ComposedDistortion:
    return ComposedDistortion(cfg, rng)
