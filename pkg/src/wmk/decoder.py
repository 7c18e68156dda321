"""Convolutional message decoder with tiled pooling.

The network is fully convolutional: a small stack of stride-1 same-padding
conv layers, a 16x16 stride-16 head with 64 channels, a 1x1 head with 16
channels, then tiled pooling down to a (16, 2, 4) grid of logits. Any input
whose dimensions are multiples of the 32x64 overlay tile is accepted;
other sizes are cropped top-left to the nearest multiples first.

Bit order of the 128 logits: row-major over (row, column, channel) of the
2x4x16 grid. Thresholding maps logit > 0 to bit 1; an exact 0 gives bit 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import MASK_H, MASK_W, MESSAGE_BITS
from .rng import Rng
from .tensor import Tensor, make_op

HEAD1_KERNEL = 16
HEAD1_CHANNELS = 64
HEAD2_CHANNELS = 16
POOL_ROWS = MASK_H // HEAD1_KERNEL  # 2
POOL_COLS = MASK_W // HEAD1_KERNEL  # 4

DEFAULT_BACKBONE = ((16, 3), (32, 3), (32, 3))


class DecodeError(ValueError):
    pass


@dataclass
class DecoderParams:
    """Named conv weights; backbone layout is (out_channels, kernel) pairs."""

    tensors_by_name: dict[str, Tensor]
    backbone: tuple = DEFAULT_BACKBONE

    def tensors(self) -> dict[str, Tensor]:
        return self.tensors_by_name


def _conv_init(rng: Rng, c_out: int, c_in: int, k: int, scale: float = 1.0) -> np.ndarray:
    # variance-preserving bound: keeps activation scale roughly constant
    # through the relu stack so logits start at a trainable magnitude
    bound = scale * np.sqrt(6.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32)


def init_decoder_params(rng: Rng, backbone=DEFAULT_BACKBONE, matched: bool = True) -> DecoderParams:
    """Decoder weights; by default matched to the encoder's starting layout.

    Desk-scale joint training cannot afford the long plateau a fully random
    net spends discovering the watermark subspace (the bit signal enters at
    alpha/2 of a pixel), so the stack starts as a weak matched decoder for
    the initial cell/sub-block layout: identity-dominant backbone channels,
    head1 filters reading each sub-block minus its cell mean in paired-sign
    channel pairs (so relu keeps the signed response), and head2 wiring each
    logit to its pair. All weights remain free; training reshapes them.
    ``matched=False`` falls back to plain variance-preserving noise.
    """
    from .encoder import bit_cell_map

    named = {}
    c_in = 3
    for i, (c_out, k) in enumerate(backbone):
        w = _conv_init(rng.child("b", i), c_out, c_in, k, scale=0.1 if matched else 1.0)
        if matched:
            for c in range(min(c_in, c_out)):
                w[c, c, k // 2, k // 2] += 1.0
        named[f"dec/b{i}/w"] = Tensor(w, requires_grad=True)
        named[f"dec/b{i}/b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        c_in = c_out

    h1 = _conv_init(rng.child("h1"), HEAD1_CHANNELS, c_in, HEAD1_KERNEL,
                    scale=0.05 if matched else 1.0)
    h2 = _conv_init(rng.child("h2"), HEAD2_CHANNELS, HEAD1_CHANNELS, 1,
                    scale=0.05 if matched else 1.0)
    if matched:
        cell_bits = bit_cell_map()[:HEAD1_KERNEL, :HEAD1_KERNEL] % HEAD2_CHANNELS
        for m in range(HEAD2_CHANNELS):
            # sub-block mean minus cell mean: cover low frequencies cancel,
            # the bit's saturated sub-block survives with its sign; gains are
            # spread between the heads so every weight sits well above the
            # optimizer step size
            filt = (cell_bits == m).astype(np.float32)
            filt = filt / filt.sum() - 1.0 / (HEAD1_KERNEL * HEAD1_KERNEL)
            for ch in range(3):
                h1[m, ch] += filt * (8.0 / 3.0)
                h1[HEAD2_CHANNELS + m, ch] -= filt * (8.0 / 3.0)
            h2[m, m, 0, 0] += 3.0
            h2[m, HEAD2_CHANNELS + m, 0, 0] -= 3.0
    named["dec/h1/w"] = Tensor(h1, requires_grad=True)
    named["dec/h1/b"] = Tensor(np.zeros(HEAD1_CHANNELS, dtype=np.float32), requires_grad=True)
    named["dec/h2/w"] = Tensor(h2, requires_grad=True)
    named["dec/h2/b"] = Tensor(np.zeros(HEAD2_CHANNELS, dtype=np.float32), requires_grad=True)
    return DecoderParams(named, backbone)


def crop_to_grid(image: np.ndarray) -> np.ndarray:
    """Top-left crop to the nearest multiples of (32, 64)."""
    h, w = image.shape[:2]
    gh, gw = (h // MASK_H) * MASK_H, (w // MASK_W) * MASK_W
    if gh == 0 or gw == 0:
        raise DecodeError(f"image {h}x{w} smaller than the {MASK_H}x{MASK_W} overlay tile")
    return image[:gh, :gw]


def tiled_pool(features) -> Tensor:
    """Average features over positions congruent modulo the (2, 4) tile grid.

    Input (C, H, W) with H, W multiples of (2, 4); output[c, i, j] is the
    mean of features[c, i + 2a, j + 4b] over all tile indices (a, b). A
    leading batch axis is carried through unchanged.
    """
    f = features if isinstance(features, Tensor) else Tensor(features)
    lead = f.shape[:-2]
    H, W = f.shape[-2], f.shape[-1]
    if H % POOL_ROWS or W % POOL_COLS:
        raise DecodeError(f"tiled_pool needs spatial dims multiple of ({POOL_ROWS}, {POOL_COLS}), got {H}x{W}")
    ny, nx = H // POOL_ROWS, W // POOL_COLS
    blocks = f.data.reshape(*lead, ny, POOL_ROWS, nx, POOL_COLS)
    out = blocks.mean(axis=(-4, -2), dtype=np.float64).astype(f.dtype)

    def backward(g):
        gb = np.broadcast_to(
            np.expand_dims(np.expand_dims(g, -2), -4) / (ny * nx),
            (*lead, ny, POOL_ROWS, nx, POOL_COLS))
        f.accumulate_grad(gb.reshape(*lead, H, W))

    return make_op(out, (f,), backward)


def decode_logits_graph(image_chw, params: DecoderParams, accum: str = "f64") -> Tensor:
    """Differentiable path from a (3, H, W) tensor to 128 logits.

    The input must already be cropped to tile multiples; a batched
    (N, 3, H, W) input yields (N, 128). Relu follows each backbone layer
    and head1; head2 emits raw logits.
    """
    x = image_chw if isinstance(image_chw, Tensor) else Tensor(image_chw)
    batched = x.data.ndim == 4
    h, w = x.shape[-2], x.shape[-1]
    if h % MASK_H or w % MASK_W:
        raise DecodeError(f"decoder input must be tile-aligned, got {h}x{w}")
    p = params.tensors_by_name

    def conv(t, name, stride, padding):
        out = T.conv2d(t, p[f"{name}/w"], stride=stride, padding=padding, accum=accum)
        c_out = p[f"{name}/w"].shape[0]
        return T.add(out, T.reshape(p[f"{name}/b"], (c_out, 1, 1)))

    for i in range(len(params.backbone)):
        x = T.relu(conv(x, f"dec/b{i}", 1, "same"))
    x = T.relu(conv(x, "dec/h1", HEAD1_KERNEL, "valid"))
    x = conv(x, "dec/h2", 1, "valid")
    pooled = tiled_pool(x)  # (..., 16, 2, 4)
    if batched:
        grid = T.transpose(pooled, (0, 2, 3, 1))  # (N, 2, 4, 16), position-major
        return T.reshape(grid, (x.shape[0], MESSAGE_BITS))
    grid = T.transpose(pooled, (1, 2, 0))
    return T.reshape(grid, (MESSAGE_BITS,))


def decode_logits(image: np.ndarray, params: DecoderParams) -> np.ndarray:
    """Decode a (H, W, 3) image to 128 logits; crops to the grid internally."""
    img = crop_to_grid(np.asarray(image, dtype=np.float32))
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    return decode_logits_graph(Tensor(chw), params).data


def threshold(logits: np.ndarray) -> np.ndarray:
    """Bit = 1 iff sigmoid(logit) > 0.5, i.e. logit > 0; ties map to 0."""
    return (np.asarray(logits) > 0).astype(np.int8)


def confidences(logits: np.ndarray) -> np.ndarray:
    """Per-bit sigmoid of the logits."""
    x = np.asarray(logits, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-x))


def decode_message(image: np.ndarray, params: DecoderParams) -> np.ndarray:
    return threshold(decode_logits(image, params))
