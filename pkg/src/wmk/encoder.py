"""Cover-agnostic watermark embedding.

A 128-bit message is mapped through one dense layer and a sigmoid to a
32x64 mask, multiplied by a constant color, tiled from the top-left across
the cover (partial tiles truncated at the right/bottom edges), and
alpha-blended with the cover. The overlay never depends on the cover, so a
message's colored tile can be computed once and reused for any image.

Images are (H, W, 3) float arrays with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import Tensor, make_op

MESSAGE_BITS = 128
MASK_H = 32
MASK_W = 64

DEFAULT_ALPHA = 5.0 / 255.0


class MessageError(ValueError):
    pass


def message_from_hex(hex_str: str) -> np.ndarray:
    """Decode a 32-char hex string to 128 bits, MSB of the first digit first."""
    s = hex_str.strip().lower()
    if len(s) != MESSAGE_BITS // 4:
        raise MessageError(f"message must be {MESSAGE_BITS // 4} hex chars, got {len(s)}")
    try:
        value = int(s, 16)
    except ValueError:
        raise MessageError(f"invalid hex message: {hex_str!r}") from None
    bits = [(value >> (MESSAGE_BITS - 1 - i)) & 1 for i in range(MESSAGE_BITS)]
    return np.asarray(bits, dtype=np.int8)


def message_to_hex(bits: np.ndarray) -> str:
    bits = np.asarray(bits).ravel()
    if bits.size != MESSAGE_BITS or not np.all((bits == 0) | (bits == 1)):
        raise MessageError(f"message must be {MESSAGE_BITS} binary values")
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return f"{value:032x}"


def random_message(rng: Rng) -> np.ndarray:
    return rng.bits(MESSAGE_BITS)


@dataclass
class EncoderParams:
    """Dense-layer weights plus the blend color and strength."""

    weight: Tensor  # (MASK_H*MASK_W, MESSAGE_BITS)
    bias: Tensor    # (MASK_H*MASK_W,)
    color: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        self.color = np.asarray(self.color, dtype=np.float32)
        if self.color.shape != (3,) or self.color.min() < 0 or self.color.max() > 1:
            raise ValueError("color must be a 3-vector with components in [0, 1]")

    def tensors(self) -> dict[str, Tensor]:
        return {"enc/weight": self.weight, "enc/bias": self.bias}


CELL = 16      # the decoder head reads the mask in 16x16 cells (2x4 grid)
SUBBLOCK = 4   # each cell carries 16 bits as 4x4 sub-blocks


def bit_cell_map() -> np.ndarray:
    """(32, 64) map assigning every mask pixel its owning bit index.

    Cells follow the decoder's logit order (row-major over the 2x4 cell
    grid, 16 bits per cell); within a cell the 16 bits tile as 4x4
    sub-blocks. This is the layout convention of the toolkit, not a
    constraint: training is free to reshape the weights arbitrarily.
    """
    rows, cols = np.mgrid[0:MASK_H, 0:MASK_W]
    cell = (rows // CELL) * (MASK_W // CELL) + (cols // CELL)
    sub = ((rows % CELL) // SUBBLOCK) * (CELL // SUBBLOCK) + (cols % CELL) // SUBBLOCK
    return cell * CELL + sub


def beacon_layout():
    """Message-independent phase-beacon pixels inside the mask.

    One pixel per 4x4 sub-block carries a cosine of the global x phase
    (period 64) and one the y phase (period 32). Their value plus local
    slope identifies the position within the tile uniquely, which is what
    lets a small local SyncNet resolve offsets modulo the full tile rather
    than modulo the 16-pixel cell period of the bit texture.

    Returns (mask, value): boolean (32, 64) beacon positions and the
    pattern value each should take.
    """
    rows, cols = np.mgrid[0:MASK_H, 0:MASK_W]
    x_beacons = (rows % SUBBLOCK == 1) & (cols % SUBBLOCK == 3)
    y_beacons = (rows % SUBBLOCK == 3) & (cols % SUBBLOCK == 1)
    vx = 0.5 + 0.5 * np.cos(2 * np.pi * (cols - MASK_W / 2) / MASK_W)
    vy = 0.5 + 0.5 * np.cos(2 * np.pi * (rows - MASK_H / 2) / MASK_H)
    value = np.where(x_beacons, vx, np.where(y_beacons, vy, 0.0))
    return x_beacons | y_beacons, value.astype(np.float32)


def init_encoder_params(rng: Rng, color=None, alpha: float = DEFAULT_ALPHA,
                        block_gain: float = 10.0) -> EncoderParams:
    """Cell-aligned init for the dense layer.

    A cold dense random matrix spreads every bit over all pixels, which
    leaves the joint objective too flat to bootstrap at desk scale. Instead
    each bit starts with ``block_gain`` weight on its own sub-block (plus
    dense exploration noise), so fresh patterns are already cell-structured
    and saturated; training reshapes them freely from there. Beacon pixels
    (see :func:`beacon_layout`) start message-free with the phase-field
    values baked into the bias.
    """
    n_out = MASK_H * MASK_W
    # exploration noise must stay tiny: off-block weights sum over ~64
    # active message bits, so even +-0.05 injects ~0.23 std of crosstalk
    w = rng.uniform(-0.02, 0.02, size=(n_out, MESSAGE_BITS)).astype(np.float32)
    owner = bit_cell_map().ravel()
    w[np.arange(n_out), owner] += block_gain
    b = (-block_gain / 2.0 + rng.uniform(-0.1, 0.1, size=n_out)).astype(np.float32)
    bmask, bval = beacon_layout()
    flat_mask = bmask.ravel()
    w[flat_mask] = 0.0
    v = np.clip(bval.ravel()[flat_mask], 0.018, 0.982)
    b[flat_mask] = np.log(v / (1.0 - v))
    kwargs = {} if color is None else {"color": color}
    return EncoderParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                         alpha=alpha, **kwargs)


def generate_pattern(message: np.ndarray, params: EncoderParams) -> np.ndarray:
    """sigmoid(W @ message + b) as a 32x64 float32 grid in (0, 1)."""
    message = np.asarray(message).ravel()
    if message.size != MESSAGE_BITS:
        raise MessageError(f"message must have {MESSAGE_BITS} bits, got {message.size}")
    z = params.weight.data.astype(np.float64) @ message.astype(np.float64) + params.bias.data.astype(np.float64)
    pattern = 1.0 / (1.0 + np.exp(-z))
    return pattern.astype(np.float32).reshape(MASK_H, MASK_W)


def colored_tile(pattern: np.ndarray, color: np.ndarray) -> np.ndarray:
    """Multiply each mask cell by the color vector: (32, 64, 3)."""
    return (pattern[:, :, None] * np.asarray(color, dtype=np.float32)[None, None, :]).astype(np.float32)


def tile_to_cover(tile: np.ndarray, cover_h: int, cover_w: int) -> np.ndarray:
    """Repeat a (32, 64, 3) tile from the top-left, truncating bottom-right."""
    if cover_h < 1 or cover_w < 1:
        raise ValueError(f"cover dims must be >= 1, got {cover_h}x{cover_w}")
    reps_y = -(-cover_h // MASK_H)
    reps_x = -(-cover_w // MASK_W)
    return np.tile(tile, (reps_y, reps_x, 1))[:cover_h, :cover_w]


def build_overlay(pattern: np.ndarray, color: np.ndarray, cover_h: int, cover_w: int) -> np.ndarray:
    return tile_to_cover(colored_tile(pattern, color), cover_h, cover_w)


def embed(cover: np.ndarray, overlay: np.ndarray, alpha: float, dtype=np.float32) -> np.ndarray:
    """(1 - alpha) * cover + alpha * overlay, computed in float64.

    A convex combination of values in [0, 1] stays in [0, 1]; no clamp is
    applied so the cover-agnosticism identity holds to full precision.
    """
    cover = np.asarray(cover)
    overlay = np.asarray(overlay)
    if cover.shape != overlay.shape:
        raise ValueError(f"cover {cover.shape} and overlay {overlay.shape} dimensions differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    out = (1.0 - alpha) * cover.astype(np.float64) + alpha * overlay.astype(np.float64)
    return out.astype(dtype)


class OverlayCache:
    """Pre-generated colored tile for one (message, params) pair.

    ``embed_into`` then costs only tiling plus blending, which is what makes
    encoding cheap enough to amortize across many covers.
    """

    def __init__(self, message: np.ndarray, params: EncoderParams):
        self.alpha = params.alpha
        self.tile = colored_tile(generate_pattern(message, params), params.color)
        self._alpha_tile = (self.tile.astype(np.float64) * params.alpha).astype(np.float64)

    def overlay_for(self, cover_h: int, cover_w: int) -> np.ndarray:
        return tile_to_cover(self.tile, cover_h, cover_w)

    def embed_into(self, cover: np.ndarray, dtype=np.float32) -> np.ndarray:
        h, w = cover.shape[:2]
        a = self.alpha
        if h % MASK_H == 0 and w % MASK_W == 0:
            # blend against the tile directly through a reshape view: no
            # full-size overlay is materialized on the hot path
            ny, nx = h // MASK_H, w // MASK_W
            out = (1.0 - a) * cover.astype(np.float64)
            out = out.reshape(ny, MASK_H, nx, MASK_W, 3)
            out += self._alpha_tile[None, :, None, :, :]
            return out.reshape(h, w, 3).astype(dtype)
        overlay = self.overlay_for(h, w)
        return embed(cover, overlay, a, dtype=dtype)


def precompute_overlay(message: np.ndarray, params: EncoderParams) -> OverlayCache:
    return OverlayCache(message, params)


# ---------------------------------------------------------------------------
# differentiable path used by joint training
# ---------------------------------------------------------------------------


def tile_overlay_graph(tile, cover_h: int, cover_w: int) -> Tensor:
    """Differentiable tiling of a (3, 32, 64) tensor to (3, cover_h, cover_w).

    Gradient folds back by summing over all tile replicas (truncated edge
    replicas contribute their partial sums).
    """
    t = tile if isinstance(tile, Tensor) else Tensor(tile)
    reps_y = -(-cover_h // MASK_H)
    reps_x = -(-cover_w // MASK_W)
    out = np.tile(t.data, (1, reps_y, reps_x))[:, :cover_h, :cover_w]

    def backward(g):
        pad_y = reps_y * MASK_H - cover_h
        pad_x = reps_x * MASK_W - cover_w
        gp = np.pad(g, ((0, 0), (0, pad_y), (0, pad_x)))
        folded = gp.reshape(3, reps_y, MASK_H, reps_x, MASK_W).sum(axis=(1, 3))
        t.accumulate_grad(folded)

    return make_op(np.ascontiguousarray(out), (t,), backward)


def pattern_graph(message: np.ndarray, params: EncoderParams) -> Tensor:
    """Differentiable message -> (1, 32, 64) mask (Tensor path of generate_pattern)."""
    from . import tensor as T

    message = np.asarray(message).ravel()
    if message.size != MESSAGE_BITS:
        raise MessageError(f"message must have {MESSAGE_BITS} bits, got {message.size}")
    z = T.linear(Tensor(message.astype(np.float32)), params.weight, params.bias)
    return T.reshape(T.sigmoid(z), (1, MASK_H, MASK_W))


def embed_graph(cover_chw, message: np.ndarray, params: EncoderParams) -> Tensor:
    """Differentiable cover -> watermarked image, all of Eq. (1)-(2) in graph."""
    from . import tensor as T

    cover_t = cover_chw if isinstance(cover_chw, Tensor) else Tensor(cover_chw)
    _, h, w = cover_t.shape
    pattern = pattern_graph(message, params)
    colored = T.mul(pattern, Tensor(params.color[:, None, None]))
    overlay = tile_overlay_graph(colored, h, w)
    return T.add(T.scale(cover_t, 1.0 - params.alpha), T.scale(overlay, params.alpha))
