"""Dense tensors with reverse-mode differentiation.

Implements exactly the operations the watermarking networks need: dense
linear layers, 2-D cross-correlation, sigmoid/relu, MSE and binary
cross-entropy losses, and corner-aligned bilinear resizing. Gradients are
recorded on an explicit :class:`Tape` in execution order and replayed in
exact reverse order.

Numerical conventions, fixed for reproducibility:

* tensor payloads are 32-bit floats (64-bit is accepted and propagated, used
  by the finite-difference checker);
* matrix products inside ``linear`` and ``conv2d`` accumulate in 64-bit over
  the flattened (kh, kw, c_in) contraction axis, then round once to the
  input dtype -- same input therefore always yields the same output;
* loss reductions accumulate in 64-bit.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "make_op",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "linear",
    "conv2d",
    "activation",
    "sigmoid",
    "relu",
    "loss_terms",
    "mse",
    "bce_with_logits",
    "mean_all",
    "reshape",
    "transpose",
    "stack",
    "crop2d",
    "pad2d",
    "bilinear_resize",
    "grad_check",
    "zero_grads",
]


class Tensor:
    """A shaped buffer of float values with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


_LOCAL = threading.local()


def _tape_stack():
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


class Tape:
    """Execution-ordered record of differentiable operations.

    Entered as a context manager; every op executed inside whose inputs
    require gradients appends itself. ``backward`` seeds the root with a
    unit gradient and replays the records strictly in reverse execution
    order, accumulating into each reachable input's ``grad``.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, backward) -> None:
        self._records.append((out, backward))

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for out, bwd in reversed(self._records):
            if out.grad is None:
                continue
            bwd(out.grad)

    def __len__(self):
        return len(self._records)


def make_op(data, parents, backward) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``backward(grad_out)`` must accumulate into each parent via
    ``parent.accumulate_grad``. Ops run outside any tape (or with
    gradient-free inputs) cost only the forward pass.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    stack = _tape_stack()
    if stack and out.requires_grad:
        stack[-1].record(out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad or a.grad is not None:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad or b.grad is not None:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return make_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad or a.grad is not None:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad or b.grad is not None:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    return make_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad or a.grad is not None:
            a.accumulate_grad(_unbroadcast(g * bd, a.shape))
        if b.requires_grad or b.grad is not None:
            b.accumulate_grad(_unbroadcast(g * ad, b.shape))

    return make_op(ad * bd, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a.accumulate_grad(g * s)

    return make_op(a.data * a.data.dtype.type(s), (a,), backward)


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a.accumulate_grad(g)

    return make_op(a.data + a.data.dtype.type(c), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def backward(g):
        a.accumulate_grad(g.reshape(old))

    return make_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        a.accumulate_grad(g.transpose(inv))

    return make_op(a.data.transpose(axes), (a,), backward)


def stack(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad or t.grad is not None:
                t.accumulate_grad(g[i])

    return make_op(np.stack([t.data for t in ts]), tuple(ts), backward)


def crop2d(a, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Slice the trailing two (spatial) axes to [y0:y1, x0:x1]."""
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., y0:y1, x0:x1] = g
        a.accumulate_grad(full)

    return make_op(np.ascontiguousarray(a.data[..., y0:y1, x0:x1]), (a,), backward)


def pad2d(a, top: int, bottom: int, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad the trailing two axes; mode 'constant' (zeros) or 'edge'."""
    a = _as_tensor(a)
    lead = a.data.ndim - 2
    widths = [(0, 0)] * lead + [(top, bottom), (left, right)]
    H, W = a.shape[-2], a.shape[-1]

    def backward(g):
        if mode == "constant":
            ga = g[..., top : top + H, left : left + W]
        else:
            # edge replication: fold padded-border gradients onto the edge rows/cols
            ga = g.copy()
            if top:
                ga[..., top, :] += ga[..., :top, :].sum(axis=-2)
            if bottom:
                ga[..., top + H - 1, :] += ga[..., top + H :, :].sum(axis=-2)
            ga = ga[..., top : top + H, :]
            if left:
                ga[..., left] += ga[..., :left].sum(axis=-1)
            if right:
                ga[..., left + W - 1] += ga[..., left + W :].sum(axis=-1)
            ga = ga[..., left : left + W]
        a.accumulate_grad(ga)

    return make_op(np.pad(a.data, widths, mode=mode), (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return make_op(out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        a.accumulate_grad(g * mask)

    return make_op(np.maximum(a.data, a.data.dtype.type(0)), (a,), backward)


def activation(a, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unknown activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def linear(x, weight, bias) -> Tensor:
    """weight @ x + bias for a 1-D input; 64-bit accumulation."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 1-D input and 2-D weight, got {x.shape} and {weight.shape}")
    m, n = weight.shape
    if x.shape[0] != n or bias.shape != (m,):
        raise ValueError(f"linear dimension mismatch: weight {weight.shape}, input {x.shape}, bias {bias.shape}")
    out64 = weight.data.astype(np.float64) @ x.data.astype(np.float64) + bias.data.astype(np.float64)
    out_dtype = np.result_type(x.dtype, weight.dtype)
    xd, wd = x.data, weight.data

    def backward(g):
        g64 = g.astype(np.float64)
        if weight.requires_grad or weight.grad is not None:
            weight.accumulate_grad(np.outer(g64, xd))
        if bias.requires_grad or bias.grad is not None:
            bias.accumulate_grad(g)
        if x.requires_grad or x.grad is not None:
            x.accumulate_grad(wd.astype(np.float64).T @ g64)

    return make_op(out64.astype(out_dtype), (x, weight, bias), backward)


def conv2d(x, kernel, stride: int = 1, padding: str = "valid", accum: str = "f64") -> Tensor:
    """2-D cross-correlation over (C,H,W) or (N,C,H,W) input.

    ``padding``: 'valid' (no padding) or 'same' (zero padding, stride-1,
    odd kernels only, output spatial size equals input).

    ``accum`` selects the accumulation dtype of the underlying matrix
    product. The default 'f64' is the documented reference semantics (sums
    over the flattened (c_in, kh, kw) axis carry 64 bits, rounded once to
    the output dtype) and matches a float64 direct-loop oracle bit for bit.
    'f32' is a faster platform-BLAS mode used by the training loop; both are
    deterministic for fixed inputs on a given platform.
    """
    if accum not in ("f64", "f32"):
        raise ValueError(f"accum must be 'f64' or 'f32', got {accum!r}")
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W)/(C,H,W) input and (Co,Ci,kH,kW) kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = xd.shape
    Co, Ci, kH, kW = kernel.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, kernel expects {Ci}")
    if padding == "same":
        if stride != 1 or kH % 2 == 0 or kW % 2 == 0:
            raise ValueError("padding='same' requires stride 1 and odd kernel dims")
        ph, pw = kH // 2, kW // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding mode: {padding!r}")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kH > Hp or kW > Wp:
        raise ValueError(f"kernel {kH}x{kW} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kH) // stride + 1
    Wo = (Wp - kW) // stride + 1

    out_dtype = np.result_type(x.dtype, kernel.dtype)
    acc_dtype = np.float64 if accum == "f64" else out_dtype

    out_acc, cols = _im2col_corr(xd, kernel.data, stride, ph, pw, acc_dtype)
    out = out_acc.astype(out_dtype, copy=False)

    def backward(g):
        if squeeze:
            g = g[None]
        if kernel.requires_grad or kernel.grad is not None:
            g2 = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Co).astype(acc_dtype, copy=False)
            dk = g2.T @ cols.reshape(N * Ho * Wo, kH * kW * C)
            kernel.accumulate_grad(dk.reshape(Co, kH, kW, C).transpose(0, 3, 1, 2))
        if x.requires_grad or x.grad is not None:
            if stride == 1:
                # conv-transpose identity: full-correlate the gradient with
                # the flipped, channel-swapped kernel
                kf = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                dx, _ = _im2col_corr(g.astype(acc_dtype, copy=False), kf, 1,
                                     kH - 1 - ph, kW - 1 - pw, acc_dtype)
            elif stride == kH == kW and not (ph or pw) and H == Ho * stride and W == Wo * stride:
                # non-overlapping patches: the scatter is a pure reshape
                g2 = g.transpose(0, 2, 3, 1).reshape(N, Ho * Wo, Co).astype(acc_dtype, copy=False)
                k2 = kernel.data.reshape(Co, C * kH * kW).astype(acc_dtype, copy=False)
                dcols = (g2 @ k2).reshape(N, Ho, Wo, C, kH, kW)
                dx = dcols.transpose(0, 3, 1, 4, 2, 5).reshape(N, C, H, W)
            else:
                g2 = g.transpose(0, 2, 3, 1).reshape(N, Ho * Wo, Co).astype(acc_dtype, copy=False)
                k2 = kernel.data.reshape(Co, C * kH * kW).astype(acc_dtype, copy=False)
                dcols = (g2 @ k2).reshape(N, Ho, Wo, C, kH, kW).transpose(0, 3, 4, 5, 1, 2)
                dpad = np.zeros((N, C, Hp, Wp), dtype=acc_dtype)
                for i in range(kH):
                    for j in range(kW):
                        dpad[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += dcols[:, :, i, j]
                dx = dpad[:, :, ph : ph + H, pw : pw + W]
            x.accumulate_grad(dx[0] if squeeze else dx)

    return make_op(out[0] if squeeze else out, (x, kernel), backward)


def _im2col_corr(x4: np.ndarray, k4: np.ndarray, stride: int, ph: int, pw: int,
                 acc_dtype) -> tuple:
    """Cross-correlation via im2col + one matrix product in ``acc_dtype``.

    Internally works channel-last so the patch gather copies contiguous
    runs; the contraction axis is flattened (kh, kw, c_in) in C order.
    Returns (output (N,Co,Ho,Wo) in acc_dtype, saved column matrix).
    """
    N, C, H, W = x4.shape
    Co, _, kH, kW = k4.shape
    xh = np.ascontiguousarray(x4.transpose(0, 2, 3, 1))  # NHWC
    xp = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xh
    win = np.lib.stride_tricks.sliding_window_view(xp, (kH, kW), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, Ho, Wo, C, kH, kW)
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N, Ho * Wo, kH * kW * C)
    if cols.dtype != acc_dtype:
        cols = cols.astype(acc_dtype)
    k2 = np.ascontiguousarray(k4.transpose(2, 3, 1, 0)).reshape(kH * kW * C, Co).astype(acc_dtype, copy=False)
    out = (cols @ k2).reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    val = np.mean(d * d, dtype=np.float64)
    n = d.size

    def backward(g):
        gd = (2.0 / n) * float(g) * d
        if a.requires_grad or a.grad is not None:
            a.accumulate_grad(gd)
        if b.requires_grad or b.grad is not None:
            b.accumulate_grad(-gd)

    return make_op(np.asarray(val, dtype=a.dtype), (a, b), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.

    Numerically stable form max(x,0) - x*t + log1p(exp(-|x|)).
    """
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"bce shape mismatch: {logits.shape} vs {targets.shape}")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_with_logits targets must be 0 or 1")
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    val = np.mean(per, dtype=np.float64)
    n = x.size

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
        logits.accumulate_grad((float(g) / n) * (s - t))

    return make_op(np.asarray(val, dtype=logits.dtype), (logits, targets), backward)


def loss_terms(a, b, kind: str) -> Tensor:
    if kind == "mse":
        return mse(a, b)
    if kind == "bce_with_logits":
        return bce_with_logits(a, b)
    raise ValueError(f"unknown loss kind: {kind!r}")


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return make_op(np.asarray(np.mean(a.data, dtype=np.float64), dtype=a.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# bilinear resize (corner-aligned)
# ---------------------------------------------------------------------------


def _corner_aligned_coords(n_in: int, n_out: int) -> np.ndarray:
    """Source coordinates mapping output index i to i*(n_in-1)/(n_out-1)."""
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resize (C,H,W) to (C,out_h,out_w) with corner-aligned sampling.

    Output corners map exactly onto input corners; interior samples
    interpolate at i*(H-1)/(out_h-1) (and likewise for width).
    """
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got {out_h}x{out_w}")
    C, H, W = x.shape
    ys = _corner_aligned_coords(H, out_h)
    xs = _corner_aligned_coords(W, out_w)
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
        gy0 = g * (1 - wy[None, :, None])
        gy1 = g * wy[None, :, None]
        for rows, gpart in ((y0, gy0), (y1, gy1)):
            for cols_idx, w in ((x0, 1 - wx), (x1, wx)):
                contrib = gpart * w  # (C, out_h, out_w)
                flat_idx = (rows[:, None] * W + cols_idx[None, :]).ravel()
                for c in range(C):
                    gi[c] += np.bincount(flat_idx, weights=contrib[c].ravel(), minlength=H * W).reshape(H, W)
        x.accumulate_grad(gi)

    return make_op(out.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# verification and bookkeeping
# ---------------------------------------------------------------------------


def grad_check(fn, point: Tensor, eps: float = 1e-3, max_entries: int | None = None, rng=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor and must be smooth and
    deterministic at ``point``. Evaluation happens at float64 so the
    finite-difference noise floor stays far below the 1e-3 tolerances used
    in the test suite. The error is normalized by the largest gradient
    magnitude seen (relative-to-scale), so exact zeros in flat directions
    do not blow up the ratio. For large points, ``max_entries`` limits the
    probe to a deterministic subset of coordinates.
    """
    p = Tensor(point.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        out = fn(p)
    tape.backward(out)
    g_ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    flat = p.data.ravel()
    n = flat.size
    if max_entries is not None and max_entries < n:
        if rng is not None:
            idxs = np.sort(rng.integers(0, n, size=max_entries))
        else:
            idxs = np.linspace(0, n - 1, max_entries).astype(np.int64)
        idxs = np.unique(idxs)
    else:
        idxs = np.arange(n)

    g_fd = np.zeros(len(idxs))
    for k, i in enumerate(idxs):
        orig = flat[i]
        flat[i] = orig + eps
        f_hi = float(fn(p).data)
        flat[i] = orig - eps
        f_lo = float(fn(p).data)
        flat[i] = orig
        g_fd[k] = (f_hi - f_lo) / (2.0 * eps)

    g_ad_sel = g_ad.ravel()[idxs]
    den = max(np.max(np.abs(g_ad_sel), initial=0.0), np.max(np.abs(g_fd), initial=0.0), 1e-12)
    return float(np.max(np.abs(g_ad_sel - g_fd), initial=0.0) / den)


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None
