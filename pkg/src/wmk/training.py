"""Two-phase optimization.

Phase one trains the encoder and decoder jointly: each step watermarks a
random cover with a random message, pushes the image through a sampled
differentiable distortion, and minimizes an image-fidelity MSE plus the
per-bit BCE of the decoded logits. Phase two freezes both and trains
SyncNet to output the transformed universal template for geometrically
transformed watermarked images.

Runs are deterministic under a fixed seed: every step draws from a private
substream keyed by the step index, so resuming from a checkpoint at step k
reproduces an uninterrupted run bit for bit. Per-batch gradients accumulate
in sample order (reduction order fixed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .decoder import (DEFAULT_BACKBONE, DecoderParams, decode_logits_graph,
                      init_decoder_params, threshold)
from .distortions import DistortionConfig, sample_training_distortion
from .encoder import (DEFAULT_ALPHA, EncoderParams, MASK_H, MASK_W,
                      embed_graph, init_encoder_params, random_message)
from .optim import Adam
from .rng import Rng
from .sync import (DEFAULT_SYNC_LAYERS, SyncNetParams, init_syncnet_params,
                   syncnet_forward_graph, universal_template)
from .tensor import Tape, Tensor
from .distortions import scale_translate


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 4
    lr: float = 1e-3
    seed: int = 0
    image_size: tuple = (128, 128)
    checkpoint_every: int = 500
    log_interval: int = 25
    lambda_img: float = 1.0
    alpha: float = DEFAULT_ALPHA
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    distortions_enabled: bool = True
    # curriculum: for the first warmup_steps the encoder stays fixed and no
    # distortions are applied, letting the decoder lock onto the initial
    # cell-aligned patterns before the joint robustness phase
    warmup_steps: int = 600

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        h, w = self.image_size
        if h % MASK_H or w % MASK_W:
            raise ValueError(f"image size must be multiples of ({MASK_H}, {MASK_W}), got {h}x{w}")


@dataclass
class SyncTrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-3
    seed: int = 1
    scale_range: tuple = (0.5, 2.0)
    offset_range: tuple = (-32.0, 32.0)
    checkpoint_every: int = 500
    log_interval: int = 25


@dataclass
class ModelState:
    """Everything a checkpoint carries: parameters, optimizer moments, config."""

    encoder: EncoderParams
    decoder: DecoderParams
    syncnet: SyncNetParams | None = None
    config: TrainConfig | None = None
    step: int = 0
    opt_state: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# joint loss
# ---------------------------------------------------------------------------


def loss_joint(cover_hwc: np.ndarray, message: np.ndarray, enc: EncoderParams,
               dec: DecoderParams, distortion=None, lambda_img: float = 1.0,
               accum: str = "f64"):
    """Eq-style joint objective: lambda*||I_w - I_o||^2_mean + per-bit BCE.

    Returns (total, info) where info carries the separate loss components
    and the decoded logits for accuracy bookkeeping.
    """
    chw = np.ascontiguousarray(np.asarray(cover_hwc, dtype=np.float32).transpose(2, 0, 1))
    cover_t = Tensor(chw)
    iw = embed_graph(cover_t, message, enc)
    loss_img = T.scale(T.mse(iw, cover_t), lambda_img)

    x = distortion(iw) if distortion is not None else iw
    _, h, w = x.shape
    gh, gw = (h // MASK_H) * MASK_H, (w // MASK_W) * MASK_W
    if gh != h or gw != w:
        x = T.crop2d(x, 0, gh, 0, gw)
    logits = decode_logits_graph(x, dec, accum=accum)
    loss_msg = T.bce_with_logits(logits, Tensor(np.asarray(message, dtype=np.float32)))
    total = T.add(loss_img, loss_msg)
    info = {"loss_img": float(loss_img.data), "loss_msg": float(loss_msg.data),
            "logits": logits.data.copy()}
    return total, info


def _loss_joint_batch(batch_covers, batch_messages, enc, dec, distortions,
                      lambda_img: float, accum: str = "f32"):
    """Batched step objective: mean of per-sample joint losses.

    The distorted images are stacked per cropped size so the expensive
    decoder convolutions run as one batched pass; per-sample reduction
    order is fixed by sample index.
    """
    n = len(batch_covers)
    imgs = []
    loss_img_t = None
    for cover, message, distortion in zip(batch_covers, batch_messages, distortions):
        chw = np.ascontiguousarray(np.asarray(cover, dtype=np.float32).transpose(2, 0, 1))
        cover_t = Tensor(chw)
        iw = embed_graph(cover_t, message, enc)
        li = T.mse(iw, cover_t)
        loss_img_t = li if loss_img_t is None else T.add(loss_img_t, li)
        x = distortion(iw) if distortion is not None else iw
        _, h, w = x.shape
        gh, gw = (h // MASK_H) * MASK_H, (w // MASK_W) * MASK_W
        if gh != h or gw != w:
            x = T.crop2d(x, 0, gh, 0, gw)
        imgs.append(x)
    loss_img_t = T.scale(loss_img_t, lambda_img / n)

    groups: dict[tuple, list[int]] = {}
    for i, x in enumerate(imgs):
        groups.setdefault((x.shape[-2], x.shape[-1]), []).append(i)

    logits_by_sample: list = [None] * n
    loss_msg_t = None
    for size in sorted(groups):
        idxs = groups[size]
        xs = T.stack([imgs[i] for i in idxs])
        logits = decode_logits_graph(xs, dec, accum=accum)
        targets = Tensor(np.stack([np.asarray(batch_messages[i], dtype=np.float32) for i in idxs]))
        part = T.scale(T.bce_with_logits(logits, targets), len(idxs) / n)
        loss_msg_t = part if loss_msg_t is None else T.add(loss_msg_t, part)
        for row, i in enumerate(idxs):
            logits_by_sample[i] = logits.data[row].copy()

    total = T.add(loss_img_t, loss_msg_t)
    return total, float(loss_img_t.data), float(loss_msg_t.data), logits_by_sample


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------


def _log_row(step, loss_img, loss_msg, bit_acc):
    return (step, f"{loss_img:.6e}", f"{loss_msg:.6e}", f"{bit_acc:.6f}")


def write_train_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_img", "loss_msg", "bit_acc"])
        w.writerows(rows)


def train_joint(covers: list, cfg: TrainConfig, resume: ModelState | None = None,
                on_checkpoint=None, progress=None):
    """Run joint encoder/decoder training; returns (ModelState, log_rows).

    ``on_checkpoint(state)`` fires every ``checkpoint_every`` steps and at the
    end. A non-finite loss aborts with :class:`TrainingDiverged` carrying the
    last good state.
    """
    if not covers:
        raise ValueError("cover set is empty")
    master = Rng(cfg.seed)
    if resume is not None:
        enc, dec = resume.encoder, resume.decoder
        start = resume.step
    else:
        enc = init_encoder_params(master.child("init", "enc"), alpha=cfg.alpha)
        dec = init_decoder_params(master.child("init", "dec"))
        start = 0
    enc_opt = Adam(enc.tensors(), lr=cfg.lr)
    dec_opt = Adam(dec.tensors(), lr=cfg.lr)
    if resume is not None and resume.opt_state:
        enc_opt.load_state_tensors(resume.opt_state, "opt_enc")
        dec_opt.load_state_tensors(resume.opt_state, "opt_dec")

    def opt_state():
        return {**enc_opt.state_tensors("opt_enc"), **dec_opt.state_tensors("opt_dec")}

    log_rows = []
    state = ModelState(enc, dec, config=cfg, step=start)
    for step in range(start, cfg.steps):
        enc_opt.zero_grad()
        dec_opt.zero_grad()
        warm = step < cfg.warmup_steps
        batch_covers, batch_msgs, batch_dists = [], [], []
        for b in range(cfg.batch):
            srng = master.child("step", step, "sample", b)
            batch_covers.append(covers[srng.choice(len(covers))])
            batch_msgs.append(random_message(srng.child("msg")))
            batch_dists.append(sample_training_distortion(cfg.distortion, srng.child("dist"))
                               if cfg.distortions_enabled and not warm else None)
        with Tape() as tape:
            total, li, lm, logits = _loss_joint_batch(
                batch_covers, batch_msgs, enc, dec, batch_dists, cfg.lambda_img)
        if not np.isfinite(total.item()):
            state.step = step
            state.opt_state = opt_state()
            raise TrainingDiverged(f"non-finite loss at step {step}", state)
        tape.backward(total)
        ok = dec_opt.step() and (warm or enc_opt.step())
        if not ok:
            state.step = step
            state.opt_state = opt_state()
            raise TrainingDiverged(f"non-finite gradient at step {step}", state)
        state.step = step + 1
        bit_hits = sum(int(np.sum(threshold(lg) == m)) for lg, m in zip(logits, batch_msgs))
        bit_acc = bit_hits / (cfg.batch * len(batch_msgs[0]))
        if (step + 1) % cfg.log_interval == 0 or step == cfg.steps - 1:
            log_rows.append(_log_row(step + 1, li, lm, bit_acc))
            if progress is not None:
                progress(step + 1, li, lm, bit_acc)
        if on_checkpoint is not None and ((step + 1) % cfg.checkpoint_every == 0 or step == cfg.steps - 1):
            state.opt_state = opt_state()
            on_checkpoint(state)
    state.opt_state = opt_state()
    return state, log_rows


# ---------------------------------------------------------------------------
# SyncNet training (encoder/decoder frozen)
# ---------------------------------------------------------------------------


def train_syncnet(covers: list, frozen: ModelState, cfg: SyncTrainConfig,
                  resume_sync: SyncNetParams | None = None, opt_state: dict | None = None,
                  on_checkpoint=None, progress=None):
    """Train SyncNet against ground-truth templates; returns (ModelState, log_rows).

    Watermarked covers are scaled/offset with draws from ``cfg``; the target
    is the universal template under the same transform. Encoder and decoder
    tensors are never part of the graph, so their values cannot change.
    """
    if not covers:
        raise ValueError("cover set is empty")
    master = Rng(cfg.seed)
    sync = resume_sync if resume_sync is not None else init_syncnet_params(master.child("init", "sync"))
    params = sync.tensors()
    opt = Adam(params, lr=cfg.lr)
    if opt_state:
        opt.load_state_tensors(opt_state, "opt_sync")
    start = int(opt.t)

    from .encoder import precompute_overlay  # local import to avoid cycle at module load

    log_rows = []
    state = ModelState(frozen.encoder, frozen.decoder, sync, frozen.config, frozen.step)
    for step in range(start, cfg.steps):
        opt.zero_grad()
        loss_sum = 0.0
        for b in range(cfg.batch):
            srng = master.child("sync", step, "sample", b)
            cover = covers[srng.choice(len(covers))]
            message = random_message(srng.child("msg"))
            marked = precompute_overlay(message, frozen.encoder).embed_into(cover)
            s = float(srng.uniform(*cfg.scale_range))
            dx = float(srng.uniform(*cfg.offset_range))
            dy = float(srng.uniform(*cfg.offset_range))
            warped = scale_translate(marked, s, dx, dy)
            target = universal_template(warped.shape[0], warped.shape[1], s, dx, dy)
            chw = np.ascontiguousarray(warped.transpose(2, 0, 1))
            with Tape() as tape:
                field = syncnet_forward_graph(Tensor(chw), sync, accum="f32")
                loss = T.mse(field, Tensor(target))
            if not np.isfinite(loss.item()):
                state.opt_state = opt.state_tensors("opt_sync")
                raise TrainingDiverged(f"non-finite sync loss at step {step}", state)
            tape.backward(loss)
            loss_sum += loss.item()
        for p in params.values():
            if p.grad is not None:
                p.grad /= cfg.batch
        if not opt.step():
            state.opt_state = opt.state_tensors("opt_sync")
            raise TrainingDiverged(f"non-finite sync gradient at step {step}", state)
        if (step + 1) % cfg.log_interval == 0 or step == cfg.steps - 1:
            row = (step + 1, f"{loss_sum / cfg.batch:.6e}", f"{0.0:.6e}", f"{0.0:.6f}")
            log_rows.append(row)
            if progress is not None:
                progress(step + 1, loss_sum / cfg.batch, 0.0, 0.0)
        if on_checkpoint is not None and ((step + 1) % cfg.checkpoint_every == 0 or step == cfg.steps - 1):
            state.opt_state = opt.state_tensors("opt_sync")
            on_checkpoint(state)
    state.opt_state = opt.state_tensors("opt_sync")
    return state, log_rows


# ---------------------------------------------------------------------------
# checkpoint packing
# ---------------------------------------------------------------------------

_MODE_CODES = {"444": 0.0, "420": 1.0}
_COMPOSE_CODES = {"all": 0.0, "one_of": 1.0}


def pack_state(state: ModelState) -> dict[str, np.ndarray]:
    named = {}
    for k, t in state.encoder.tensors().items():
        named[k] = t.data
    for k, t in state.decoder.tensors().items():
        named[k] = t.data
    if state.syncnet is not None:
        for k, t in state.syncnet.tensors().items():
            named[k] = t.data
        named["meta/sync_layers"] = np.asarray(state.syncnet.layers, dtype=np.float32).ravel()
    named.update({k: np.asarray(v, dtype=np.float32) for k, v in state.opt_state.items()})
    named["meta/step"] = np.asarray([state.step], dtype=np.float32)
    named["meta/alpha"] = np.asarray([state.encoder.alpha], dtype=np.float32)
    named["meta/color"] = state.encoder.color
    named["meta/dec_backbone"] = np.asarray(state.decoder.backbone, dtype=np.float32).ravel()
    cfg = state.config
    if cfg is not None:
        named["meta/cfg"] = np.asarray(
            [cfg.steps, cfg.batch, cfg.lr, cfg.image_size[0], cfg.image_size[1],
             cfg.checkpoint_every, cfg.log_interval, cfg.lambda_img,
             float(cfg.distortions_enabled), cfg.warmup_steps], dtype=np.float32)
        named["meta/seed"] = ckpt.encode_seed(cfg.seed)
        d = cfg.distortion
        named["meta/dist"] = np.asarray(
            [d.jpeg_quality, _MODE_CODES[d.jpeg_mode], d.noise_std_range[0], d.noise_std_range[1],
             d.offset_range[0], d.offset_range[1], d.scale_range[0], d.scale_range[1],
             d.crop_fraction, _COMPOSE_CODES[d.compose_mode]], dtype=np.float32)
    return named


def unpack_state(named: dict[str, np.ndarray]) -> ModelState:
    alpha = float(named["meta/alpha"][0])
    color = named["meta/color"]
    enc = EncoderParams(Tensor(named["enc/weight"].copy(), requires_grad=True),
                        Tensor(named["enc/bias"].copy(), requires_grad=True),
                        color=color, alpha=alpha)
    backbone = tuple(map(tuple, named["meta/dec_backbone"].astype(int).reshape(-1, 2)))
    dec_named = {k: Tensor(v.copy(), requires_grad=True) for k, v in named.items() if k.startswith("dec/")}
    dec = DecoderParams(dec_named, backbone)
    sync = None
    if "meta/sync_layers" in named:
        layers = tuple(map(tuple, named["meta/sync_layers"].astype(int).reshape(-1, 2)))
        sync_named = {k: Tensor(v.copy(), requires_grad=True) for k, v in named.items() if k.startswith("sync/")}
        sync = SyncNetParams(sync_named, layers)
    cfg = None
    if "meta/cfg" in named:
        c = named["meta/cfg"]
        modes = {v: k for k, v in _MODE_CODES.items()}
        composes = {v: k for k, v in _COMPOSE_CODES.items()}
        d = named["meta/dist"]
        dist = DistortionConfig(
            jpeg_quality=int(d[0]), jpeg_mode=modes[float(d[1])],
            noise_std_range=(float(d[2]), float(d[3])),
            offset_range=(float(d[4]), float(d[5])),
            scale_range=(float(d[6]), float(d[7])),
            crop_fraction=float(d[8]), compose_mode=composes[float(d[9])])
        cfg = TrainConfig(steps=int(c[0]), batch=int(c[1]), lr=float(c[2]),
                          seed=ckpt.decode_seed(named["meta/seed"]),
                          image_size=(int(c[3]), int(c[4])),
                          checkpoint_every=int(c[5]), log_interval=int(c[6]),
                          lambda_img=float(c[7]), alpha=alpha, distortion=dist,
                          distortions_enabled=bool(c[8]),
                          warmup_steps=int(c[9]) if len(c) > 9 else 0)
    opt_state = {k: v for k, v in named.items() if k.startswith("opt_")}
    return ModelState(enc, dec, sync, cfg, int(named["meta/step"][0]), opt_state)


def save_state(path, state: ModelState) -> None:
    ckpt.save(path, pack_state(state))


def load_state(path) -> ModelState:
    return unpack_state(ckpt.load(path))
