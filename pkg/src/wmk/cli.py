"""Command-line interface.

Subcommands: embed, extract, train, train-sync, bench, latency, psnr.

Exit codes: 0 success, 2 bad arguments (argparse or invalid message hex),
3 unreadable inputs / empty datasets, 4 checkpoint format problems,
5 training aborted on a non-finite loss.

Run configuration files are flat ``key = value`` text; unknown keys are
rejected so typos fail loudly. See README for the key list.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import report
from .checkpoint import CheckpointError
from .covers import synth_cover
from .decoder import DecodeError, confidences, crop_to_grid, decode_logits, threshold
from .distortions import DistortionConfig
from .encoder import (DEFAULT_ALPHA, MessageError, message_from_hex,
                      message_to_hex, precompute_overlay)
from .imageio import ImageReadError, load_png, save_png
from .metrics import psnr
from .rng import Rng
from .sync import SearchGrid, estimate_transform, rectify, syncnet_forward
from .training import (ModelState, SyncTrainConfig, TrainConfig,
                       TrainingDiverged, load_state, save_state, train_joint,
                       train_syncnet, write_train_log)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4
EXIT_DIVERGED = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run-config files
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "steps", "batch", "lr", "seed", "image_h", "image_w", "checkpoint_every",
    "log_interval", "lambda_img", "alpha", "distortions_enabled", "warmup_steps",
    "jpeg_quality", "jpeg_mode", "noise_lo", "noise_hi", "offset_lo",
    "offset_hi", "scale_lo", "scale_hi", "crop_fraction", "compose_mode",
    "sync_steps", "sync_batch", "sync_lr", "sync_seed", "sync_scale_lo",
    "sync_scale_hi", "sync_offset_lo", "sync_offset_hi",
    "search_scale_min", "search_scale_max", "search_scale_step",
    "bench_size", "bench_trials",
}


def parse_runconfig(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'", EXIT_USAGE)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}", EXIT_USAGE)
        values[key] = val
    return values


def _get(cfg: dict, key: str, cast, default):
    if key not in cfg:
        return default
    try:
        if cast is bool:
            return cfg[key].lower() in ("1", "true", "yes", "on")
        return cast(cfg[key])
    except ValueError as exc:
        raise CliError(f"config key {key}: {exc}", EXIT_USAGE) from exc


def build_train_config(cfg: dict, seed_override=None, alpha_override=None) -> TrainConfig:
    dist = DistortionConfig(
        jpeg_quality=_get(cfg, "jpeg_quality", int, 85),
        jpeg_mode=_get(cfg, "jpeg_mode", str, "444"),
        noise_std_range=(_get(cfg, "noise_lo", float, 0.01), _get(cfg, "noise_hi", float, 0.03)),
        offset_range=(_get(cfg, "offset_lo", float, 0.0), _get(cfg, "offset_hi", float, 4.0)),
        scale_range=(_get(cfg, "scale_lo", float, 1.0), _get(cfg, "scale_hi", float, 1.02)),
        crop_fraction=_get(cfg, "crop_fraction", float, 0.8),
        compose_mode=_get(cfg, "compose_mode", str, "all"),
    )
    seed = seed_override if seed_override is not None else _get(cfg, "seed", int, 0)
    alpha = alpha_override if alpha_override is not None else _get(cfg, "alpha", float, DEFAULT_ALPHA)
    return TrainConfig(
        steps=_get(cfg, "steps", int, 3000),
        batch=_get(cfg, "batch", int, 4),
        lr=_get(cfg, "lr", float, 1e-3),
        seed=seed,
        image_size=(_get(cfg, "image_h", int, 128), _get(cfg, "image_w", int, 128)),
        checkpoint_every=_get(cfg, "checkpoint_every", int, 500),
        log_interval=_get(cfg, "log_interval", int, 25),
        lambda_img=_get(cfg, "lambda_img", float, 1.0),
        alpha=alpha,
        distortion=dist,
        distortions_enabled=_get(cfg, "distortions_enabled", bool, True),
        warmup_steps=_get(cfg, "warmup_steps", int, 600),
    )


def build_sync_config(cfg: dict, seed_override=None) -> SyncTrainConfig:
    seed = seed_override if seed_override is not None else _get(cfg, "sync_seed", int, 1)
    return SyncTrainConfig(
        steps=_get(cfg, "sync_steps", int, 2000),
        batch=_get(cfg, "sync_batch", int, 4),
        lr=_get(cfg, "sync_lr", float, 1e-3),
        seed=seed,
        scale_range=(_get(cfg, "sync_scale_lo", float, 0.5), _get(cfg, "sync_scale_hi", float, 2.0)),
        offset_range=(_get(cfg, "sync_offset_lo", float, -32.0), _get(cfg, "sync_offset_hi", float, 32.0)),
        checkpoint_every=_get(cfg, "checkpoint_every", int, 500),
        log_interval=_get(cfg, "log_interval", int, 25),
    )


def build_search_grid(cfg: dict) -> SearchGrid:
    return SearchGrid(
        scale_min=_get(cfg, "search_scale_min", float, 0.5),
        scale_max=_get(cfg, "search_scale_max", float, 2.0),
        scale_step=_get(cfg, "search_scale_step", float, 0.005),
    )


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def _load_state(path) -> ModelState:
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    try:
        return load_state(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc


def _load_image(path) -> np.ndarray:
    try:
        return load_png(path)
    except ImageReadError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _load_covers_dir(path, size=None) -> list:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"covers directory not found: {path}", EXIT_IO)
    files = sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise CliError(f"no readable covers in {path}", EXIT_IO)
    covers = [_load_image(f) for f in files]
    if size is not None:
        from .tensor import Tensor, bilinear_resize
        resized = []
        for c in covers:
            chw = np.ascontiguousarray(c.transpose(2, 0, 1))
            r = bilinear_resize(Tensor(chw), size[0], size[1]).data
            resized.append(np.ascontiguousarray(r.transpose(1, 2, 0)))
        covers = resized
    return covers


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_embed(args) -> int:
    try:
        message = message_from_hex(args.message)
    except MessageError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    state = _load_state(args.checkpoint)
    if args.alpha is not None:
        state.encoder.alpha = args.alpha
        state.encoder.__post_init__()
    cover = _load_image(args.cover)
    marked = precompute_overlay(message, state.encoder).embed_into(cover)
    save_png(args.out, marked)
    print(f"psnr_db={psnr(marked, cover):.2f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    state = _load_state(args.checkpoint)
    image = _load_image(args.image)
    cfg = parse_runconfig(args.config) if args.config else {}
    grid = build_search_grid(cfg)
    if args.sync == "on":
        if state.syncnet is None:
            raise CliError("checkpoint has no SyncNet parameters; run train-sync first", EXIT_CHECKPOINT)
        field = syncnet_forward(image, state.syncnet)
        est = estimate_transform(field, grid)
        print(est.to_json())
        if not est.confident:
            print("warning: synchronization not confident; decoding anyway", file=sys.stderr)
        image = rectify(image, est)
    try:
        logits = decode_logits(crop_to_grid(image), state.decoder)
    except DecodeError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    bits = threshold(logits)
    conf = confidences(logits)
    print(f"message={message_to_hex(bits)}")
    print("confidence=" + ",".join(f"{c:.3f}" for c in conf))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_values = parse_runconfig(args.config) if args.config else {}
    cfg = build_train_config(cfg_values, seed_override=args.seed, alpha_override=args.alpha)
    covers = _load_covers_dir(args.covers, size=cfg.image_size)
    resume = _load_state(args.resume) if args.resume else None

    def on_checkpoint(state):
        save_state(args.out, state)

    try:
        state, log_rows = train_joint(
            covers, cfg, resume=resume, on_checkpoint=on_checkpoint,
            progress=lambda s, li, lm, acc: print(
                f"step {s}: loss_img {li:.3e} loss_msg {lm:.4f} bit_acc {acc:.4f}", flush=True))
    except TrainingDiverged as exc:
        last_state = exc.args[1]
        save_state(args.out, last_state)
        print(f"training diverged: {exc.args[0]}; last good checkpoint kept at {args.out}", file=sys.stderr)
        return EXIT_DIVERGED
    save_state(args.out, state)
    if args.log:
        write_train_log(args.log, log_rows)
        report.render_training_curves(log_rows, str(Path(args.log).with_suffix(".png")))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train_sync(args) -> int:
    cfg_values = parse_runconfig(args.config) if args.config else {}
    cfg = build_sync_config(cfg_values, seed_override=args.seed)
    frozen = _load_state(args.checkpoint)
    size = frozen.config.image_size if frozen.config else (128, 128)
    covers = _load_covers_dir(args.covers, size=size)

    def on_checkpoint(state):
        save_state(args.out, state)

    try:
        state, log_rows = train_syncnet(
            covers, frozen, cfg, on_checkpoint=on_checkpoint,
            progress=lambda s, li, _lm, _acc: print(f"step {s}: sync_loss {li:.5f}", flush=True))
    except TrainingDiverged as exc:
        save_state(args.out, exc.args[1])
        print(f"training diverged: {exc.args[0]}", file=sys.stderr)
        return EXIT_DIVERGED
    save_state(args.out, state)
    if args.log:
        write_train_log(args.log, log_rows)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg_values = parse_runconfig(args.config) if args.config else {}
    state = _load_state(args.checkpoint)
    size = _get(cfg_values, "bench_size", int, 384)
    covers = _load_covers_dir(args.covers, size=(size, size))
    trials = _get(cfg_values, "bench_trials", int, len(covers))
    covers = (covers * ((trials + len(covers) - 1) // len(covers)))[:trials]
    grid = build_search_grid(cfg_values)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    table = bench_mod.run_bench(
        state, covers, seed=args.seed if args.seed is not None else 0,
        use_sync=(args.sync == "on"), grid=grid,
        progress=lambda rn, cn, rep: print(
            f"{rn} | {cn}: {100 * rep.mean_acc:.2f} / {rep.recoverable_pct:.1f}", flush=True))
    csv_path = outdir / "table.csv"
    table.write_csv(csv_path)
    figures = report.render_bench_figures(table, outdir)
    print(f"wrote {csv_path}")
    for f in figures:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_latency(args) -> int:
    state = _load_state(args.checkpoint)
    stats = bench_mod.measure_latency(state, size=args.size, iters=args.iters,
                                      seed=args.seed if args.seed is not None else 0)
    for name in ("full", "cached"):
        s = stats[name]
        print(f"{name}: mean {s.mean_ms:.3f} ms, median {s.median_ms:.3f} ms, p95 {s.p95_ms:.3f} ms")
    return EXIT_OK


def cmd_psnr(args) -> int:
    a = _load_image(args.image_a)
    b = _load_image(args.image_b)
    if a.shape != b.shape:
        raise CliError(f"image dimensions differ: {a.shape} vs {b.shape}", EXIT_USAGE)
    print(f"psnr_db={psnr(a, b):.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmk", description="Blind multi-bit image watermarking toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("embed", help="embed a 128-bit message into a cover PNG")
    e.add_argument("cover")
    e.add_argument("message", help="32 lowercase hex chars (MSB of the first digit is bit 0)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--alpha", type=float, default=None)
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", help="extract the message from a watermarked PNG")
    x.add_argument("image")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--sync", choices=("on", "off"), default="on")
    x.add_argument("--config", default=None)
    x.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="jointly train encoder and decoder")
    t.add_argument("covers", help="directory of cover images")
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--alpha", type=float, default=None)
    t.set_defaults(func=cmd_train)

    ts = sub.add_parser("train-sync", help="train SyncNet with encoder/decoder frozen")
    ts.add_argument("covers")
    ts.add_argument("--checkpoint", required=True, help="jointly trained checkpoint")
    ts.add_argument("--config", default=None)
    ts.add_argument("--out", required=True)
    ts.add_argument("--log", default=None)
    ts.add_argument("--seed", type=int, default=None)
    ts.set_defaults(func=cmd_train_sync)

    b = sub.add_parser("bench", help="robustness sweep producing table.csv and figures")
    b.add_argument("covers")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--config", default=None)
    b.add_argument("--sync", choices=("on", "off"), default="on")
    b.add_argument("--seed", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    l = sub.add_parser("latency", help="encoder latency statistics")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--size", type=int, default=384)
    l.add_argument("--iters", type=int, default=1000)
    l.add_argument("--seed", type=int, default=None)
    l.set_defaults(func=cmd_latency)

    q = sub.add_parser("psnr", help="PSNR between two PNGs (8-bit domain)")
    q.add_argument("image_a")
    q.add_argument("image_b")
    q.set_defaults(func=cmd_psnr)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (MessageError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
