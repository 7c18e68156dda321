"""Benchmark harness: embed -> corrupt -> synchronize -> rectify -> decode.

Reproduces the structure of the robustness tables at configurable scale:
rows are geometry conditions (crop fraction plus a scaling range), columns
are pixel distortions (identity, internal JPEG at several qualities and
subsampling modes, Gaussian noise). Each cell reports mean bit accuracy and
the percentage of recoverable images (at most 6 wrong bits), plus
scale/offset estimation error rows.

Trials are deterministic: trial i draws from a child stream keyed by its
index, so results do not depend on completion order. The WMK_THREADS
environment variable caps the worker count of the trial pool (default 1).
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decoder import crop_to_grid, decode_message
from .distortions import diff_jpeg, gaussian_noise, rand_crop, scale_translate
from .encoder import MASK_H, MASK_W, precompute_overlay, random_message
from .metrics import (EvalReport, EvalRow, bit_accuracy, is_recoverable, psnr,
                      transform_error)
from .rng import Rng
from .sync import SearchGrid, estimate_transform, rectify, syncnet_forward
from .training import ModelState


# ---------------------------------------------------------------------------
# condition grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PixelCondition:
    """A benchmark-time pixel corruption column."""

    name: str
    kind: str  # identity | jpeg | noise
    quality: int = 95
    mode: str = "444"
    std: float = 0.0

    def apply(self, image: np.ndarray, rng: Rng) -> np.ndarray:
        if self.kind == "identity":
            return image
        if self.kind == "jpeg":
            return diff_jpeg(image, self.quality, self.mode, rounding="hard")
        if self.kind == "noise":
            return gaussian_noise(image, self.std, rng)
        raise ValueError(f"unknown condition kind {self.kind!r}")


def jpeg_condition(quality: int, mode: str) -> PixelCondition:
    return PixelCondition(f"Jpg{mode}(Q{quality})", "jpeg", quality=quality, mode=mode)

def noise_condition(std: float) -> PixelCondition:
    return PixelCondition(f"GN({std:g})", "noise", std=std)


IDENTITY = PixelCondition("Identity", "identity")

DEFAULT_CONDITIONS = (
    IDENTITY,
    jpeg_condition(95, "444"),
    jpeg_condition(90, "444"),
    jpeg_condition(95, "420"),
    jpeg_condition(90, "420"),
    noise_condition(0.01),
    noise_condition(0.02),
)


@dataclass(frozen=True)
class GeometryRange:
    crop_fraction: float
    scale_lo: float
    scale_hi: float

    @property
    def name(self) -> str:
        return f"Crop({self.crop_fraction:g}) + Scale ({self.scale_lo:g} - {self.scale_hi:g})"


DEFAULT_RANGES = (
    GeometryRange(0.8, 0.75, 1.0),
    GeometryRange(0.8, 1.0, 1.5),
    GeometryRange(0.8, 1.5, 2.0),
)


# ---------------------------------------------------------------------------
# single trial
# ---------------------------------------------------------------------------


def geometry_trial(state: ModelState, cover: np.ndarray, rng: Rng,
                   geo: GeometryRange, condition: PixelCondition = IDENTITY,
                   use_sync: bool = True, grid: SearchGrid | None = None) -> EvalRow:
    """One full pipeline pass over one cover; returns the scored row."""
    message = random_message(rng.child("msg"))
    cache = precompute_overlay(message, state.encoder)
    marked = cache.embed_into(cover)
    quality_db = psnr(marked, cover)

    cropped, (x0, y0) = rand_crop(marked, geo.crop_fraction, rng.child("crop"))
    s = float(rng.child("scale").uniform(geo.scale_lo, geo.scale_hi))
    transformed = scale_translate(cropped, s, 0.0, 0.0)
    attacked = condition.apply(transformed, rng.child("pix"))

    # ground truth in output pixels: y_out = s*(y_marked - y0)
    true_s = s
    true_dx = -s * x0
    true_dy = -s * y0

    scale_err = offset_err = float("nan")
    final = attacked
    if use_sync:
        if state.syncnet is None:
            raise ValueError("checkpoint has no SyncNet parameters; run train-sync first")
        field_arr = syncnet_forward(attacked, state.syncnet)
        est = estimate_transform(field_arr, grid)
        scale_err, offset_err = transform_error(est, (true_s, true_dx, true_dy))
        final = rectify(attacked, est)

    try:
        decoded = decode_message(crop_to_grid(final), state.decoder)
        acc = bit_accuracy(decoded, message)
        rec = is_recoverable(decoded, message)
    except ValueError:
        acc, rec = 0.0, False
    return EvalRow(quality_db, acc, rec, scale_err, offset_err)


def decode_trial(state: ModelState, cover: np.ndarray, rng: Rng,
                 condition: PixelCondition = IDENTITY) -> EvalRow:
    """Distortion-only robustness trial: no geometry, no synchronization."""
    message = random_message(rng.child("msg"))
    marked = precompute_overlay(message, state.encoder).embed_into(cover)
    attacked = condition.apply(marked, rng.child("pix"))
    decoded = decode_message(crop_to_grid(attacked), state.decoder)
    return EvalRow(psnr(marked, cover), bit_accuracy(decoded, message),
                   is_recoverable(decoded, message))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass
class BenchTable:
    range_names: list
    condition_names: list
    reports: dict = field(default_factory=dict)  # (range, condition) -> EvalReport

    def cell(self, range_name: str, cond_name: str) -> str:
        r = self.reports[(range_name, cond_name)]
        return f"{100.0 * r.mean_acc:.2f} / {r.recoverable_pct:.1f}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition"] + self.condition_names)
            for rn in self.range_names:
                w.writerow([rn] + [self.cell(rn, cn) for cn in self.condition_names])
            for rn in self.range_names:
                w.writerow([f"{rn} (offset err)"] +
                           [f"{self.reports[(rn, cn)].median_offset_err:.2f}" for cn in self.condition_names])
                w.writerow([f"{rn} (scale err)"] +
                           [f"{self.reports[(rn, cn)].median_scale_err:.4f}" for cn in self.condition_names])


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("WMK_THREADS", "1")))
    except ValueError:
        return 1


def run_bench(state: ModelState, covers: list, seed: int,
              ranges=DEFAULT_RANGES, conditions=DEFAULT_CONDITIONS,
              use_sync: bool = True, grid: SearchGrid | None = None,
              progress=None) -> BenchTable:
    master = Rng(seed)
    table = BenchTable([g.name for g in ranges], [c.name for c in conditions])
    n_workers = worker_count()
    for gi, geo in enumerate(ranges):
        for ci, cond in enumerate(conditions):
            def one(i, _geo=geo, _cond=cond, _gi=gi, _ci=ci):
                rng = master.child("trial", _gi, _ci, i)
                try:
                    return geometry_trial(state, covers[i], rng, _geo, _cond,
                                          use_sync=use_sync, grid=grid)
                except ValueError:
                    # per-image failure scores zero, never aborts the sweep
                    return EvalRow(float("nan"), 0.0, False)

            if n_workers > 1:
                with ThreadPoolExecutor(max_workers=n_workers) as ex:
                    rows = list(ex.map(one, range(len(covers))))
            else:
                rows = [one(i) for i in range(len(covers))]
            report = EvalReport(rows)
            table.reports[(geo.name, cond.name)] = report
            if progress is not None:
                progress(geo.name, cond.name, report)
    return table


# ---------------------------------------------------------------------------
# encoder latency
# ---------------------------------------------------------------------------


@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float

    @staticmethod
    def from_samples(samples_s) -> "LatencyStats":
        ms = np.asarray(samples_s) * 1e3
        return LatencyStats(float(ms.mean()), float(np.median(ms)), float(np.percentile(ms, 95)))


def measure_latency(state: ModelState, size: int = 384, iters: int = 1000,
                    seed: int = 0) -> dict:
    """Wall time of the encode paths on an in-memory cover (no disk I/O).

    'full' regenerates the overlay from the message each call; 'cached'
    reuses a precomputed colored tile and only tiles + blends.
    """
    from .covers import synth_cover
    from .encoder import build_overlay, embed, generate_pattern

    rng = Rng(seed)
    cover = synth_cover(rng.child("cover"), size, size)
    message = random_message(rng.child("msg"))
    enc = state.encoder

    full_t = []
    for _ in range(iters):
        t0 = time.perf_counter()
        pattern = generate_pattern(message, enc)
        overlay = build_overlay(pattern, enc.color, size, size)
        embed(cover, overlay, enc.alpha)
        full_t.append(time.perf_counter() - t0)

    cache = precompute_overlay(message, enc)
    cached_t = []
    for _ in range(iters):
        t0 = time.perf_counter()
        cache.embed_into(cover)
        cached_t.append(time.perf_counter() - t0)

    return {"full": LatencyStats.from_samples(full_t),
            "cached": LatencyStats.from_samples(cached_t)}
