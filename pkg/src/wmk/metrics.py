"""Quality and accuracy measurement: PSNR, bit accuracy, transform errors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .encoder import MASK_H, MASK_W, MESSAGE_BITS

PSNR_CAP_DB = 99.0
RECOVERABLE_MAX_ERRORS = 6  # <= 6 wrong bits of 128 is correctable (>= 95% accuracy)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over [0,1]-domain components, capped at 99 dB.

    The cap stands in for infinity on identical inputs and keeps report
    columns finite.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def bit_accuracy(decoded: np.ndarray, truth: np.ndarray) -> float:
    decoded = np.asarray(decoded).ravel()
    truth = np.asarray(truth).ravel()
    if decoded.size != MESSAGE_BITS or truth.size != MESSAGE_BITS:
        raise ValueError(f"messages must be {MESSAGE_BITS} bits, got {decoded.size} and {truth.size}")
    return float(np.mean(decoded == truth))


def bit_errors(decoded: np.ndarray, truth: np.ndarray) -> int:
    return int(round((1.0 - bit_accuracy(decoded, truth)) * MESSAGE_BITS))


def is_recoverable(decoded: np.ndarray, truth: np.ndarray) -> bool:
    return bit_errors(decoded, truth) <= RECOVERABLE_MAX_ERRORS


def circular_distance(a: float, b: float, period: float) -> float:
    m = float(np.mod(a - b, period))
    return min(m, period - m)


def transform_error(est, truth: tuple) -> tuple:
    """(scale error, offset error) against the true (s, dx, dy).

    Offsets live modulo one tile period at the true scale, so the offset
    error is the larger of the two per-axis circular distances.
    """
    s, dx, dy = truth
    scale_err = abs(est.scale - s)
    err_x = circular_distance(est.dx, dx, MASK_W * s)
    err_y = circular_distance(est.dy, dy, MASK_H * s)
    return scale_err, max(err_x, err_y)


@dataclass
class EvalRow:
    psnr_db: float
    bit_acc: float
    recoverable: bool
    scale_err: float = float("nan")
    offset_err: float = float("nan")


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_acc(self) -> float:
        return float(np.mean([r.bit_acc for r in self.rows]))

    @property
    def recoverable_pct(self) -> float:
        return 100.0 * float(np.mean([r.recoverable for r in self.rows]))

    @property
    def median_scale_err(self) -> float:
        return float(np.median([r.scale_err for r in self.rows]))

    @property
    def median_offset_err(self) -> float:
        return float(np.median([r.offset_err for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["psnr_db", "bit_acc", "recoverable", "scale_err", "offset_err"])
            for r in self.rows:
                w.writerow([f"{r.psnr_db:.4f}", f"{r.bit_acc:.6f}", int(r.recoverable),
                            f"{r.scale_err:.6f}", f"{r.offset_err:.4f}"])
