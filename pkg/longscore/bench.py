"""Forward-pass timing of the sequence mixers across lengths, with log-log slope fits."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from attention import attention_forward_blocked
from common import ConfigurationError, InputError
from ssm import SSMParams, ssm_scan_chunked
from tensor import Tensor

logger = logging.getLogger(__name__)

MECHANISMS = ("full-attention", "sliding-window", "ssm-scan")
MIN_REPS = 5
# A median under this many timer ticks is too coarse to fit.
RESOLUTION_TICKS = 100


@dataclass(frozen=True)
class TimingRow:
    mechanism: str
    length: int
    median_seconds: float
    reps: int
    flagged: bool = False


@dataclass
class ScalingReport:
    rows: list[TimingRow]
    slopes: dict[str, float | None] = field(default_factory=dict)
    ratios: dict[str, list[tuple[int, int, float]]] = field(default_factory=dict)


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> float:
    """Ordinary least-squares slope of log(time) against log(length)."""
    if len(points) < 2:
        raise InputError(f"a slope needs at least 2 points, got {len(points)}")
    if any(x <= 0 or y <= 0 for x, y in points):
        raise InputError("log-log fit needs strictly positive values")
    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    if np.ptp(x) == 0:
        raise InputError("log-log fit needs at least two distinct lengths")
    dx = x - x.mean()
    return float((dx * (y - y.mean())).sum() / (dx * dx).sum())


def _forward(mechanism: str, length: int, d_model: int, window_radius: int, state_dim: int,
             chunk: int, rng: np.random.Generator) -> Callable[[], object]:
    """Allocate inputs up front; the returned closure runs the forward pass only."""
    if mechanism == "ssm-scan":
        decay = np.exp(-rng.uniform(0.01, 1.0, (d_model, state_dim)))
        params = SSMParams(
            A=Tensor(decay),
            B=Tensor(rng.normal(size=(d_model, state_dim))),
            C=Tensor(rng.normal(size=(d_model, state_dim))),
        )
        x = Tensor(rng.normal(size=(length, d_model)))
        return lambda: ssm_scan_chunked(params, x, chunk)
    q, k, v = (rng.normal(size=(length, d_model)) for _ in range(3))
    radius = window_radius if mechanism == "sliding-window" else None
    return lambda: attention_forward_blocked(q, k, v, window_radius=radius)


def bench_scaling(mechanisms: Sequence[str], lengths: Sequence[int], reps: int = MIN_REPS,
                  d_model: int = 32, window_radius: int = 128, state_dim: int = 16,
                  chunk: int = 64, seed: int = 0,
                  timer: Callable[[], float] = time.perf_counter,
                  resolution: float | None = None) -> ScalingReport:
    """Median wall time per (mechanism, length) and a slope per mechanism."""
    unknown = [m for m in mechanisms if m not in MECHANISMS]
    if unknown:
        raise ConfigurationError(f"unknown mechanism(s) {', '.join(unknown)}")
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ConfigurationError("lengths must be at least 2 strictly increasing values")
    if reps < MIN_REPS:
        raise ConfigurationError(f"reps must be >= {MIN_REPS}, got {reps}")
    if d_model > 64:
        raise ConfigurationError("bench keeps d_model <= 64 so length dominates")
    if resolution is None:
        resolution = time.get_clock_info("perf_counter").resolution
    floor = RESOLUTION_TICKS * resolution
    rng = np.random.default_rng(seed)
    report = ScalingReport(rows=[])
    for mechanism in mechanisms:
        rows = []
        for length in lengths:
            run = _forward(mechanism, length, d_model, window_radius, state_dim, chunk, rng)
            samples = []
            for _ in range(reps):
                start = timer()
                run()
                samples.append(timer() - start)
            median = float(np.median(samples))
            row = TimingRow(mechanism, length, median, reps, flagged=median < floor)
            if row.flagged:
                logger.warning("⚠️ %s at T=%d ran below timer resolution", mechanism, length)
            logger.info("⏱️ %s T=%d median=%.6fs", mechanism, length, median)
            rows.append(row)
        report.rows.extend(rows)
        usable = [r for r in rows if not r.flagged]
        points = [(r.length, r.median_seconds) for r in usable]
        report.slopes[mechanism] = fit_loglog_slope(points) if len(points) >= 2 else None
        report.ratios[mechanism] = [
            (a.length, b.length, b.median_seconds / a.median_seconds)
            for a, b in zip(usable, usable[1:])
        ]
    return report


def format_scaling_report(report: ScalingReport, fmt: str = "text") -> str:
    table = [["mechanism", "length", "median_s", "reps", "flagged"]]
    for row in report.rows:
        table.append([row.mechanism, str(row.length), f"{row.median_seconds:.6f}",
                      str(row.reps), "yes" if row.flagged else ""])
    slopes = [["mechanism", "slope"]]
    slopes += [[m, "" if s is None else f"{s:.3f}"] for m, s in report.slopes.items()]
    ratios = [["mechanism", "from", "to", "ratio"]]
    for mechanism, entries in report.ratios.items():
        ratios += [[mechanism, str(a), str(b), f"{r:.3f}"] for a, b, r in entries]
    sections = (table, slopes, ratios)
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        for index, section in enumerate(sections):
            if index:
                buffer.write("\n")
            writer.writerows(section)
        return buffer.getvalue()
    blocks = []
    for section in sections:
        widths = [max(len(line[k]) for line in section) for k in range(len(section[0]))]
        blocks.append("".join(
            "  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() + "\n"
            for line in section
        ))
    return "\n".join(blocks)
