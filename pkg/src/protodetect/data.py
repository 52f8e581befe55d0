"""Series ingestion, windowing, and the synthetic anomaly benchmark.

The synthetic generator produces a sine base signal with Gaussian noise and
injects one of five anomaly kinds: isolated extreme points (``global``),
points that are plausible globally but wrong for their local context
(``contextual``), an interval whose waveform is swapped for a square wave
(``shapelet``), an interval with a changed oscillation frequency
(``seasonal``), or an interval with an added linear drift (``trend``).

All randomness flows through ``numpy.random.Generator`` (PCG64), so a fixed
seed reproduces series bit-for-bit across runs and platforms.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANOMALY_KINDS = ("global", "contextual", "shapelet", "seasonal", "trend")

# kinds injected point-by-point rather than as a structural interval
POINT_KINDS = ("global", "contextual")


class CsvFormatError(ValueError):
    """Malformed CSV input; the message names the offending line."""


@dataclass
class TimeSeries:
    """A T x D real-valued sequence with optional point-wise binary labels."""

    values: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise ValueError(f"values must be T x D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("series contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.values),):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match T={len(self.values)}"
                )

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int, name: str | None = None) -> "TimeSeries":
        labels = None if self.labels is None else self.labels[start:stop]
        return TimeSeries(self.values[start:stop].copy(), labels, name or self.name)


@dataclass
class NormStats:
    """Per-dimension location/scale fitted on the training split."""

    mean: np.ndarray
    scale: np.ndarray  # std with zero-variance dims replaced by 1


@dataclass
class WindowSet:
    """Sliding-window view: windows[i] == values[starts[i] : starts[i] + width]."""

    windows: np.ndarray  # N x w x D
    starts: np.ndarray  # N
    width: int
    stride: int
    labels: np.ndarray | None = None  # N, any-point rule; evaluation only

    def __post_init__(self):
        n = self.windows.shape[0]
        if self.starts.shape != (n,):
            raise ValueError("starts length does not match window count")
        if self.labels is not None and self.labels.shape != (n,):
            raise ValueError("labels length does not match window count")

    def __len__(self) -> int:
        return self.windows.shape[0]


@dataclass
class AnomalySpec:
    """What to inject into a synthetic series.

    ``magnitude`` is interpreted per kind: displacement in units of the base
    signal range (global), displacement in units of amplitude (contextual),
    frequency multiplier (seasonal); shapelet ignores it and trend reads
    ``trend_slope`` instead. Intervals are half-open [start, end); use
    length-1 intervals for isolated points.
    """

    kind: str
    intervals: list[tuple[int, int]] = field(default_factory=list)
    magnitude: float = 1.0
    period: float = 50.0
    amplitude: float = 1.0
    noise_sigma: float = 0.08
    trend_slope: float = 0.02

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind '{self.kind}', expected one of {ANOMALY_KINDS}")
        if self.period <= 0:
            raise ValueError("period must be positive")
        self.intervals = [(int(s), int(e)) for s, e in self.intervals]
        last_end = -1
        for s, e in sorted(self.intervals):
            if s < 0 or e <= s:
                raise ValueError(f"bad interval ({s}, {e})")
            if s < last_end:
                raise ValueError("anomaly intervals overlap")
            last_end = e


@dataclass
class CsvSchema:
    """Column roles for CSV ingestion; None value columns means 'all the rest'."""

    timestamp: str | None = None
    values: tuple[str, ...] | None = None
    label: str | None = None


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> TimeSeries:
    """Read a header-ed CSV into a TimeSeries; malformed rows name their line."""
    schema = schema or CsvSchema()
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        reserved = {schema.timestamp, schema.label} - {None}
        for col in reserved:
            if col not in header:
                raise CsvFormatError(f"{path}: declared column '{col}' not in header {header}")
        if schema.values is None:
            value_cols = [h for h in header if h not in reserved]
        else:
            value_cols = list(schema.values)
            for col in value_cols:
                if col not in header:
                    raise CsvFormatError(f"{path}: declared column '{col}' not in header {header}")
        if not value_cols:
            raise CsvFormatError(f"{path}: no value columns")
        value_idx = [header.index(c) for c in value_cols]
        label_idx = header.index(schema.label) if schema.label else None

        rows: list[list[float]] = []
        labels: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path} line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in value_idx])
            except ValueError as err:
                raise CsvFormatError(f"{path} line {lineno}: {err}") from None
            if label_idx is not None:
                raw = row[label_idx].strip()
                try:
                    lab = float(raw)
                except ValueError:
                    raise CsvFormatError(f"{path} line {lineno}: bad label '{raw}'") from None
                if lab not in (0.0, 1.0):
                    raise CsvFormatError(f"{path} line {lineno}: label must be 0 or 1, got '{raw}'")
                labels.append(int(lab))
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return TimeSeries(
        np.array(rows, dtype=np.float64),
        np.array(labels, dtype=np.int64) if label_idx is not None else None,
        name=path.stem,
    )


def normalize(series: TimeSeries, stats: NormStats | None = None) -> tuple[TimeSeries, NormStats]:
    """Per-dimension z-score. Fit on this series unless ``stats`` is supplied.

    Statistics use the population convention (ddof=0). Zero-variance
    dimensions fall back to centering only, with a warning.
    """
    if stats is None:
        if series.length < 2:
            raise ValueError("need at least 2 points to fit normalization stats")
        mean = series.values.mean(axis=0)
        std = series.values.std(axis=0)
        if np.any(std == 0.0):
            warnings.warn("zero-variance dimension(s); centering only", stacklevel=2)
        scale = np.where(std == 0.0, 1.0, std)
        stats = NormStats(mean=mean, scale=scale)
    out = (series.values - stats.mean) / stats.scale
    return TimeSeries(out, series.labels, series.name), stats


def denormalize(series: TimeSeries, stats: NormStats) -> TimeSeries:
    return TimeSeries(series.values * stats.scale + stats.mean, series.labels, series.name)


def make_windows(series: TimeSeries, width: int, stride: int = 1) -> WindowSet:
    """Cut the series into overlapping windows of ``width`` every ``stride``.

    A window is labeled anomalous iff any covered point is labeled; window
    labels exist for evaluation only and never feed training.
    """
    t = series.length
    if width < 1 or stride < 1:
        raise ValueError("width and stride must be >= 1")
    if width > t:
        raise ValueError(f"window width {width} exceeds series length {t}")
    n = (t - width) // stride + 1
    starts = np.arange(n, dtype=np.int64) * stride
    windows = np.stack([series.values[s : s + width] for s in starts])
    labels = None
    if series.labels is not None:
        labels = np.array([int(series.labels[s : s + width].any()) for s in starts], dtype=np.int64)
    return WindowSet(windows=windows, starts=starts, width=width, stride=stride, labels=labels)


# ---------------------------------------------------------------------------
# synthetic benchmark generation
# ---------------------------------------------------------------------------


def _base_signal(spec: AnomalySpec, total: int, rng: np.random.Generator):
    t = np.arange(total, dtype=np.float64)
    base = spec.amplitude * np.sin(2.0 * np.pi * t / spec.period)
    noise = rng.normal(0.0, spec.noise_sigma, size=total)
    return t, base, noise


def generate_synthetic(spec: AnomalySpec, total_points: int, seed: int) -> TimeSeries:
    """Sine-plus-noise series with the spec'd anomalies injected and labeled."""
    for s, e in spec.intervals:
        if e > total_points:
            raise ValueError(f"interval ({s}, {e}) exceeds series length {total_points}")
    rng = np.random.default_rng(seed)
    t, base, noise = _base_signal(spec, total_points, rng)
    values = base + noise
    labels = np.zeros(total_points, dtype=np.int64)
    base_range = float(base.max() - base.min()) if total_points > 1 else 1.0

    for s, e in spec.intervals:
        labels[s:e] = 1
        if spec.kind == "global":
            for p in range(s, e):
                direction = 1.0 if rng.random() < 0.5 else -1.0
                values[p] = values[p] + direction * spec.magnitude * base_range
        elif spec.kind == "contextual":
            lo, hi = float(base.min()), float(base.max())
            for p in range(s, e):
                direction = -1.0 if base[p] > 0 else 1.0
                values[p] = float(np.clip(base[p] + direction * spec.magnitude * spec.amplitude, lo, hi))
        elif spec.kind == "shapelet":
            seg = t[s:e]
            values[s:e] = spec.amplitude * np.sign(np.sin(2.0 * np.pi * seg / spec.period)) + noise[s:e]
        elif spec.kind == "seasonal":
            seg = t[s:e]
            phase = 2.0 * np.pi * s / spec.period  # continuous at the interval start
            altered = spec.amplitude * np.sin(
                phase + 2.0 * np.pi * spec.magnitude * (seg - s) / spec.period
            )
            values[s:e] = altered + noise[s:e]
        elif spec.kind == "trend":
            seg = t[s:e]
            values[s:e] = values[s:e] + spec.trend_slope * (seg - s)

    return TimeSeries(values, labels, name=f"synthetic-{spec.kind}")


def benchmark_spec(
    kind: str,
    train_points: int,
    test_points: int,
    period: float = 50.0,
    amplitude: float = 1.0,
    noise_sigma: float = 0.08,
    magnitude: float | None = None,
    trend_slope: float = 0.02,
) -> AnomalySpec:
    """Default anomaly placement for the benchmark: clean train segment,
    contaminated test segment.

    Point kinds scatter a few isolated points across the test segment;
    interval kinds place one structural interval roughly mid-segment.
    """
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind '{kind}'")
    t0 = train_points
    if kind in POINT_KINDS:
        fracs = (0.2, 0.45, 0.7, 0.9) if kind == "contextual" else (0.25, 0.55, 0.85)
        intervals = [(t0 + int(f * test_points), t0 + int(f * test_points) + 1) for f in fracs]
        default_mag = 1.2 if kind == "global" else 1.5
    else:
        span = max(10, int(0.16 * test_points))
        start = t0 + int(0.4 * test_points)
        intervals = [(start, start + span)]
        default_mag = 2.5
    return AnomalySpec(
        kind=kind,
        intervals=intervals,
        magnitude=default_mag if magnitude is None else magnitude,
        period=period,
        amplitude=amplitude,
        noise_sigma=noise_sigma,
        trend_slope=trend_slope,
    )


def augment_light(
    window: np.ndarray,
    rng: np.random.Generator | int,
    sigma_jitter: float = 0.01,
    sigma_scale: float = 0.05,
) -> np.ndarray:
    """Light augmentation: additive Gaussian jitter, then one global
    magnitude factor drawn uniformly from [1 - sigma_scale, 1 + sigma_scale]."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    window = np.asarray(window, dtype=np.float64)
    jittered = window + rng.normal(0.0, sigma_jitter, size=window.shape) if sigma_jitter > 0 else window
    scale = rng.uniform(1.0 - sigma_scale, 1.0 + sigma_scale) if sigma_scale > 0 else 1.0
    return jittered * scale


def augment_batch(
    batch: np.ndarray,
    rng: np.random.Generator,
    sigma_jitter: float = 0.01,
    sigma_scale: float = 0.05,
) -> np.ndarray:
    """Vectorized ``augment_light`` over a stack of windows (one factor each)."""
    jittered = batch + rng.normal(0.0, sigma_jitter, size=batch.shape) if sigma_jitter > 0 else batch
    if sigma_scale > 0:
        scales = rng.uniform(1.0 - sigma_scale, 1.0 + sigma_scale, size=(batch.shape[0], 1, 1))
    else:
        scales = 1.0
    return jittered * scales
