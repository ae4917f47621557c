"""Throughput traces, the multiplicative prediction-error model and ground-truth delivery."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import VideoConfig


class TraceError(ValueError):
    pass


@dataclass
class ThroughputTrace:
    """Piecewise-constant throughput; sample i holds over ``[t_i, t_{i+1})``.

    The last sample lasts as long as the one before it (1 s for the usual
    1-second traces).  Past its end the trace repeats cyclically.
    """

    times_s: np.ndarray
    mbps: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, dtype=float)
        self.mbps = np.asarray(self.mbps, dtype=float)
        if self.times_s.ndim != 1 or self.times_s.shape != self.mbps.shape or self.times_s.size == 0:
            raise TraceError("trace needs matching, non-empty time and throughput columns")
        if np.any(np.diff(self.times_s) <= 0):
            raise TraceError("timestamps must be strictly increasing")
        if np.any(self.mbps <= 0):
            raise TraceError("throughput must be positive")
        step = self.times_s[-1] - self.times_s[-2] if self.times_s.size > 1 else 1.0
        self._edges = np.append(self.times_s, self.times_s[-1] + step) - self.times_s[0]
        widths = np.diff(self._edges)
        self._cum = np.concatenate([[0.0], np.cumsum(widths * self.mbps)])

    @property
    def duration_s(self) -> float:
        return float(self._edges[-1])

    @property
    def period_mbits(self) -> float:
        return float(self._cum[-1])

    def cumulative_mbits(self, t: float) -> float:
        """Megabits deliverable over ``[0, t)`` (time relative to the first sample)."""
        periods, rem = divmod(t, self.duration_s)
        i = int(np.searchsorted(self._edges, rem, side="right")) - 1
        i = min(i, self.mbps.size - 1)
        within = self._cum[i] + (rem - self._edges[i]) * self.mbps[i]
        return periods * self.period_mbits + within

    def average(self, start_s: float, end_s: float) -> float:
        if end_s <= start_s:
            raise ValueError("interval must be non-empty")
        return (self.cumulative_mbits(end_s) - self.cumulative_mbits(start_s)) / (end_s - start_s)

    def drain(self, start_s: float, size_mbits: float) -> float:
        """Time at which ``size_mbits`` started at ``start_s`` finish downloading."""
        if size_mbits <= 0:
            return start_s
        target = self.cumulative_mbits(start_s) + size_mbits
        periods, rem = divmod(target, self.period_mbits)
        i = int(np.searchsorted(self._cum, rem, side="right")) - 1
        i = min(i, self.mbps.size - 1)
        t = periods * self.duration_s + self._edges[i] + (rem - self._cum[i]) / self.mbps[i]
        return max(t, start_s)


def load_trace(path, scale_factor: float = 1.0, min_duration_s: float | None = None) -> ThroughputTrace:
    """Read a ``t_s,mbps`` CSV and scale its throughput by ``scale_factor``."""
    path = Path(path)
    times, values = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue
            if len(row) < 2:
                raise TraceError(f"{path}:{lineno}: expected two columns, got {len(row)}")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise TraceError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if v <= 0:
                raise TraceError(f"{path}:{lineno}: non-positive throughput {v}")
            times.append(t)
            values.append(v * scale_factor)
    try:
        trace = ThroughputTrace(np.array(times), np.array(values), name=path.stem)
    except TraceError as exc:
        raise TraceError(f"{path}: {exc}") from None
    if min_duration_s is not None and trace.duration_s < min_duration_s:
        raise TraceError(f"{path}: trace lasts {trace.duration_s:g} s, need at least {min_duration_s:g} s")
    return trace


def save_trace(trace: ThroughputTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "mbps"])
        for t, v in zip(trace.times_s, trace.mbps):
            w.writerow([repr(float(t)), repr(float(v))])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def synthetic_trace(duration_s: int, mean_mbps: float, std_mbps: float,
                    rng: np.random.Generator, max_segment_s: int = 8,
                    floor_mbps: float = 0.5, name: str = "") -> ThroughputTrace:
    """Piecewise-constant 1-second trace with gamma-distributed segment levels."""
    shape = (mean_mbps / std_mbps) ** 2
    scale = std_mbps**2 / mean_mbps
    values = np.empty(duration_s)
    t = 0
    while t < duration_s:
        seg = int(rng.integers(1, max_segment_s + 1))
        values[t:t + seg] = max(floor_mbps, float(rng.gamma(shape, scale)))
        t += seg
    return ThroughputTrace(np.arange(duration_s, dtype=float), values, name=name)


@dataclass(frozen=True)
class PredictionModel:
    """Predicted = true slot average x scale_factor x (1 + e), e ~ U[-p, p]."""

    error_half_width: float = 0.0
    scale_factor: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.error_half_width < 1.0:
            raise ValueError("error half-width p must satisfy 0 <= p < 1")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def true_capacity(trace: ThroughputTrace, start_s: float, end_s: float) -> float:
    """Time-averaged throughput over ``[start_s, end_s)``."""
    return trace.average(start_s, end_s)


def predicted_capacity(trace: ThroughputTrace, model: PredictionModel, window_start_s: float,
                       horizon_chunks: int, config: VideoConfig,
                       rng: np.random.Generator | None = None) -> list[float]:
    """Per-chunk capacity estimates for the next ``horizon_chunks`` chunks.

    Chunk j of the window is mapped to the nominal slot
    ``[start + j*L, start + (j+1)*L)``.
    """
    rng = rng if rng is not None else model.rng()
    L = config.chunk_duration_s
    p = model.error_half_width
    out = []
    for j in range(horizon_chunks):
        c = trace.average(window_start_s + j * L, window_start_s + (j + 1) * L)
        e = rng.uniform(-p, p) if p > 0 else 0.0
        out.append(c * model.scale_factor * (1.0 + e))
    return out
