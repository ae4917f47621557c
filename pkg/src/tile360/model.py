"""Video/tile geometry and the deterministic playback timing model.

Times are seconds, rates are Mbps per tile and sizes are megabits.  The
timing recursion is written with plain Python arithmetic so it works for
floats and for :class:`fractions.Fraction` inputs alike (the optimality
checks run it in exact rational arithmetic).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

UNFETCHED = -1


@dataclass(frozen=True)
class VideoConfig:
    """Static description of the video, its tiling and the rate ladder."""

    num_chunks: int
    rows: int
    cols: int
    chunk_duration_s: float
    rate_levels_mbps: tuple
    vrows: int
    vcols: int
    startup_delay_s: float = 0.0
    max_buffer_chunks: int = 10**6

    def __post_init__(self):
        object.__setattr__(self, "rate_levels_mbps", tuple(self.rate_levels_mbps))
        if self.num_chunks < 0:
            raise ValueError("num_chunks must be >= 0")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and one column")
        if self.chunk_duration_s <= 0:
            raise ValueError("chunk_duration_s must be positive")
        levels = self.rate_levels_mbps
        if len(levels) < 2:
            raise ValueError("rate ladder needs at least two levels")
        if levels[0] <= 0:
            raise ValueError("base layer rate must be positive")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("rate ladder must be strictly increasing")
        if not (1 <= self.vrows <= self.rows and 1 <= self.vcols <= self.cols):
            raise ValueError("viewport does not fit the tile grid")
        if self.max_buffer_chunks < 1:
            raise ValueError("max_buffer_chunks must be >= 1")

    @property
    def tiles_per_chunk(self) -> int:
        return self.rows * self.cols

    @property
    def viewport_tiles(self) -> int:
        return self.vrows * self.vcols

    @property
    def max_level(self) -> int:
        return len(self.rate_levels_mbps) - 1

    def with_chunks(self, num_chunks: int) -> "VideoConfig":
        return replace(self, num_chunks=num_chunks)


def reference_config(num_chunks: int = 120) -> VideoConfig:
    """4x8 tiles, 2x3 viewport, 2 s chunks, 8/16/24/32 Mbps per chunk."""
    return VideoConfig(
        num_chunks=num_chunks,
        rows=4,
        cols=8,
        chunk_duration_s=2.0,
        rate_levels_mbps=(0.25, 0.5, 0.75, 1.0),
        vrows=2,
        vcols=3,
        startup_delay_s=2.0,
        max_buffer_chunks=10**6,
    )


@dataclass
class RatePlan:
    """Discrete plan: ``levels[k, i]`` is the ladder index of tile i in chunk k.

    ``UNFETCHED`` (-1) marks a tile that is not downloaded at all; only the
    greedy FoV baseline produces such entries.
    """

    levels: np.ndarray

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.levels.ndim != 2:
            raise ValueError("levels must be a [chunk x tile] matrix")

    @classmethod
    def base(cls, config: VideoConfig) -> "RatePlan":
        return cls(np.zeros((config.num_chunks, config.tiles_per_chunk), dtype=np.int64))

    @property
    def num_chunks(self) -> int:
        return self.levels.shape[0]

    def validate(self, config: VideoConfig, allow_unfetched: bool = False) -> None:
        lo = UNFETCHED if allow_unfetched else 0
        if self.levels.shape[1] != config.tiles_per_chunk:
            raise ValueError("plan has the wrong number of tiles")
        if self.levels.size and (self.levels.min() < lo or self.levels.max() > config.max_level):
            raise ValueError("plan contains an invalid level index")

    def tile_rates(self, k: int, config: VideoConfig) -> list:
        ladder = config.rate_levels_mbps
        return [0 if j == UNFETCHED else ladder[j] for j in self.levels[k].tolist()]

    def rates(self, config: VideoConfig) -> np.ndarray:
        """Float matrix of rates in Mbps (0 for unfetched tiles)."""
        ladder = np.array([0.0] + [float(r) for r in config.rate_levels_mbps])
        return ladder[self.levels + 1]

    def copy(self) -> "RatePlan":
        return RatePlan(self.levels.copy())


@dataclass
class ContinuousRatePlan:
    """Relaxed plan: real rates in Mbps, one per tile per chunk."""

    rates: np.ndarray

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        if self.rates.ndim != 2:
            raise ValueError("rates must be a [chunk x tile] matrix")

    @property
    def num_chunks(self) -> int:
        return self.rates.shape[0]

    def tile_rates(self, k: int, config: VideoConfig) -> list:
        return self.rates[k].tolist()

    def validate(self, config: VideoConfig, tol: float = 1e-9) -> None:
        lo, hi = config.rate_levels_mbps[0], config.rate_levels_mbps[-1]
        if self.rates.size and (self.rates.min() < lo - tol or self.rates.max() > hi + tol):
            raise ValueError("relaxed rates outside the ladder box")


@dataclass(frozen=True)
class TimingOrigin:
    """Where a (sub-)schedule starts.

    ``clock_s`` is the earliest download start of the first chunk,
    ``floor_play_s`` the earliest time the first chunk may start playing
    (its nominal play deadline) and ``prior_play_s`` the play times of
    already scheduled earlier chunks, most recent last, used for the
    buffer cap.  ``None`` for ``floor_play_s`` means the startup delay.
    """

    clock_s: float = 0
    floor_play_s: float | None = None
    prior_play_s: tuple = ()


@dataclass
class Timeline:
    download_start_s: list
    download_finish_s: list
    wait_s: list
    play_time_s: list
    total_stall_s: float
    first_deadline_s: float
    chunk_duration_s: float

    @property
    def num_chunks(self) -> int:
        return len(self.play_time_s)


def chunk_size_mbits(plan, k: int, config: VideoConfig):
    """Size of chunk ``k`` in megabits: chunk duration times the summed tile rates."""
    if not 0 <= k < plan.num_chunks:
        raise IndexError(f"chunk index {k} out of range")
    return config.chunk_duration_s * sum(plan.tile_rates(k, config))


def schedule(
    sizes: Sequence,
    finish_fn: Callable,
    config: VideoConfig,
    origin: TimingOrigin | None = None,
) -> Timeline:
    """Run the download/play recursion for given chunk sizes.

    ``finish_fn(j, start, size)`` returns when chunk ``j`` of the schedule
    finishes downloading if it starts at ``start``.  Play times follow
    ``play_j = max(play_{j-1} + L, finish_j)``; the stall is tracked as the
    lag behind the nominal schedule so it is exactly zero when every chunk
    is on time.
    """
    origin = origin or TimingOrigin()
    L = config.chunk_duration_s
    B = config.max_buffer_chunks
    floor = config.startup_delay_s if origin.floor_play_s is None else origin.floor_play_s
    prior = list(origin.prior_play_s)

    starts, finishes, waits, plays = [], [], [], []
    prev_finish = origin.clock_s
    lag = 0
    for j, size in enumerate(sizes):
        start = prev_finish
        # download of chunk j may begin once chunk j-B has started playing
        back = j - B
        if back >= 0:
            start = max(start, plays[back])
        elif len(prior) + back >= 0:
            start = max(start, prior[len(prior) + back])
        finish = finish_fn(j, start, size)
        nominal = floor + j * L
        lag = max(lag, finish - nominal)
        starts.append(start)
        finishes.append(finish)
        waits.append(start - prev_finish)
        plays.append(nominal + lag)
        prev_finish = finish
    return Timeline(starts, finishes, waits, plays, lag, floor, L)


def compute_timeline(plan, capacities: Sequence, config: VideoConfig,
                     origin: TimingOrigin | None = None) -> Timeline:
    """Timeline of ``plan`` when chunk k downloads at constant rate ``capacities[k]``."""
    n = plan.num_chunks
    if len(capacities) < n:
        raise ValueError("need one capacity per chunk")
    if any(c <= 0 for c in capacities[:n]):
        raise ValueError("capacities must be positive")
    sizes = [chunk_size_mbits(plan, k, config) for k in range(n)]
    return schedule(sizes, lambda j, start, size: start + size / capacities[j], config, origin)


def stall_time(timeline: Timeline):
    """Total stall: last play time minus its nominal value, never negative."""
    if timeline.num_chunks == 0:
        return 0
    return timeline.total_stall_s
