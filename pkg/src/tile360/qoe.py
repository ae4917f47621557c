"""Utility functions and the QoE objectives evaluated on rate plans."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fov import FovDistribution, FovTrace
from .model import RatePlan, Timeline, VideoConfig, compute_timeline, stall_time


@dataclass(frozen=True)
class Utility:
    """Concave, strictly increasing utility of a tile rate.

    ``linear``: a*x + b (a > 0); ``power``: x**exponent (0 < exponent <= 1);
    ``log``: log(1 + x).
    """

    kind: str = "linear"
    a: float = 1
    b: float = 0
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "power", "log"):
            raise ValueError(f"unknown utility kind {self.kind!r}")
        if self.kind == "linear" and self.a <= 0:
            raise ValueError("linear utility needs a > 0")
        if self.kind == "power" and not 0 < self.exponent <= 1:
            raise ValueError("power utility needs 0 < exponent <= 1 to be concave increasing")

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear" or (self.kind == "power" and self.exponent == 1)

    def __call__(self, x):
        if self.kind == "linear":
            return self.a * x + self.b
        if self.kind == "power":
            return np.power(x, self.exponent) if isinstance(x, np.ndarray) else x**self.exponent
        return np.log1p(x) if isinstance(x, np.ndarray) else math.log1p(x)

    def derivative(self, x):
        if self.kind == "linear":
            return self.a + 0 * x
        if self.kind == "power":
            return self.exponent * np.power(np.maximum(x, 1e-12), self.exponent - 1)
        return 1.0 / (1.0 + x)

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear", "a": self.a, "b": self.b}
        if self.kind == "power":
            return {"kind": "power", "exponent": self.exponent}
        return {"kind": "log"}

    @classmethod
    def from_dict(cls, d: dict) -> "Utility":
        return cls(**d)


@dataclass(frozen=True)
class QoeWeights:
    gamma: float = 0.0
    lam: float = 1000.0
    alpha: float = 0.95

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


def expected_chunk_qoe(rates, dist: FovDistribution, k: int, utility: Utility, gamma):
    """E_v[ min_{i in v} U(R_i) + gamma * sum_{i in v} U(R_i) ] over chunk k's viewports."""
    u = [utility(r) for r in rates]
    total = 0
    for vp, p in dist.chunks[k]:
        vals = [u[i] for i in sorted(vp.tiles)]
        total += p * (min(vals) + gamma * sum(vals))
    return total


def qoe_sum_expected(plan, dist: FovDistribution, config: VideoConfig, utility: Utility, gamma) -> float:
    return sum(expected_chunk_qoe(plan.tile_rates(k, config), dist, k, utility, gamma)
               for k in range(plan.num_chunks))


def objective_expected(plan, dist: FovDistribution, capacities, config: VideoConfig,
                       utility: Utility, weights: QoeWeights, origin=None):
    """Expected QoE summed over chunks minus lambda times the stall."""
    stall = stall_time(compute_timeline(plan, capacities, config, origin))
    return qoe_sum_expected(plan, dist, config, utility, weights.gamma) - weights.lam * stall


def guaranteed_rates(plan, robust_sets, config: VideoConfig) -> list:
    """Per-chunk minimum rate over the robust tile set."""
    out = []
    for k in range(plan.num_chunks):
        rates = plan.tile_rates(k, config)
        out.append(min(rates[i] for i in robust_sets[k]))
    return out


def objective_robust(plan, robust_sets, capacities, config: VideoConfig, utility: Utility, lam,
                     origin=None):
    """Sum over chunks of U(min rate over the robust set) minus lambda times the stall."""
    if any(len(a) == 0 for a in robust_sets[:plan.num_chunks]):
        raise ValueError("robust sets must be non-empty")
    stall = stall_time(compute_timeline(plan, capacities, config, origin))
    return sum(utility(g) for g in guaranteed_rates(plan, robust_sets, config)) - lam * stall


def realized_metrics(plan: RatePlan, fov_trace: FovTrace, timing, config: VideoConfig,
                     robust_sets=None) -> dict:
    """Per-run report against a realized FoV trace.

    ``timing`` is either a realized :class:`Timeline` or per-chunk
    capacities.  The histogram counts downloaded tiles per rate, with a
    leading bin for unfetched tiles.
    """
    timeline = timing if isinstance(timing, Timeline) else compute_timeline(plan, timing, config)
    rates = plan.rates(config)
    K = plan.num_chunks
    fov_mean, fov_min = [], []
    for k in range(K):
        tiles = sorted(fov_trace.viewports[k].tiles)
        fov_mean.append(float(np.mean(rates[k, tiles])))
        fov_min.append(float(np.min(rates[k, tiles])))
    bins = [0.0] + [float(r) for r in config.rate_levels_mbps]
    counts = np.bincount(plan.levels.ravel() + 1, minlength=len(bins))
    report = {
        "mean_fov_bitrate_mbps": float(np.mean(fov_mean)) if K else 0.0,
        "mean_min_fov_bitrate_mbps": float(np.mean(fov_min)) if K else 0.0,
        "stall_s": float(stall_time(timeline)),
        "histogram": {"rate_mbps": bins, "count": [int(c) for c in counts]},
        "per_chunk": {"fov_mean_mbps": fov_mean, "fov_min_mbps": fov_min},
    }
    if robust_sets is not None:
        g = [float(x) for x in guaranteed_rates(plan, robust_sets, config)]
        report["guaranteed_rate_mbps"] = float(np.mean(g)) if K else 0.0
        report["per_chunk"]["guaranteed_mbps"] = g
    return report
