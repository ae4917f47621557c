"""Discrete rate planners and the exhaustive optimal oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .fov import FovDistribution, most_likely_set
from .model import (UNFETCHED, ContinuousRatePlan, RatePlan, TimingOrigin, VideoConfig,
                    compute_timeline, stall_time)
from .qoe import QoeWeights, Utility, objective_robust

BRUTE_FORCE_LIMIT = 10**7
# float stall comparisons absorb rounding of this size; exact inputs compare exactly
STALL_TOL = 1e-9
BUDGET_TOL = 1e-9


@dataclass
class PlannerOutput:
    plan: RatePlan
    residual_budget_mbits: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def _stall(plan, capacities, config, origin):
    return stall_time(compute_timeline(plan, capacities, config, origin))


def _no_worse(new_stall, old_stall) -> bool:
    if isinstance(new_stall, float) or isinstance(old_stall, float):
        return new_stall <= old_stall + STALL_TOL
    return new_stall <= old_stall


def down_quantize(relaxed: ContinuousRatePlan, config: VideoConfig) -> RatePlan:
    """Map each rate to the highest ladder level not above it."""
    ladder = np.array([float(r) for r in config.rate_levels_mbps])
    idx = np.searchsorted(ladder, relaxed.rates, side="right") - 1
    return RatePlan(np.clip(idx, 0, len(ladder) - 1))


def up_quantize(relaxed: ContinuousRatePlan, config: VideoConfig) -> RatePlan:
    """Map each rate to the lowest ladder level not below it."""
    ladder = np.array([float(r) for r in config.rate_levels_mbps])
    idx = np.searchsorted(ladder, relaxed.rates, side="left")
    return RatePlan(np.clip(idx, 0, len(ladder) - 1))


def _upgrade_cost(tiles, k, plan: RatePlan, target: RatePlan, config: VideoConfig):
    ladder = config.rate_levels_mbps
    return config.chunk_duration_s * sum(
        float(ladder[target.levels[k, i]] - ladder[plan.levels[k, i]]) for i in tiles)


@lru_cache(maxsize=65536)
def _cached_most_likely(support_key, q, num_tiles):
    dist = FovDistribution([[(_VP(t), p) for t, p in support_key]])
    return most_likely_set(dist, 0, q, num_tiles)


class _VP:
    __slots__ = ("tiles",)

    def __init__(self, tiles):
        self.tiles = tiles


def _rotate(tiles, shift: int, cols: int) -> frozenset:
    return frozenset((t // cols) * cols + (t % cols + shift) % cols for t in tiles)


def most_likely(dist: FovDistribution, k: int, q: int, config: VideoConfig) -> frozenset:
    """Memoized :func:`most_likely_set`.

    Horizontal rotations of a distribution share one cache entry: the
    support is rotated to a canonical column offset, solved there and the
    answer rotated back.
    """
    cols = config.cols
    support = [(vp.tiles, p) for vp, p in dist.chunks[k] if p > 0]
    keys = []
    for shift in range(cols):
        keys.append((tuple(sorted((tuple(sorted(_rotate(t, shift, cols))), p) for t, p in support)), shift))
    key, shift = min(keys)
    found = _cached_most_likely(tuple((frozenset(t), p) for t, p in key), q, config.tiles_per_chunk)
    return _rotate(found, -shift, cols)


def algorithm1(relaxed: ContinuousRatePlan, dist: FovDistribution, capacities, config: VideoConfig,
               origin: TimingOrigin | None = None) -> PlannerOutput:
    """Down-quantize, then spend the bits saved by rounding on the most-viewed tiles.

    The budget carried into chunk k is the rounding saving of chunks 1..k
    minus what earlier upgrades spent.  Starting with the most likely
    viewport-sized set, tiles of the most likely q-set are raised to their
    up-quantized level while the budget covers them, growing q by one each
    time.  Each tile moves at most one level.  An upgrade is also refused if
    the recomputed timeline shows more stall than before it.
    """
    plan = down_quantize(relaxed, config)
    ceil = up_quantize(relaxed, config)
    K, N = plan.levels.shape
    L = config.chunk_duration_s
    ladder = np.array([float(r) for r in config.rate_levels_mbps])
    saved = L * (relaxed.rates - ladder[plan.levels]).sum(axis=1)
    ledger = []
    upgrades = [0] * K
    if float(saved.sum()) <= 0:
        return PlannerOutput(plan, [0.0] * K, {"upgraded_tiles": upgrades, "early_exit": True})
    stall = _stall(plan, capacities, config, origin)
    budget = 0.0
    for k in range(K):
        budget += float(saved[k])
        done: set = set()
        for q in range(config.viewport_tiles, N + 1):
            tiles = [i for i in sorted(most_likely(dist, k, q, config)) if i not in done]
            todo = [i for i in tiles if ceil.levels[k, i] > plan.levels[k, i]]
            cost = _upgrade_cost(todo, k, plan, ceil, config)
            if cost > budget + BUDGET_TOL:
                break
            if todo:
                trial = plan.copy()
                trial.levels[k, todo] = ceil.levels[k, todo]
                new_stall = _stall(trial, capacities, config, origin)
                if not _no_worse(new_stall, stall):
                    break
                plan, stall = trial, new_stall
                budget = max(0.0, budget - cost)
                upgrades[k] += len(todo)
            done.update(tiles)
        ledger.append(budget)
    return PlannerOutput(plan, ledger, {"upgraded_tiles": upgrades, "early_exit": False})


def algorithm2(relaxed: ContinuousRatePlan, robust_sets, capacities, config: VideoConfig,
               origin: TimingOrigin | None = None) -> PlannerOutput:
    """Down-quantize, then lift a chunk's whole robust set one level when the saved budget covers it."""
    plan = down_quantize(relaxed, config)
    ceil = up_quantize(relaxed, config)
    K = plan.num_chunks
    L = config.chunk_duration_s
    ladder = np.array([float(r) for r in config.rate_levels_mbps])
    saved = L * (relaxed.rates - ladder[plan.levels]).sum(axis=1)
    ledger, upgraded = [], [False] * K
    stall = _stall(plan, capacities, config, origin)
    budget = 0.0
    for k in range(K):
        budget += float(saved[k])
        tiles = sorted(robust_sets[k])
        todo = [i for i in tiles if ceil.levels[k, i] > plan.levels[k, i]]
        cost = _upgrade_cost(todo, k, plan, ceil, config)
        if todo and cost <= budget + BUDGET_TOL:
            trial = plan.copy()
            trial.levels[k, todo] = ceil.levels[k, todo]
            new_stall = _stall(trial, capacities, config, origin)
            if _no_worse(new_stall, stall):
                plan, stall = trial, new_stall
                budget = max(0.0, budget - cost)
                upgraded[k] = True
        ledger.append(budget)
    gamma = [float(min(ladder[plan.levels[k, i]] for i in robust_sets[k])) for k in range(K)]
    return PlannerOutput(plan, ledger, {"upgraded": upgraded, "gamma": gamma})


def _greedy_sets(base: RatePlan, sets, capacities, config: VideoConfig, origin, max_level=None):
    """Chunk by chunk, raise the chosen tile set level by level while the stall stays at its base value."""
    plan = base.copy()
    limit = config.max_level if max_level is None else min(max_level, config.max_level)
    base_stall = _stall(plan, capacities, config, origin)
    chosen = [0] * plan.num_chunks
    for k in range(plan.num_chunks):
        tiles = sorted(sets[k])
        for j in range(1, limit + 1):
            trial = plan.copy()
            trial.levels[k, tiles] = j
            if _no_worse(_stall(trial, capacities, config, origin), base_stall):
                plan = trial
                chosen[k] = j
    return plan, chosen, base_stall


def algorithm3(robust_sets, capacities, config: VideoConfig, lam=None,
               origin: TimingOrigin | None = None, max_level: int | None = None) -> PlannerOutput:
    """Fetch everything at base rate, then raise each chunk's robust set as high as the stall allows.

    Chunks are visited in order and levels from low to high; an upgrade of
    the robust set is kept when the total stall does not exceed that of
    the all-base plan.  ``max_level`` optionally caps the level so that the
    residual bandwidth goes to later chunks.  ``lam`` is accepted for
    interface symmetry; the rule does not depend on it.
    """
    plan, chosen, base_stall = _greedy_sets(RatePlan.base(config), robust_sets, capacities, config,
                                            origin, max_level)
    ladder = config.rate_levels_mbps
    gamma = [min(ladder[plan.levels[k, i]] for i in robust_sets[k]) for k in range(plan.num_chunks)]
    return PlannerOutput(plan, [], {"levels": chosen, "gamma": gamma, "base_stall_s": base_stall})


def baseline_uniform(capacities, config: VideoConfig, origin: TimingOrigin | None = None) -> PlannerOutput:
    """Every tile of a chunk at one level, the highest that keeps the stall at its all-base value."""
    everything = [range(config.tiles_per_chunk)] * config.num_chunks
    plan, chosen, base_stall = _greedy_sets(RatePlan.base(config), everything, capacities, config, origin)
    return PlannerOutput(plan, [], {"levels": chosen, "base_stall_s": base_stall})


def baseline_greedy_fov(dist: FovDistribution, capacities, config: VideoConfig,
                        origin: TimingOrigin | None = None) -> PlannerOutput:
    """Fetch only the most likely viewport of each chunk; every other tile is skipped."""
    N = config.tiles_per_chunk
    base = RatePlan(np.full((config.num_chunks, N), UNFETCHED, dtype=np.int64))
    sets = []
    for k in range(config.num_chunks):
        tiles = sorted(most_likely(dist, k, config.viewport_tiles, config))
        base.levels[k, tiles] = 0
        sets.append(tiles)
    plan, chosen, base_stall = _greedy_sets(base, sets, capacities, config, origin)
    return PlannerOutput(plan, [], {"levels": chosen, "fetched": sets, "base_stall_s": base_stall})


def brute_force_optimal(objective: str, target, capacities, config: VideoConfig, utility: Utility,
                        weights: QoeWeights, origin: TimingOrigin | None = None,
                        method: str = "auto") -> RatePlan:
    """Exact argmax over discrete plans; ties go to the lexicographically first plan.

    ``objective`` is ``"expected"`` (``target`` a FoV distribution) or
    ``"robust"`` (``target`` the per-chunk robust sets).  ``method="full"``
    enumerates every plan.  For the robust objective ``"auto"`` enumerates
    per-chunk levels of the robust set instead, with other tiles at base:
    for any plan, lowering robust-set tiles to their minimum and the rest to
    base keeps every guaranteed rate and cannot increase the stall, so the
    reduced search has the same optimum value.
    """
    K, N, m = config.num_chunks, config.tiles_per_chunk, config.max_level
    if objective not in ("expected", "robust"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "robust" and method == "auto":
        if (m + 1) ** K > BRUTE_FORCE_LIMIT:
            raise ValueError("instance too large for the oracle")
        best, best_v = None, None
        for combo in itertools.product(range(m + 1), repeat=K):
            plan = RatePlan.base(config)
            for k, j in enumerate(combo):
                plan.levels[k, sorted(target[k])] = j
            v = objective_robust(plan, target, capacities, config, utility, weights.lam, origin)
            if best_v is None or v > best_v:
                best, best_v = plan, v
        return best
    if (m + 1) ** (N * K) > BRUTE_FORCE_LIMIT:
        raise ValueError("instance too large for the oracle")
    if utility.is_linear or objective == "expected":
        return _vectorized_full(objective, target, capacities, config, utility, weights, origin)
    raise ValueError("unsupported oracle configuration")


def _vectorized_full(objective, target, capacities, config, utility, weights, origin):
    """Enumerate all (m+1)^(N*K) plans in numpy batches (float arithmetic)."""
    K, N, m = config.num_chunks, config.tiles_per_chunk, config.max_level
    ladder = np.array([float(r) for r in config.rate_levels_mbps])
    total = (m + 1) ** (N * K)
    best_v, best_idx = -np.inf, 0
    batch = 1 << 16
    radix = (m + 1) ** np.arange(N * K - 1, -1, -1)
    for lo in range(0, total, batch):
        codes = np.arange(lo, min(total, lo + batch))
        digits = (codes[:, None] // radix[None, :]) % (m + 1)
        levels = digits.reshape(-1, K, N)
        rates = ladder[levels]
        values = _batch_objective(objective, target, rates, capacities, config, utility, weights, origin)
        i = int(np.argmax(values))
        if values[i] > best_v:
            best_v, best_idx = values[i], lo + i
    digits = (best_idx // radix) % (m + 1)
    return RatePlan(digits.reshape(K, N))


def batch_stall(sizes: np.ndarray, capacities, config: VideoConfig, origin: TimingOrigin | None = None):
    """Vectorized stall of many plans; ``sizes`` is [plans x chunks] in megabits."""
    origin = origin or TimingOrigin()
    P, n = sizes.shape
    L = config.chunk_duration_s
    B = config.max_buffer_chunks
    floor = config.startup_delay_s if origin.floor_play_s is None else origin.floor_play_s
    prior = list(origin.prior_play_s)
    prev = np.full(P, float(origin.clock_s))
    lag = np.zeros(P)
    plays = []
    for j in range(n):
        start = prev
        back = j - B
        if back >= 0:
            start = np.maximum(start, plays[back])
        elif len(prior) + back >= 0:
            start = np.maximum(start, float(prior[len(prior) + back]))
        finish = start + sizes[:, j] / float(capacities[j])
        nominal = float(floor) + j * float(L)
        lag = np.maximum(lag, finish - nominal)
        plays.append(nominal + lag)
        prev = finish
    return lag


def _batch_objective(objective, target, rates, capacities, config, utility, weights, origin):
    P, K, N = rates.shape
    stall = batch_stall(float(config.chunk_duration_s) * rates.sum(axis=2), capacities, config, origin)
    u = utility(rates)
    value = np.zeros(P)
    for k in range(K):
        if objective == "expected":
            for vp, p in target.chunks[k]:
                t = sorted(vp.tiles)
                value += p * (u[:, k, t].min(axis=1) + weights.gamma * u[:, k, t].sum(axis=1))
        else:
            value += utility(rates[:, k, sorted(target[k])].min(axis=1))
    return value - weights.lam * stall


PLANNERS = ("alg1", "alg2", "alg3", "baseline", "greedy", "oracle")
