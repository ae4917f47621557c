"""Sliding-window online streaming driven by ground-truth bandwidth and FoV."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import planners
from .bandwidth import PredictionModel, ThroughputTrace, predicted_capacity
from .fov import FovDistribution, FovTrace, robust_set, sample_trace
from .model import RatePlan, Timeline, TimingOrigin, VideoConfig, chunk_size_mbits, schedule
from .qoe import QoeWeights, Utility, qoe_sum_expected, realized_metrics
from .relaxed import SolverSettings, solve_relaxed_expected, solve_relaxed_robust


@dataclass(frozen=True)
class OnlineSettings:
    window_chunks: int = 2
    warmup_chunks: int = 1
    planner: str = "alg1"
    repredict_bandwidth: bool = True
    repredict_fov: bool = True
    solver: SolverSettings = SolverSettings()

    def __post_init__(self):
        if self.window_chunks < 1:
            raise ValueError("window must hold at least one chunk")
        if self.warmup_chunks < 0:
            raise ValueError("warmup must be nonnegative")
        if self.planner not in planners.PLANNERS:
            raise ValueError(f"unknown planner {self.planner!r}")


@dataclass
class RunResult:
    plan: RatePlan
    timeline: Timeline
    metrics: dict
    decisions: list = field(default_factory=list)

    def write_decisions(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.decisions:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def event_simulate(plan, trace: ThroughputTrace, config: VideoConfig,
                   origin: TimingOrigin | None = None) -> Timeline:
    """Realized timeline: each chunk's bits drain against the cyclic trace in order."""
    sizes = [chunk_size_mbits(plan, k, config) for k in range(plan.num_chunks)]
    return schedule(sizes, lambda j, start, size: trace.drain(start, size), config, origin)


def plan_window(name: str, config: VideoConfig, dist: FovDistribution, robust_sets, capacities,
                utility: Utility, weights: QoeWeights, origin: TimingOrigin,
                solver: SolverSettings = SolverSettings()) -> RatePlan:
    """Run one named planner on a window described by ``config`` (its chunk count is the horizon)."""
    if name == "alg1":
        sol = solve_relaxed_expected(dist, capacities, config, utility, weights, solver, origin)
        return planners.algorithm1(sol.rates, dist, capacities, config, origin).plan
    if name == "alg2":
        sol = solve_relaxed_robust(robust_sets, capacities, config, utility, weights.lam, solver, origin)
        return planners.algorithm2(sol.rates, robust_sets, capacities, config, origin).plan
    if name == "alg3":
        return planners.algorithm3(robust_sets, capacities, config, weights.lam, origin).plan
    if name == "baseline":
        return planners.baseline_uniform(capacities, config, origin).plan
    if name == "greedy":
        return planners.baseline_greedy_fov(dist, capacities, config, origin).plan
    if name == "oracle":
        return planners.brute_force_optimal("expected", dist, capacities, config, utility, weights, origin)
    raise ValueError(f"unknown planner {name!r}")


def run_online(settings: OnlineSettings, dist: FovDistribution, trace: ThroughputTrace,
               prediction: PredictionModel, config: VideoConfig, utility: Utility,
               weights: QoeWeights, seed=None, fov_trace: FovTrace | None = None) -> RunResult:
    """Stream all chunks, re-planning the next window after every completed download.

    Only the first chunk of each window plan is committed.  The first
    ``warmup_chunks`` chunks are fetched entirely at the base rate.  The
    realized timeline comes from draining bits against ``trace``; a chunk
    keeps its committed rates even when bandwidth turns out higher or lower.
    """
    K = config.num_chunks
    if dist.num_chunks < K:
        raise ValueError("FoV distribution must cover every chunk")
    rng = np.random.default_rng(seed)
    pred_rng = np.random.default_rng(rng.integers(2**63)) if prediction.seed is None else prediction.rng()
    fov_seed = int(rng.integers(2**63))
    fov_trace = fov_trace or sample_trace(dist, fov_seed)
    all_sets = [robust_set(dist, k, weights.alpha) for k in range(K)]
    fixed_caps = None
    if not settings.repredict_bandwidth:
        fixed_caps = predicted_capacity(trace, prediction, 0.0, K, config, pred_rng)

    N = config.tiles_per_chunk
    levels = np.zeros((K, N), dtype=np.int64)
    finishes, plays = [], []
    decisions = []
    L = config.chunk_duration_s
    B = config.max_buffer_chunks
    clock = 0.0
    for c in range(K):
        floor = config.startup_delay_s if c == 0 else plays[-1] + L
        if c < settings.warmup_chunks:
            row = np.zeros(N, dtype=np.int64)
            caps = None
            n = 1
        else:
            n = min(settings.window_chunks, K - c)
            wconfig = config.with_chunks(n)
            if fixed_caps is None:
                caps = predicted_capacity(trace, prediction, clock, n, config, pred_rng)
            else:
                caps = fixed_caps[c:c + n]
            wdist = dist.window(c, c + n)
            if settings.repredict_fov:
                wsets = [robust_set(dist, k, weights.alpha) for k in range(c, c + n)]
            else:
                wsets = all_sets[c:c + n]
            origin = TimingOrigin(clock, floor, tuple(plays[-B:]) if B < K else tuple(plays))
            wplan = plan_window(settings.planner, wconfig, wdist, wsets, caps, utility, weights,
                                origin, settings.solver)
            row = wplan.levels[0]
        levels[c] = row
        # execute chunk c against the real trace
        start = clock
        if c - B >= 0:
            start = max(start, plays[c - B])
        size = L * sum(0 if j < 0 else float(config.rate_levels_mbps[j]) for j in row.tolist())
        finish = trace.drain(start, size)
        play = max(floor, finish)
        decisions.append({
            "chunk": c,
            "decision_time_s": clock,
            "download_start_s": start,
            "window": [c, c + n],
            "predicted_mbps": caps,
            "levels": row.tolist(),
            "planner": "warmup" if caps is None else settings.planner,
        })
        finishes.append(finish)
        plays.append(play)
        clock = finish

    plan = RatePlan(levels)
    timeline = event_simulate(plan, trace, config)
    metrics = realized_metrics(plan, fov_trace, timeline, config, all_sets)
    stall = metrics["stall_s"]
    metrics["expected_qoe"] = float(qoe_sum_expected(plan, dist, config, utility, weights.gamma))
    metrics["expected_objective"] = metrics["expected_qoe"] - weights.lam * stall
    robust_utility = sum(float(utility(g)) for g in metrics["per_chunk"]["guaranteed_mbps"])
    metrics["robust_objective"] = robust_utility - weights.lam * stall
    return RunResult(plan, timeline, metrics, decisions)
