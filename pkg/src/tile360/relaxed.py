"""Continuous relaxations of the expected-QoE and guaranteed-rate problems.

Both relaxations are concave maximizations over the rate box
``[R_0, R_m]``.  The default path writes them in epigraph form with the
download-start and play-time variables kept as inequality-constrained
unknowns (the objective decreases in the last play time, so the least
solution of the inequalities is the play-time recursion):

* linear utility  -> a linear program solved with HiGHS,
* power/log       -> a conic program solved through cvxpy.

A projected-subgradient ascent over the rates alone is also available
(``method="subgradient"``); it evaluates the stall exactly through the
timing recursion at every iterate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .fov import FovDistribution
from .model import ContinuousRatePlan, TimingOrigin, VideoConfig, compute_timeline, stall_time
from .qoe import QoeWeights, Utility, objective_expected, objective_robust

log = logging.getLogger(__name__)

SNAP_TOL = 1e-9


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    method: str = "auto"  # auto | lp | conic | subgradient
    tol: float = 1e-6
    max_iterations: int = 100_000
    patience: int = 50
    min_iterations: int = 2_000
    step0: float = 0.5

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.method not in ("auto", "lp", "conic", "subgradient"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass
class RelaxedSolution:
    rates: ContinuousRatePlan
    objective_value: float
    gamma: list | None = None
    certificate: dict = field(default_factory=dict)


class _Layout:
    """Column layout of the epigraph program: rates, epigraph vars, starts, play times."""

    def __init__(self, n: int, N: int, n_epi: int):
        self.n, self.N, self.n_epi = n, N, n_epi
        self.r0 = 0
        self.e0 = n * N
        self.s0 = self.e0 + n_epi
        self.t0 = self.s0 + n
        self.size = self.t0 + n

    def rate(self, k, i):
        return self.r0 + k * self.N + i

    def start(self, k):
        return self.s0 + k

    def play(self, k):
        return self.t0 + k


def _timing_rows(lay: _Layout, capacities, config: VideoConfig, origin: TimingOrigin):
    """Inequalities A x <= b encoding download order, buffer cap and play times."""
    rows, cols, vals, rhs = [], [], [], []
    L = config.chunk_duration_s
    B = config.max_buffer_chunks
    floor = config.startup_delay_s if origin.floor_play_s is None else origin.floor_play_s
    prior = list(origin.prior_play_s)
    r = 0

    def add(entries, b):
        nonlocal r
        for c, v in entries:
            rows.append(r)
            cols.append(c)
            vals.append(v)
        rhs.append(b)
        r += 1

    for k in range(lay.n):
        if k == 0:
            add([(lay.start(0), -1.0)], -float(origin.clock_s))
        else:
            coef = L / float(capacities[k - 1])
            add([(lay.start(k), -1.0), (lay.start(k - 1), 1.0)]
                + [(lay.rate(k - 1, i), coef) for i in range(lay.N)], 0.0)
        back = k - B
        if back >= 0:
            add([(lay.play(back), 1.0), (lay.start(k), -1.0)], 0.0)
        elif len(prior) + back >= 0:
            add([(lay.start(k), -1.0)], -float(prior[len(prior) + back]))
        coef = L / float(capacities[k])
        add([(lay.start(k), 1.0), (lay.play(k), -1.0)] + [(lay.rate(k, i), coef) for i in range(lay.N)], 0.0)
        if k == 0:
            add([(lay.play(0), -1.0)], -float(floor))
        else:
            add([(lay.play(k - 1), 1.0), (lay.play(k), -1.0)], -float(L))
    return rows, cols, vals, rhs, r


def _box(config: VideoConfig):
    return float(config.rate_levels_mbps[0]), float(config.rate_levels_mbps[-1])


def _polish(rates: np.ndarray, config: VideoConfig) -> tuple[np.ndarray, float]:
    """Clip to the box and snap values within SNAP_TOL of a ladder level onto it."""
    lo, hi = _box(config)
    residual = float(max(0.0, (lo - rates).max(initial=0.0), (rates - hi).max(initial=0.0)))
    out = np.clip(rates, lo, hi)
    for level in config.rate_levels_mbps:
        level = float(level)
        out[np.abs(out - level) <= SNAP_TOL] = level
    return out, residual


def _pick_method(settings: SolverSettings, utility: Utility) -> str:
    if settings.method != "auto":
        if settings.method == "lp" and not utility.is_linear:
            raise SolverError("the LP path needs a linear utility")
        return settings.method
    return "lp" if utility.is_linear else "conic"


def _lin_coef(utility: Utility) -> tuple[float, float]:
    if utility.kind == "linear":
        return float(utility.a), float(utility.b)
    return 1.0, 0.0


def _chunk_weights(dist: FovDistribution, n: int, N: int) -> np.ndarray:
    """w[k, i] = Pr(tile i of chunk k is in the FoV)."""
    w = np.zeros((n, N))
    for k in range(n):
        for vp, p in dist.chunks[k]:
            for i in vp.tiles:
                w[k, i] += p
    return w


def solve_relaxed_expected(dist: FovDistribution, capacities, config: VideoConfig,
                           utility: Utility, weights: QoeWeights,
                           settings: SolverSettings = SolverSettings(),
                           origin: TimingOrigin | None = None) -> RelaxedSolution:
    """Maximize the relaxed expected-QoE objective over box-constrained rates."""
    origin = origin or TimingOrigin()
    n, N = config.num_chunks, config.tiles_per_chunk
    if dist.num_chunks < n or len(capacities) < n:
        raise ValueError("distribution and capacities must cover every chunk")
    method = _pick_method(settings, utility)
    w = _chunk_weights(dist, n, N)
    if method == "subgradient":
        rates, cert = _subgradient(
            lambda R: _expected_value_and_subgradient(R, dist, capacities, config, utility, weights, origin),
            w > 0, config, settings)
    else:
        support = [(k, vp, p) for k in range(n) for vp, p in dist.chunks[k] if p > 0]
        lay = _Layout(n, N, len(support))
        rows, cols, vals, rhs, r = _timing_rows(lay, capacities, config, origin)
        a, b = _lin_coef(utility)
        nonlinear = []
        for e, (k, vp, p) in enumerate(support):
            for i in sorted(vp.tiles):
                if method == "lp":
                    rows += [r, r]
                    cols += [lay.e0 + e, lay.rate(k, i)]
                    vals += [1.0, -a]
                    rhs.append(b)
                    r += 1
                else:
                    nonlinear.append((lay.e0 + e, lay.rate(k, i)))
        c = np.zeros(lay.size)
        for e, (_, _, p) in enumerate(support):
            c[lay.e0 + e] = p
        c[lay.play(n - 1)] = -weights.lam
        lin_rate = np.zeros(lay.size)
        # the LP carries U = a*x + b directly; the conic path applies U itself
        lin_rate[:n * N] = weights.gamma * w.ravel() * (a if method == "lp" else 1.0)
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(r, lay.size))
        zero_weight = (w.ravel() == 0)
        x, status = _solve_program(method, c, lin_rate, A, np.array(rhs), lay, config, zero_weight,
                                   utility, nonlinear)
        rates, residual = _polish(x[:n * N].reshape(n, N), config)
        stall_internal = float(x[lay.play(n - 1)]) - _nominal_last(config, origin, n)
        recomputed = float(stall_time(compute_timeline(ContinuousRatePlan(rates), capacities, config, origin)))
        cert = {"method": method, "status": status, "box_residual": residual,
                "stall_residual": abs(max(stall_internal, 0.0) - recomputed) if weights.lam > 0 else 0.0}
    plan = ContinuousRatePlan(rates)
    value = float(objective_expected(plan, dist, capacities, config, utility, weights, origin))
    if math.isnan(value):
        raise SolverError("relaxed objective is NaN")
    return RelaxedSolution(plan, value, None, cert)


def solve_relaxed_robust(robust_sets, capacities, config: VideoConfig, utility: Utility, lam,
                         settings: SolverSettings = SolverSettings(),
                         origin: TimingOrigin | None = None) -> RelaxedSolution:
    """Maximize sum_k U(gamma_k) - lam * stall with gamma_k <= R_ik for i in A_k.

    Tiles outside A_k carry no utility and only add download time, so they
    are fixed at the base rate; tiles inside A_k are lowered to gamma_k.
    Neither change alters gamma or increases the stall.
    """
    origin = origin or TimingOrigin()
    n, N = config.num_chunks, config.tiles_per_chunk
    if len(robust_sets) < n or len(capacities) < n:
        raise ValueError("robust sets and capacities must cover every chunk")
    if any(len(robust_sets[k]) == 0 for k in range(n)):
        raise ValueError("robust sets must be non-empty")
    method = _pick_method(settings, utility)
    member = np.zeros((n, N), dtype=bool)
    for k in range(n):
        member[k, sorted(robust_sets[k])] = True
    if method == "subgradient":
        rates, cert = _subgradient(
            lambda R: _robust_value_and_subgradient(R, robust_sets, capacities, config, utility, lam, origin),
            member, config, settings)
    else:
        lay = _Layout(n, N, n)
        rows, cols, vals, rhs, r = _timing_rows(lay, capacities, config, origin)
        nonlinear = []
        for k in range(n):
            for i in sorted(robust_sets[k]):
                rows += [r, r]
                cols += [lay.e0 + k, lay.rate(k, i)]
                vals += [1.0, -1.0]
                rhs.append(0.0)
                r += 1
        a, _ = _lin_coef(utility)
        c = np.zeros(lay.size)
        lin_rate = np.zeros(lay.size)
        if method == "lp":
            c[lay.e0:lay.e0 + n] = a
        else:
            nonlinear = [(lay.e0 + k, None) for k in range(n)]
        c[lay.play(n - 1)] = -lam
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(r, lay.size))
        x, status = _solve_program(method, c, lin_rate, A, np.array(rhs), lay, config, ~member.ravel(),
                                   utility, nonlinear, robust=True)
        rates, residual = _polish(x[:n * N].reshape(n, N), config)
        lo = _box(config)[0]
        for k in range(n):
            rates[k, ~member[k]] = lo
        stall_internal = float(x[lay.play(n - 1)]) - _nominal_last(config, origin, n)
        cert = {"method": method, "status": status, "box_residual": residual}
        # only report the stall gap of the program's own point (before lowering)
        before = ContinuousRatePlan(np.clip(x[:n * N].reshape(n, N), *_box(config)))
        cert["stall_residual"] = abs(max(stall_internal, 0.0) - float(
            stall_time(compute_timeline(before, capacities, config, origin)))) if lam > 0 else 0.0
    for k in range(n):
        g = rates[k, member[k]].min()
        rates[k, member[k]] = g
    gamma = [float(rates[k, member[k]].min()) for k in range(n)]
    plan = ContinuousRatePlan(rates)
    value = float(objective_robust(plan, robust_sets, capacities, config, utility, lam, origin))
    if math.isnan(value):
        raise SolverError("relaxed objective is NaN")
    return RelaxedSolution(plan, value, gamma, cert)


def _nominal_last(config: VideoConfig, origin: TimingOrigin, n: int) -> float:
    floor = config.startup_delay_s if origin.floor_play_s is None else origin.floor_play_s
    return float(floor) + (n - 1) * float(config.chunk_duration_s)


def _solve_program(method, c, lin_rate, A, b, lay: _Layout, config, pinned, utility, nonlinear,
                   robust=False):
    lo, hi = _box(config)
    n, N = lay.n, lay.N
    if method == "lp":
        bounds = [(lo, lo) if pinned[j] else (lo, hi) for j in range(n * N)]
        bounds += [(None, None)] * (lay.size - n * N)
        res = linprog(-(c + lin_rate), A_ub=A, b_ub=b, bounds=bounds, method="highs")
        if res.status != 0:
            raise SolverError(f"LP failed: {res.message}")
        return res.x, res.message

    import cvxpy as cp

    x = cp.Variable(lay.size)
    R = x[:n * N]
    cons = [A @ x <= b, R >= lo, R <= hi]
    if pinned.any():
        cons.append(R[np.flatnonzero(pinned)] == lo)

    def U(expr):
        if utility.kind == "power":
            return cp.power(expr, utility.exponent)
        if utility.kind == "log":
            return cp.log(1 + expr)
        return utility.a * expr + utility.b

    if robust:
        idx = [e for e, _ in nonlinear]
        objective = cp.sum(U(x[idx])) + c @ x
        cons.append(x[idx] >= lo)
    else:
        if nonlinear:
            epi = np.array([e for e, _ in nonlinear])
            rate_idx = np.array([i for _, i in nonlinear])
            cons.append(x[epi] <= U(x[rate_idx]))
        wr = np.flatnonzero(lin_rate[:n * N])
        objective = c @ x + (lin_rate[wr] @ U(R[wr]) if wr.size else 0)
    prob = cp.Problem(cp.Maximize(objective), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.SolverError as exc:
        raise SolverError(str(exc)) from exc
    if prob.status not in ("optimal", "optimal_inaccurate") or x.value is None:
        raise SolverError(f"conic solve failed: {prob.status}")
    return np.asarray(x.value, dtype=float), prob.status


def _stall_and_subgradient(sizes, capacities, config: VideoConfig, origin: TimingOrigin):
    """Stall and one subgradient with respect to the chunk sizes (first branch on ties)."""
    n = len(sizes)
    L = config.chunk_duration_s
    B = config.max_buffer_chunks
    floor = config.startup_delay_s if origin.floor_play_s is None else origin.floor_play_s
    prior = list(origin.prior_play_s)
    zero = np.zeros(n)
    prev_f, g_prev_f = origin.clock_s, zero
    lag, g_lag = 0.0, zero
    plays, g_plays = [], []
    for j in range(n):
        start, g_start = prev_f, g_prev_f
        back = j - B
        if back >= 0 and plays[back] > start:
            start, g_start = plays[back], g_plays[back]
        elif back < 0 and len(prior) + back >= 0 and prior[len(prior) + back] > start:
            start, g_start = prior[len(prior) + back], zero
        finish = start + sizes[j] / capacities[j]
        g_finish = g_start.copy()
        g_finish[j] += 1.0 / capacities[j]
        nominal = floor + j * L
        if finish - nominal > lag:
            lag, g_lag = finish - nominal, g_finish
        plays.append(nominal + lag)
        g_plays.append(g_lag)
        prev_f, g_prev_f = finish, g_finish
    return lag, g_lag


def _expected_value_and_subgradient(R, dist, capacities, config, utility, weights, origin):
    n, N = R.shape
    L = config.chunk_duration_s
    u = utility(R)
    du = utility.derivative(R)
    g = np.zeros_like(R)
    value = 0.0
    for k in range(n):
        for vp, p in dist.chunks[k]:
            tiles = sorted(vp.tiles)
            vals = u[k, tiles]
            m = int(np.argmin(vals))
            value += p * (vals[m] + weights.gamma * vals.sum())
            g[k, tiles[m]] += p * du[k, tiles[m]]
            g[k, tiles] += p * weights.gamma * du[k, tiles]
    stall, g_stall = _stall_and_subgradient(L * R.sum(axis=1), capacities, config, origin)
    g -= weights.lam * L * g_stall[:, None]
    return value - weights.lam * stall, g


def _robust_value_and_subgradient(R, robust_sets, capacities, config, utility, lam, origin):
    n, N = R.shape
    L = config.chunk_duration_s
    g = np.zeros_like(R)
    value = 0.0
    for k in range(n):
        tiles = sorted(robust_sets[k])
        m = tiles[int(np.argmin(R[k, tiles]))]
        value += utility(R[k, m])
        g[k, m] += utility.derivative(R[k, m])
    stall, g_stall = _stall_and_subgradient(L * R.sum(axis=1), capacities, config, origin)
    g -= lam * L * g_stall[:, None]
    return value - lam * stall, g


def _subgradient(evaluate, active: np.ndarray, config: VideoConfig, settings: SolverSettings):
    """Projected subgradient ascent with diminishing normalized steps and best-iterate tracking."""
    lo, hi = _box(config)
    x = np.full(active.shape, lo)
    best_x, (best_v, g) = x.copy(), evaluate(x)
    stale = 0
    it = 0
    for it in range(1, settings.max_iterations + 1):
        g = np.where(active, g, 0.0)
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        x = np.clip(x + settings.step0 * (hi - lo) / math.sqrt(it) * g / norm, lo, hi)
        v, g = evaluate(x)
        if math.isnan(v):
            raise SolverError("objective became NaN during subgradient ascent")
        if v > best_v + settings.tol * max(1.0, abs(best_v)):
            stale = 0
        else:
            stale += 1
        if v > best_v:
            best_v, best_x = v, x.copy()
        if it >= settings.min_iterations and stale >= settings.patience:
            break
    rates, residual = _polish(best_x, config)
    return rates, {"method": "subgradient", "status": "stopped", "iterations": it,
                   "box_residual": residual, "final_subgradient_norm": float(np.linalg.norm(g)),
                   "stall_residual": 0.0}
