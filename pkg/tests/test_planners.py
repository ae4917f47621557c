import itertools
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_plans, exact_stall, robust_value_exact
from tile360.fov import FovDistribution, Viewport, synthetic_distribution, viewport_at
from tile360.model import (UNFETCHED, ContinuousRatePlan, RatePlan, VideoConfig, chunk_size_mbits,
                           compute_timeline, reference_config, stall_time)
from tile360.planners import (algorithm1, algorithm2, algorithm3, baseline_greedy_fov, baseline_uniform,
                              brute_force_optimal, down_quantize, up_quantize)
from tile360.qoe import QoeWeights, Utility, objective_expected, objective_robust
from tile360.relaxed import solve_relaxed_expected, solve_relaxed_robust

LADDER = (0.25, 0.5, 0.75, 1.0)


def stall(plan, caps, cfg):
    return stall_time(compute_timeline(plan, caps, cfg))


def random_expected_instance(rng, K=3, cols=4):
    cfg = VideoConfig(K, 1, cols, 1.0, LADDER, 1, 2, float(rng.uniform(0.5, 2.0)))
    vps = [frozenset({c, (c + 1) % cols}) for c in range(cols)]
    chunks = []
    for _ in range(K):
        w = rng.dirichlet(np.full(cols, 0.5))
        chunks.append([(Viewport(v), float(p)) for v, p in zip(vps, w)])
    caps = rng.uniform(0.5, 5.0, size=K).tolist()
    return cfg, FovDistribution(chunks), caps


class TestQuantize:
    def test_down(self):
        cfg = reference_config(1).with_chunks(1)
        rates = np.full((1, 32), 0.6)
        rates[0, 1] = 0.75
        rates[0, 2] = 1.0
        levels = down_quantize(ContinuousRatePlan(rates), cfg).levels[0]
        assert LADDER[levels[0]] == 0.5
        assert LADDER[levels[1]] == 0.75
        assert LADDER[levels[2]] == 1.0

    def test_up(self):
        cfg = reference_config(1)
        rates = np.full((1, 32), 0.6)
        rates[0, 1] = 0.75
        assert up_quantize(ContinuousRatePlan(rates), cfg).levels[0, :2].tolist() == [2, 2]

    @given(st.integers(0, 10**6))
    def test_down_never_adds_stall(self, seed):
        rng = np.random.default_rng(seed)
        cfg = VideoConfig(3, 1, 4, 1.0, LADDER, 1, 1, float(rng.uniform(0, 2)), int(rng.integers(1, 4)))
        relaxed = ContinuousRatePlan(rng.uniform(0.25, 1.0, size=(3, 4)))
        caps = rng.uniform(0.5, 4.0, size=3).tolist()
        down = down_quantize(relaxed, cfg)
        for k in range(3):
            assert chunk_size_mbits(down, k, cfg) <= chunk_size_mbits(relaxed, k, cfg)
        assert stall(down, caps, cfg) <= stall(relaxed, caps, cfg)


class TestAlgorithm1:
    def point_mass_config(self):
        cfg = VideoConfig(1, 1, 4, 1.0, LADDER, 1, 2, 1.0)
        return cfg, FovDistribution([[(Viewport({0, 1}), 1.0)]])

    def test_early_exit_on_ladder_points(self):
        cfg, dist = self.point_mass_config()
        relaxed = ContinuousRatePlan(np.array([[0.5, 0.75, 0.25, 1.0]]))
        out = algorithm1(relaxed, dist, [100.0], cfg)
        assert out.diagnostics["early_exit"]
        assert np.array_equal(out.plan.levels, down_quantize(relaxed, cfg).levels)

    def test_budget_exactly_covers_viewport(self):
        cfg, dist = self.point_mass_config()
        # rounding saves 0.1 + 0.1 + 0.15 + 0.15 = 0.5 Mbit, which is the cost of
        # lifting tiles 0 and 1 from 0.5 to 0.75
        relaxed = ContinuousRatePlan(np.array([[0.6, 0.6, 0.65, 0.65]]))
        out = algorithm1(relaxed, dist, [100.0], cfg)
        assert out.plan.levels.tolist() == [[2, 2, 1, 1]]
        assert out.residual_budget_mbits[0] == pytest.approx(0.0, abs=1e-12)
        assert out.diagnostics["upgraded_tiles"] == [2]

    def test_budget_short_of_viewport(self):
        cfg, dist = self.point_mass_config()
        relaxed = ContinuousRatePlan(np.array([[0.6, 0.6, 0.6, 0.6]]))
        out = algorithm1(relaxed, dist, [100.0], cfg)
        assert out.plan.levels.tolist() == [[1, 1, 1, 1]]
        assert out.residual_budget_mbits[0] == pytest.approx(0.4)

    def test_budget_carries_to_next_chunk(self):
        cfg = VideoConfig(2, 1, 4, 1.0, LADDER, 1, 2, 1.0)
        dist = FovDistribution([[(Viewport({0, 1}), 1.0)], [(Viewport({2, 3}), 1.0)]])
        relaxed = ContinuousRatePlan(np.array([[0.7, 0.7, 0.35, 0.35], [0.6, 0.6, 0.6, 0.6]]))
        out = algorithm1(relaxed, dist, [100.0, 100.0], cfg)
        # chunk 0 saves 0.6 and spends 0.5; chunk 1 adds 0.4 and lifts tiles 2, 3
        assert out.plan.levels[0].tolist() == [2, 2, 0, 0]
        assert out.plan.levels[1].tolist() == [1, 1, 2, 2]
        assert out.residual_budget_mbits == pytest.approx([0.1, 0.0], abs=1e-12)

    @settings(max_examples=40)
    @given(st.integers(0, 10**6), st.sampled_from([0.0, 0.1, 1.0]))
    def test_dominates_down_quantize_and_keeps_stall(self, seed, gamma):
        rng = np.random.default_rng(seed)
        cfg, dist, caps = random_expected_instance(rng)
        weights = QoeWeights(gamma, 1000.0)
        relaxed = solve_relaxed_expected(dist, caps, cfg, Utility(), weights).rates
        out = algorithm1(relaxed, dist, caps, cfg)
        down = down_quantize(relaxed, cfg)
        assert objective_expected(out.plan, dist, caps, cfg, Utility(), weights) >= \
            objective_expected(down, dist, caps, cfg, Utility(), weights)
        assert stall(out.plan, caps, cfg) <= stall(relaxed, caps, cfg) + 1e-9
        assert all(b >= -1e-12 for b in out.residual_budget_mbits)
        # at most one ladder step above the rounded-down level
        assert np.all(out.plan.levels - down.levels <= 1)
        out.plan.validate(cfg)


class TestAlgorithm2:
    def config(self):
        return VideoConfig(2, 1, 3, 1.0, LADDER, 1, 1, 1.0)

    def test_all_or_nothing(self):
        cfg = self.config()
        relaxed = ContinuousRatePlan(np.array([[0.6, 0.6, 0.25], [0.5, 0.5, 0.25]]))
        out = algorithm2(relaxed, [{0, 1}, {0, 1}], [100.0, 100.0], cfg)
        # 0.2 Mbit saved, the set needs 0.5
        assert out.plan.levels.tolist() == [[1, 1, 0], [1, 1, 0]]
        assert out.diagnostics["upgraded"] == [False, False]
        assert out.diagnostics["gamma"] == [0.5, 0.5]

    def test_abundant_residual(self):
        cfg = self.config()
        relaxed = ContinuousRatePlan(np.array([[0.7, 0.7, 0.95], [0.45, 0.45, 0.99]]))
        out = algorithm2(relaxed, [{0, 1}, {0, 1}], [100.0, 100.0], cfg)
        assert out.plan.levels.tolist() == [[2, 2, 2], [1, 1, 2]]
        assert out.diagnostics["upgraded"] == [True, True]
        assert out.diagnostics["gamma"] == [0.75, 0.5]

    @settings(max_examples=40)
    @given(st.integers(0, 10**6))
    def test_stall_gamma_and_outside_tiles(self, seed):
        rng = np.random.default_rng(seed)
        K, N = 3, 5
        cfg = VideoConfig(K, 1, N, 1.0, LADDER, 1, 1, 1.0)
        sets = [set(rng.choice(N, size=int(rng.integers(1, N)), replace=False).tolist()) for _ in range(K)]
        caps = rng.uniform(0.5, 5.0, size=K).tolist()
        relaxed = solve_relaxed_robust(sets, caps, cfg, Utility(), 1000.0).rates
        out = algorithm2(relaxed, sets, caps, cfg)
        assert stall(out.plan, caps, cfg) <= stall(relaxed, caps, cfg) + 1e-9
        for k in range(K):
            outside = [i for i in range(N) if i not in sets[k]]
            assert np.all(out.plan.levels[k, outside] == 0)
            assert out.diagnostics["gamma"][k] == min(LADDER[out.plan.levels[k, i]] for i in sets[k])


class TestAlgorithm3:
    def example(self):
        return VideoConfig(2, 1, 2, 1, (1, 2), 1, 1, 1), [{0}, {0}], [4, 4]

    def test_example(self):
        cfg, sets, caps = self.example()
        out = algorithm3(sets, caps, cfg)
        assert out.plan.levels.tolist() == [[1, 0], [1, 0]]
        assert out.diagnostics["gamma"] == [2, 2]
        assert objective_robust(out.plan, sets, caps, cfg, Utility(), 1000) == 4

    def test_example_against_enumeration(self):
        cfg, sets, caps = self.example()
        values = [robust_value_exact(p.tolist(), (1, 2), sets, caps, 1, 1, 10**6, 1, 0, 1000)
                  for p in all_plans(2, 2, 1)]
        assert max(values) == 4
        best = brute_force_optimal("robust", sets, caps, cfg, Utility(), QoeWeights(lam=1000))
        assert objective_robust(best, sets, caps, cfg, Utility(), 1000) == 4

    def test_capacity_too_low(self):
        cfg = VideoConfig(3, 1, 4, 1.0, LADDER, 1, 1, 1.0)
        caps = [0.5, 0.5, 0.5]
        out = algorithm3([{0, 1}] * 3, caps, cfg)
        assert np.all(out.plan.levels == 0)
        assert stall(out.plan, caps, cfg) > 0

    def test_max_level_cap(self):
        cfg, sets, caps = self.example()
        out = algorithm3(sets, caps, cfg, max_level=0)
        assert np.all(out.plan.levels == 0)

    @settings(max_examples=40)
    @given(st.integers(0, 10**6))
    def test_stall_and_outside_tiles(self, seed):
        rng = np.random.default_rng(seed)
        K, N = 4, 6
        cfg = VideoConfig(K, 1, N, 1.0, LADDER, 1, 1, float(rng.uniform(0, 3)), int(rng.integers(1, 5)))
        sets = [set(rng.choice(N, size=int(rng.integers(1, N + 1)), replace=False).tolist()) for _ in range(K)]
        caps = rng.uniform(0.5, 8.0, size=K).tolist()
        out = algorithm3(sets, caps, cfg)
        assert stall(out.plan, caps, cfg) <= stall(RatePlan.base(cfg), caps, cfg) + 1e-9
        for k in range(K):
            outside = [i for i in range(N) if i not in sets[k]]
            assert np.all(out.plan.levels[k, outside] == 0)
            assert len(set(out.plan.levels[k, sorted(sets[k])].tolist())) == 1
        # the uniform baseline never beats it on the guaranteed-rate objective
        base = baseline_uniform(caps, cfg).plan
        assert objective_robust(base, sets, caps, cfg, Utility(), 1000.0) <= \
            objective_robust(out.plan, sets, caps, cfg, Utility(), 1000.0) + 1e-9


class TestBaselines:
    def test_uniform_exact_capacity(self):
        cfg = VideoConfig(3, 1, 2, 1, (F(1, 2), 1, 2), 1, 1, 1)
        caps = [2, 2, 2]
        out = baseline_uniform(caps, cfg)
        assert out.plan.levels.tolist() == [[1, 1]] * 3
        assert stall(out.plan, caps, cfg) == 0

    def test_uniform_under_capacity(self):
        cfg = VideoConfig(2, 1, 4, 1.0, LADDER, 1, 1, 1.0)
        out = baseline_uniform([0.5, 0.5], cfg)
        assert np.all(out.plan.levels == 0)
        assert stall(out.plan, [0.5, 0.5], cfg) > 0

    def test_greedy_fetches_most_likely_viewport(self):
        cfg = reference_config(2)
        vps = [viewport_at(3, cfg), viewport_at(17, cfg)]
        dist = synthetic_distribution(vps, 0.8, cfg)
        out = baseline_greedy_fov(dist, [1e6, 1e6], cfg)
        for k in range(2):
            fetched = set(np.flatnonzero(out.plan.levels[k] != UNFETCHED).tolist())
            assert fetched == set(vps[k].tiles)
            assert np.all(out.plan.levels[k, sorted(fetched)] == cfg.max_level)

    def test_greedy_bits_are_l_over_n_of_uniform(self):
        cfg = reference_config(1)
        dist = synthetic_distribution([viewport_at(0, cfg)], 0.8, cfg)
        for j in range(cfg.max_level + 1):
            uniform = RatePlan(np.full((1, 32), j, dtype=np.int64))
            greedy = RatePlan(np.full((1, 32), UNFETCHED, dtype=np.int64))
            greedy.levels[0, sorted(viewport_at(0, cfg).tiles)] = j
            assert chunk_size_mbits(greedy, 0, cfg) == pytest.approx(chunk_size_mbits(uniform, 0, cfg) * 6 / 32)
        out = baseline_greedy_fov(dist, [1e6], cfg)
        assert chunk_size_mbits(out.plan, 0, cfg) == pytest.approx(6 * 1.0 * 2)

    def test_greedy_tie_goes_to_lowest_index(self):
        cfg = VideoConfig(1, 1, 4, 1.0, LADDER, 1, 2, 1.0)
        dist = FovDistribution([[(Viewport({2, 3}), 0.5), (Viewport({0, 1}), 0.5)]])
        out = baseline_greedy_fov(dist, [100.0], cfg)
        assert out.plan.levels[0].tolist()[2:] == [UNFETCHED, UNFETCHED]


class TestBruteForce:
    def test_single_tile(self):
        cfg = VideoConfig(1, 1, 1, 1, (1, 2), 1, 1, 1)
        dist = FovDistribution([[(Viewport({0}), 1.0)]])
        w = QoeWeights(0.0, 1000)
        assert brute_force_optimal("expected", dist, [2], cfg, Utility(), w).levels.tolist() == [[1]]
        assert brute_force_optimal("expected", dist, [1.5], cfg, Utility(), w).levels.tolist() == [[0]]

    def test_too_large(self):
        cfg = reference_config(2)
        dist = synthetic_distribution([viewport_at(0, cfg)] * 2, 0.8, cfg)
        with pytest.raises(ValueError):
            brute_force_optimal("expected", dist, [1.0, 1.0], cfg, Utility(), QoeWeights())

    def test_unknown_objective(self):
        cfg = VideoConfig(1, 1, 1, 1, (1, 2), 1, 1, 1)
        with pytest.raises(ValueError):
            brute_force_optimal("median", None, [1], cfg, Utility(), QoeWeights())

    @settings(max_examples=30)
    @given(st.integers(0, 10**6))
    def test_reduced_robust_search_matches_full_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        K, N = 2, 3
        ladder = (1, 2, 3)
        cfg = VideoConfig(K, 1, N, 1, ladder, 1, 1, int(rng.integers(0, 3)), int(rng.choice([1, 10**6])))
        sets = [frozenset(rng.choice(N, size=int(rng.integers(1, N + 1)), replace=False).tolist())
                for _ in range(K)]
        caps = [F(int(c), 2) for c in rng.integers(1, 24, size=K)]
        lam = 1000
        reduced = brute_force_optimal("robust", sets, caps, cfg, Utility(), QoeWeights(lam=lam))
        full = brute_force_optimal("robust", sets, caps, cfg, Utility(), QoeWeights(lam=lam), method="full")
        exact = max(robust_value_exact(p.tolist(), ladder, sets, caps, 1, cfg.startup_delay_s,
                                       cfg.max_buffer_chunks, 1, 0, lam) for p in all_plans(K, N, 2))
        assert objective_robust(reduced, sets, caps, cfg, Utility(), lam) == exact
        assert objective_robust(full, sets, caps, cfg, Utility(), lam) == pytest.approx(float(exact))

    @settings(max_examples=20)
    @given(st.integers(0, 10**6))
    def test_expected_search_matches_exact_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        cfg, dist, caps = random_expected_instance(rng, K=2, cols=3)
        cfg = VideoConfig(2, 1, 3, 1.0, (0.25, 0.5, 1.0), 1, 2, cfg.startup_delay_s)
        w = QoeWeights(0.1, 1000.0)
        best = brute_force_optimal("expected", dist, caps, cfg, Utility(), w)
        want = max(objective_expected(RatePlan(p), dist, caps, cfg, Utility(), w) for p in all_plans(2, 3, 2))
        assert objective_expected(best, dist, caps, cfg, Utility(), w) == pytest.approx(want, abs=1e-9)


def test_exact_stall_oracle_agrees_with_timeline():
    cfg = VideoConfig(3, 1, 2, F(1), (F(1, 2), F(1)), 1, 1, F(1, 2), 2)
    for flat in itertools.product(range(2), repeat=6):
        plan = RatePlan(np.array(flat).reshape(3, 2))
        caps = [F(1), F(3, 2), F(2, 3)]
        sizes = [chunk_size_mbits(plan, k, cfg) for k in range(3)]
        assert stall(plan, caps, cfg) == exact_stall(sizes, caps, F(1), F(1, 2), 2)


def exact_optimum(cfg, sets, caps, lam):
    ladder = cfg.rate_levels_mbps
    return max(robust_value_exact(p.tolist(), ladder, sets, caps, cfg.chunk_duration_s, cfg.startup_delay_s,
                                  cfg.max_buffer_chunks, 1, 0, lam)
               for p in all_plans(cfg.num_chunks, cfg.tiles_per_chunk, cfg.max_level))


def alg3_value(cfg, sets, caps, lam):
    return objective_robust(algorithm3(sets, caps, cfg, lam).plan, sets, caps, cfg, Utility(), lam)


class TestAlgorithm3Optimality:
    """Exact optimality holds for uniform ladders, constant capacity and a stall weight
    that dwarfs utility per second of stall.  Each case below breaks one condition."""

    @settings(max_examples=60)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.sampled_from([F(1, 2), F(1)]),
           st.integers(1, 16), st.integers(0, 6), st.sampled_from([1, 2, 10**6]), st.data())
    def test_matches_exhaustive_search(self, K, N, m, step, cap2, tini2, B, data):
        cfg = VideoConfig(K, 1, N, F(1), tuple(step * (j + 1) for j in range(m + 1)), 1, 1, F(tini2, 2), B)
        sizes = sorted(data.draw(st.integers(1, N)) for _ in range(K))
        sets = [frozenset(data.draw(st.permutations(range(N)))[:s]) for s in sizes]
        caps = [F(cap2, 2)] * K
        lam = F(1000)
        assert alg3_value(cfg, sets, caps, lam) == exact_optimum(cfg, sets, caps, lam)

    def test_non_uniform_ladder(self):
        # a mid level on chunk 0 leaves too little for the top level on chunk 1
        cfg = VideoConfig(2, 1, 1, F(1), (F(1), F(4), F(8)), 1, 1, F(2))
        sets, caps, lam = [{0}, {0}], [F(3), F(3)], F(1000)
        assert algorithm3(sets, caps, cfg, lam).plan.levels.tolist() == [[1], [1]]
        assert alg3_value(cfg, sets, caps, lam) == 8
        assert exact_optimum(cfg, sets, caps, lam) == 9

    def test_varying_capacity(self):
        # bandwidth saved on the slow chunk buys more on the fast one
        cfg = VideoConfig(2, 1, 2, F(1), (F(1), F(2), F(3)), 1, 1, F(2))
        sets, caps, lam = [{0, 1}, {0, 1}], [F(2), F(3)], F(1000)
        assert alg3_value(cfg, sets, caps, lam) == 3
        assert exact_optimum(cfg, sets, caps, lam) == 4

    def test_stall_weight_just_above_utility_sum(self):
        # lam = K * U(R_m) + 1 = 5 makes a 1/7 s extra stall worth buying for +1 utility
        cfg = VideoConfig(2, 1, 1, F(1), (F(1), F(2)), 1, 1, F(0))
        sets, caps, lam = [{0}, {0}], [F(7), F(7)], F(5)
        assert alg3_value(cfg, sets, caps, lam) == F(16, 7)
        assert exact_optimum(cfg, sets, caps, lam) == F(18, 7)
        assert alg3_value(cfg, sets, caps, F(1000)) == exact_optimum(cfg, sets, caps, F(1000))
