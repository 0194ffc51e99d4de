import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2dcache.caching import (
    CacheFullError,
    CacheMatrix,
    GreedyState,
    average_delay,
    best_pair,
    delay_improvement,
    exhaustive_optimal,
    naive_cache,
    probabilistic_cache,
    request_weights,
    run_caching,
    search_space_size,
)
from d2dcache.channel import BS, SystemParams, Topology, build_delay_matrix, compute_best_sources
from d2dcache.workload import zipf_popularity


def _instance(rng, N, M):
    omega = rng.random((N, M)) ** 2
    omega /= omega.sum()
    A = rng.uniform(1.0, 10.0, size=(N, N))
    t_avg = np.minimum(A, A.T)
    return omega, t_avg


def _geo_instance(seed, N, M):
    # delays from random positions in a 1.5 km cell, skewed random weights
    rng = np.random.default_rng(seed)
    topo = Topology.random(N, 1.5, seed, stratified=False)
    t_avg = build_delay_matrix(topo, SystemParams.from_db(96.13, 16.9, 13.0, N), 200, seed)
    omega = rng.random((N, M)) ** 3
    return omega / omega.sum(), t_avg


def _naive_eta(omega, t_avg, mu):
    return average_delay(omega, compute_best_sources(t_avg, naive_cache(omega, mu).phi)[1])


def _second_enumerator(omega, t_avg, mu):
    # independent brute force: enumerate every per-user file subset and
    # evaluate eta with explicit loops
    N, M = omega.shape
    best = math.inf
    for rows in itertools.product(itertools.combinations(range(M), mu), repeat=N):
        eta = 0.0
        for i in range(N):
            for j in range(M):
                if j in rows[i]:
                    continue
                d = t_avg[i, i]
                for k in range(N):
                    if k != i and j in rows[k]:
                        d = min(d, t_avg[k, i])
                eta += omega[i, j] * d
        best = min(best, eta)
    return best


class TestAverageDelay:
    def test_constant(self):
        assert average_delay(np.full((3, 4), 1 / 12), np.full((3, 4), 2.5)) == pytest.approx(2.5)

    def test_zero(self):
        assert average_delay(np.full((2, 2), 0.25), np.zeros((2, 2))) == 0.0

    def test_hand_instance(self):
        omega = np.array([[0.1, 0.4], [0.3, 0.2]])
        D = np.array([[2.0, 0.0], [5.0, 1.0]])
        assert average_delay(omega, D) == pytest.approx(0.1 * 2 + 0.3 * 5 + 0.2 * 1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            average_delay(np.ones((2, 2)), np.ones((2, 3)))

    def test_request_weights(self):
        np.testing.assert_allclose(request_weights([[1.0, 3.0]]), [[0.25, 0.75]])
        assert np.all(request_weights(np.zeros((2, 2))) == 0)


class TestDelayImprovement:
    def _state(self, omega, t_avg):
        s = GreedyState.initial(omega, t_avg, 1)
        return s.phi, s.phi_prev, s.source, s.d_min, s.budgets

    def test_cached_pair_gains_nothing(self):
        omega = np.array([[0.5, 0.5]])
        phi = np.array([[1, 0]])
        S = np.array([[0, BS]])
        D = np.array([[0.0, 4.0]])
        imp = delay_improvement(0, 0, phi, np.zeros_like(phi), omega, S, np.array([[4.0]]), D,
                                np.array([1]))
        assert imp.gain == 0.0
        np.testing.assert_array_equal(imp.d_min, D)
        np.testing.assert_array_equal(imp.budgets, [1])

    def test_single_user(self):
        omega = np.array([[0.2, 0.8]])
        t_avg = np.array([[5.0]])
        phi, prev, S, D, xi = self._state(omega, t_avg)
        imp = delay_improvement(0, 0, phi, prev, omega, S, t_avg, D, xi)
        assert imp.gain == pytest.approx(1.0)
        assert imp.d_min[0, 0] == 0.0 and imp.source[0, 0] == 0
        assert imp.budgets[0] == 0
        assert xi[0] == 1   # evaluation has no side effects

    def test_budget_blocks_new_placement(self):
        omega = np.array([[0.2, 0.8]])
        t_avg = np.array([[5.0]])
        phi, _, S, D, _ = self._state(omega, t_avg)
        prev = np.array([[1, 0]], dtype=np.int8)
        zero = np.array([0])
        assert delay_improvement(0, 1, phi, prev, omega, S, t_avg, D, zero).gain == 0.0
        # re-caching last cycle's file is free
        assert delay_improvement(0, 0, phi, prev, omega, S, t_avg, D, zero).gain == pytest.approx(1.0)

    def test_gain_is_eta_reduction(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            N, M = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            omega, t_avg = _instance(rng, N, M)
            phi = (rng.random((N, M)) < 0.3).astype(np.int8)
            S, D = compute_best_sources(t_avg, phi)
            i, j = int(rng.integers(N)), int(rng.integers(M))
            imp = delay_improvement(i, j, phi, np.zeros_like(phi), omega, S, t_avg, D,
                                    np.full(N, 5))
            assert imp.gain == pytest.approx(average_delay(omega, D) - average_delay(omega, imp.d_min),
                                             abs=1e-12)
            if not phi[i, j]:
                after = phi.copy()
                after[i, j] = 1
                S2, D2 = compute_best_sources(t_avg, after)
                np.testing.assert_allclose(imp.d_min, D2, atol=0)


class TestBestPair:
    def test_dominant_candidate(self):
        omega = np.array([[0.05, 0.9, 0.05]])
        s = GreedyState.initial(omega, np.array([[3.0]]), 1)
        assert best_pair(s)[:2] == (0, 1)

    def test_zero_weights_fallback(self):
        s = GreedyState.initial(np.zeros((2, 3)), np.array([[3.0, 1.0], [1.0, 3.0]]), 1)
        i, j, g = best_pair(s)
        assert g == 0.0 and s.phi.sum() == 1

    def test_matches_single_step_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            omega, t_avg = _instance(rng, 2, 3)
            s = GreedyState.initial(omega, t_avg, 2)
            best_pair(s)
            # enumerate all N*M first placements from scratch
            scores = {}
            for i, j in itertools.product(range(2), range(3)):
                phi = np.zeros((2, 3))
                phi[i, j] = 1
                scores[(i, j)] = average_delay(omega, compute_best_sources(t_avg, phi)[1])
            target = min(scores, key=lambda k: (scores[k], k))
            assert tuple(np.argwhere(s.phi)[0]) == target

    def test_cache_full(self):
        s = GreedyState.initial(np.full((1, 2), 0.5), np.array([[2.0]]), 1)
        best_pair(s)
        with pytest.raises(CacheFullError):
            best_pair(s)


class TestRunCaching:
    def test_single_user_top_file(self):
        res = run_caching(np.array([[0.9, 0.1]]), np.array([[4.0]]), 1)
        assert res.cache.files_of(0) == [0]

    def test_capacity_above_library(self):
        with pytest.raises(ValueError):
            run_caching(np.ones((1, 2)) / 2, np.array([[1.0]]), 3)

    def test_zero_capacity(self):
        res = run_caching(np.ones((2, 2)) / 4, np.eye(2) + 1, 0)
        assert res.phi.sum() == 0 and res.evaluations == 0

    def test_search_count(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            N, M = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            mu = int(rng.integers(0, M + 1))
            omega, t_avg = _instance(rng, N, M)
            res = run_caching(omega, t_avg, mu)
            assert res.evaluations == search_space_size(N, M, mu)
            assert 2 * res.evaluations == 2 * N * N * M * mu - N * N * mu * mu + N * mu

    def test_vectorized_equals_scalar(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            N, M = int(rng.integers(1, 5)), int(rng.integers(2, 7))
            mu = int(rng.integers(1, M + 1))
            omega, t_avg = _instance(rng, N, M)
            a = run_caching(omega, t_avg, mu, vectorized=True)
            b = run_caching(omega, t_avg, mu, vectorized=False)
            assert a.placements == b.placements
            np.testing.assert_allclose(a.etas, b.etas, atol=1e-12)

    def test_state_consistent_every_iteration(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            N, M = int(rng.integers(1, 5)), int(rng.integers(2, 7))
            mu = int(rng.integers(1, M + 1))
            omega, t_avg = _instance(rng, N, M)
            s = GreedyState.initial(omega, t_avg, mu)
            for _ in range(N * mu):
                best_pair(s)
                S, D = compute_best_sources(t_avg, s.phi)
                np.testing.assert_array_equal(s.source, S)
                np.testing.assert_array_equal(s.d_min, D)

    def test_feasibility_with_tight_budgets(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            N, M = int(rng.integers(1, 6)), int(rng.integers(2, 10))
            mu = int(rng.integers(1, M + 1))
            omega, t_avg = _instance(rng, N, M)
            prev = run_caching(omega, t_avg, mu).phi
            budgets = rng.integers(0, 2, size=N)
            omega2, _ = _instance(rng, N, M)
            res = run_caching(omega2, t_avg, mu, prev, budgets)
            assert res.cache.is_complete()
            assert np.all(res.cache.replacements(prev) <= 2 * budgets)
            assert np.all(res.cache.budgets >= 0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), N=st.integers(1, 6), M=st.integers(1, 8),
           data=st.data())
    def test_complete_and_monotone(self, seed, N, M, data):
        mu = data.draw(st.integers(0, M))
        omega, t_avg = _instance(np.random.default_rng(seed), N, M)
        res = run_caching(omega, t_avg, mu)
        assert res.cache.is_complete()
        assert np.all(np.diff(res.etas) <= 0)
        assert res.eta == pytest.approx(average_delay(omega, compute_best_sources(t_avg, res.phi)[1]),
                                        abs=1e-12)

    def test_equals_naive_without_d2d_advantage(self):
        # no D2D link beats the receiver's BS link: sharing never helps, so
        # greedy reduces to every user caching its own top files
        rng = np.random.default_rng(6)
        for _ in range(100):
            N, M = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            mu = int(rng.integers(0, M + 1))
            omega, _ = _instance(rng, N, M)
            t_avg = np.full((N, N), 20.0)
            np.fill_diagonal(t_avg, rng.uniform(1.0, 10.0, N))
            assert run_caching(omega, t_avg, mu).eta == pytest.approx(_naive_eta(omega, t_avg, mu),
                                                                    abs=1e-12)

    def test_dominance_over_geometric_instances(self):
        # greedy is myopic and can lose to naive; the known counterexamples of
        # this fixed instance family are pinned so that any new one fails
        known = {67, 131, 258, 339, 374, 448}
        worse = set()
        for s in range(500):
            rng = np.random.default_rng(10_000 + s)
            N, M = int(rng.integers(1, 7)), int(rng.integers(1, 12))
            mu = int(rng.integers(0, M + 1))
            omega, t_avg = _geo_instance(s, N, M)
            greedy = run_caching(omega, t_avg, mu).eta
            naive = _naive_eta(omega, t_avg, mu)
            if greedy > naive + 1e-12:
                worse.add(s)
                warnings.warn(f"instance {s} (N={N}, M={M}, mu={mu}): greedy eta {greedy:.6g} "
                              f"> naive eta {naive:.6g}")
        assert worse == known

    def test_greedy_can_lose_to_naive(self):
        # smallest recorded counterexample: the first placement is the best
        # single step, yet it steers the remaining placements badly
        omega = np.array([[0.095, 0.003], [0.296, 0.381], [0.176, 0.048]])
        omega /= omega.sum()
        t_avg = np.array([[7.883, 4.883, 6.96], [4.883, 2.862, 1.195], [6.96, 1.195, 3.422]])
        res = run_caching(omega, t_avg, 1)
        _, opt = exhaustive_optimal(omega, t_avg, 1)
        assert res.placements[0] == (1, 0)
        assert res.eta > _naive_eta(omega, t_avg, 1) > opt - 1e-12


class TestNaive:
    def test_uniform_takes_first_files(self):
        c = naive_cache(np.ones((2, 5)), 2)
        assert c.files_of(0) == [0, 1] and c.files_of(1) == [0, 1]

    def test_identical_rows(self):
        w = np.tile(zipf_popularity(8, 0.7)[::-1], (4, 1))
        phi = naive_cache(w, 3).phi
        assert np.all(phi == phi[0])
        assert list(np.flatnonzero(phi[0])) == [5, 6, 7]

    def test_own_top(self):
        w = np.array([[0.1, 0.5, 0.2, 0.2], [0.4, 0.0, 0.3, 0.3]])
        c = naive_cache(w, 2)
        assert c.files_of(0) == [1, 2] and c.files_of(1) == [0, 2]


class TestProbabilistic:
    def test_steep_zipf_picks_top(self):
        pop = zipf_popularity(10, 10.0)
        hits = sum(int(probabilistic_cache(pop, 1, 1, seed).phi[0, 0]) for seed in range(1000))
        assert hits / 1000 > 0.99

    def test_full_capacity(self):
        assert probabilistic_cache(zipf_popularity(6, 1.0), 3, 6, 0).phi.sum() == 18

    def test_inclusion_order_follows_popularity(self):
        pop = zipf_popularity(5, 1.0)
        freq = np.zeros(5)
        for seed in range(10_000):
            freq += probabilistic_cache(pop, 1, 2, seed).phi[0]
        assert np.all(np.diff(freq) < 0)

    def test_deterministic_and_complete(self):
        pop = zipf_popularity(12, 0.5)
        a = probabilistic_cache(pop, 4, 5, 7)
        b = probabilistic_cache(pop, 4, 5, 7)
        np.testing.assert_array_equal(a.phi, b.phi)
        assert a.is_complete()

    def test_zero_popularity_files_fill_last(self):
        c = probabilistic_cache(np.array([0.5, 0.5, 0.0, 0.0]), 1, 3, 1)
        assert c.phi[0, :2].sum() == 2 and c.phi[0].sum() == 3


class TestExhaustive:
    def test_single_user_top_files(self):
        omega = np.array([[0.1, 0.4, 0.2, 0.3]])
        cache, eta = exhaustive_optimal(omega, np.array([[3.0]]), 2)
        assert cache.files_of(0) == [1, 3]
        np.testing.assert_array_equal(cache.phi, naive_cache(omega, 2).phi)

    def test_matches_second_enumerator(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            omega, t_avg = _instance(rng, 2, 4)
            _, eta = exhaustive_optimal(omega, t_avg, 1)
            assert eta == pytest.approx(_second_enumerator(omega, t_avg, 1), abs=1e-12)

    def test_ordering(self):
        rng = np.random.default_rng(8)
        for s in range(30):
            N, M = int(rng.integers(1, 4)), int(rng.integers(2, 6))
            mu = int(rng.integers(1, 3))
            omega, t_avg = _geo_instance(500 + s, N, M)
            _, opt = exhaustive_optimal(omega, t_avg, mu)
            greedy = run_caching(omega, t_avg, mu).eta
            assert opt <= greedy + 1e-12
            assert greedy <= _naive_eta(omega, t_avg, mu) + 1e-12

    def test_refuses_large(self):
        with pytest.raises(ValueError):
            exhaustive_optimal(np.ones((5, 20)) / 100, np.ones((5, 5)), 5)


class TestCacheMatrix:
    def test_defaults_and_replacements(self):
        c = CacheMatrix([[1, 0, 1], [0, 1, 1]], 2)
        assert c.is_complete()
        np.testing.assert_array_equal(c.budgets, [2, 2])
        np.testing.assert_array_equal(c.replacements([[1, 1, 0], [0, 1, 1]]), [2, 0])
