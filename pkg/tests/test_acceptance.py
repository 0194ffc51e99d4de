"""Acceptance criteria 1-10, one test each.

Every test records its outcome in ``conftest.CRITERIA``; the terminal
summary prints one PASS/FAIL line per criterion.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import integrate

from conftest import CRITERIA, GREEDY_TRACE
from d2dcache import config as cfgmod
from d2dcache.caching import (
    average_delay,
    exhaustive_optimal,
    naive_cache,
    run_caching,
    search_space_size,
)
from d2dcache.channel import (
    SystemParams,
    Topology,
    build_delay_matrix,
    compute_best_sources,
    estimate_avg_delay,
)
from d2dcache.experiments import default_config, emit_csv, registered_scenarios, run_scenario
from d2dcache.intensity import SampleSet, estimate_intensity
from d2dcache.workload import SCRIPTED_PREFERENCES


@contextmanager
def criterion(k, title, limit=None):
    ok = False
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if limit is not None:
            assert elapsed < limit, f"took {elapsed:.1f} s, limit {limit} s"
        ok = True
    finally:
        # parametrized criteria stay red once any case fails
        prev = CRITERIA.get(k)
        CRITERIA[k] = (title, ok and (prev is None or prev[1]))
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {title}")


def _geo_instance(seed, N, M):
    rng = np.random.default_rng(seed)
    topo = Topology.random(N, 1.5, seed, stratified=False)
    t_avg = build_delay_matrix(topo, SystemParams.from_db(96.13, 16.9, 13.0, N), 200, seed)
    omega = rng.random((N, M)) ** 3
    return omega / omega.sum(), t_avg


def _naive_eta(omega, t_avg, mu):
    return average_delay(omega, compute_best_sources(t_avg, naive_cache(omega, mu).phi)[1])


def _curves(table, metric="eta_mean"):
    # {policy label: {sweep value: mean}}
    return {p: table.series(p, metric) for p in table.policies
            if table.series(p, metric)}


def _piecewise_integral(e, L, W):
    # the estimate is quadratic between kernel breakpoints, where a 3-point
    # Gauss rule is exact
    kinks = np.concatenate([e.samples.arrivals + d for d in (-W, W, W - L, L - W)])
    edges = np.unique(np.concatenate(([0.0, L], kinks[(kinks > 0) & (kinks < L)])))
    x, w = np.polynomial.legendre.leggauss(3)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    values = e((mid[:, None] + half[:, None] * x).ravel()).reshape(-1, 3)
    return float(np.sum(half * (values @ w)))


def test_criterion_1_mass_identity():
    with criterion(1, "mass identity of the corrected estimator", limit=10):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            L = float(rng.uniform(0.5, 100.0))
            n = int(rng.integers(1, 60))
            NT = int(rng.integers(1, 30))
            W = float(rng.uniform(1e-3, 0.999)) * L
            e = estimate_intensity(SampleSet(rng.uniform(0, L, n), NT, L), W)
            assert abs(_piecewise_integral(e, L, W) - n / NT) < 1e-6
        # plain kernel with a sample within W of a boundary loses mass
        for arr in ([0.3, 5.0], [5.0, 9.9], [0.0, 10.0]):
            s = SampleSet(arr, 2, 10.0)
            plain = estimate_intensity(s, 1.0, corrected=False)
            val, _ = integrate.quad(plain, 0, 10, points=sorted({1.3, 4.0, 6.0, 8.9}),
                                    epsabs=1e-12)
            assert val < len(arr) / 2


def test_criterion_2_estimation_trends():
    with criterion(2, "estimation error decreases with N_T and minimum intensity", limit=120):
        cfg = cfgmod.apply_overrides(default_config("est-error-vs-NT"), [
            "replicates=20", "estimation_pairs=1", "sweep.values=[1, 10, 100]",
            "series.values=[40, 100, 400]"])
        table = run_scenario(cfg)
        err = {mi: table.series(f"kde/independent/min_intensity={mi}", "est_error_mean")
               for mi in (40, 100, 400)}
        for mi in (40, 100, 400):
            assert err[mi][100] < err[mi][10] < err[mi][1], (mi, err[mi])
        for nt in (1, 10, 100):
            assert err[400][nt] < err[100][nt] < err[40][nt], (nt, {m: err[m][nt] for m in err})


def test_criterion_3_greedy_quality():
    with criterion(3, "greedy between exhaustive optimum and naive, within 10%", limit=60):
        close = 0
        for s in range(50):
            rng = np.random.default_rng(30_000 + s)
            N, M = int(rng.integers(1, 4)), int(rng.integers(2, 7))
            mu = int(rng.integers(1, 3))
            omega, t_avg = _geo_instance(3_000 + s, N, M)
            _, opt = exhaustive_optimal(omega, t_avg, mu)
            greedy = run_caching(omega, t_avg, mu).eta
            naive = _naive_eta(omega, t_avg, mu)
            assert opt <= greedy + 1e-12 and greedy <= naive + 1e-12, (s, opt, greedy, naive)
            close += greedy <= 1.1 * opt
        assert close >= 45, close


def test_criterion_4_search_count():
    with criterion(4, "candidate-evaluation count identity", limit=10):
        rng = np.random.default_rng(4)
        for _ in range(20):
            N, M = int(rng.integers(1, 9)), int(rng.integers(1, 15))
            mu = int(rng.integers(0, M + 1))
            omega = rng.random((N, M))
            A = rng.uniform(1, 10, (N, N))
            res = run_caching(omega / omega.sum(), np.minimum(A, A.T), mu)
            assert 2 * res.evaluations == 2 * N * N * M * mu - N * N * mu * mu + N * mu
            assert res.evaluations == search_space_size(N, M, mu)


def test_criterion_5_gain_identity():
    # the conftest observer checks every run_caching call of the whole suite;
    # this test adds a batch with budgets and previous placements
    with criterion(5, "gain identity and monotone eta in every greedy run"):
        before = GREEDY_TRACE["runs"]
        rng = np.random.default_rng(5)
        for _ in range(200):
            N, M = int(rng.integers(1, 7)), int(rng.integers(1, 12))
            mu = int(rng.integers(0, M + 1))
            omega = rng.random((N, M)) ** 2
            A = rng.uniform(1, 10, (N, N))
            t_avg = np.minimum(A, A.T)
            first = run_caching(omega / omega.sum(), t_avg, mu)
            omega2 = rng.random((N, M))
            run_caching(omega2 / omega2.sum(), t_avg, mu, first.phi, rng.integers(0, 3, N))
        assert GREEDY_TRACE["runs"] >= before + 400


def test_criterion_6_cache_states():
    with criterion(6, "scripted three-user cache states", limit=30):
        table = run_scenario(default_config("table-cache-states"))

        def caches(policy, cycle):
            out = []
            for u in range(3):
                (row,) = [r for r in table.rows if r.policy == f"{policy}/scripted/true"
                          and r.sweep_value == cycle and r.metric == f"cache_u{u + 1}"]
                out.append({int(f) for f in row.value.strip("{}").split(";") if f})
            return out

        expected = [{1, 2, 3}, {8, 9, 10}, {15, 16, 17}]
        assert caches("proposed", 1) == expected
        assert caches("naive", 1) == expected
        prefs = [set(p) for p in SCRIPTED_PREFERENCES]
        # users 1 and 3 peak at cycle 25, user 2 at cycle 75
        for cycle, inactive, active in ((25, [1], [0, 2]), (75, [0, 2], [1])):
            borrowed = set().union(*(prefs[a] for a in active))
            for u in inactive:
                foreign = borrowed - prefs[u]
                assert caches("proposed", cycle)[u] & foreign, (cycle, u)
                assert not caches("naive", cycle)[u] & foreign, (cycle, u)
            for u in range(3):
                assert caches("naive", cycle)[u] <= prefs[u]


FIGURES = ("fig-delay-vs-mu", "fig-delay-vs-N", "fig-delay-vs-beta", "fig-delay-vs-mu-zipf",
           "fig-delay-vs-N-zipf")


def _check_figure(name, table):
    curves = _curves(table)
    for label, curve in curves.items():
        policy, rest = label.split("/", 1)
        if policy != "proposed":
            continue
        for other in ("naive", "probabilistic"):
            ref = curves.get(f"{other}/{rest}")
            if ref is None:
                continue
            for x, v in curve.items():
                assert v <= ref[x] + 1e-12, (name, label, other, x, v, ref[x])
        xs = sorted(curve)
        if name.startswith("fig-delay-vs-N"):
            xs = [x for x in xs if x >= 2]
        values = [curve[x] for x in xs]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:])), (name, label, values)
    if name == "fig-delay-vs-N-zipf":
        flat = [v for x, v in curves["naive/identical/true"].items() if x >= 2]
        assert (max(flat) - min(flat)) / min(flat) <= 0.01, flat


def test_criterion_7_figure_trends():
    with criterion(7, "figure trends: proposed best, monotone, naive-identical flat", limit=300):
        failures = []
        for name in FIGURES:
            cfg = default_config(name)
            assert cfg.replicates == 10
            table = run_scenario(cfg)
            try:
                _check_figure(name, table)
            except AssertionError as exc:
                failures.append(f"{name}: {exc}")
        assert not failures, failures


def test_criterion_8_broadcast_ordering():
    with criterion(8, "broadcast ordering and small broadcast gain", limit=120):
        table = run_scenario(default_config("table-broadcast"))
        v = {(p, m): table.series(f"{p}/independent/true", f"eta_hat_{m}_mean")[0]
             for p in ("proposed", "naive") for m in ("unicast", "broadcast")}
        for p in ("proposed", "naive"):
            assert v[(p, "broadcast")] <= v[(p, "unicast")], v
        for m in ("unicast", "broadcast"):
            assert v[("proposed", m)] < v[("naive", m)], v
        for p in ("proposed", "naive"):
            for m in ("unicast", "broadcast"):
                gain_bc = v[(p, "unicast")] - v[(p, "broadcast")]
                gap = v[("naive", m)] - v[("proposed", m)]
                assert gain_bc < gap, v


def _frame_oracle(snr, F, n, rng):
    # frame-by-frame transmission of n files with fresh fading each frame
    sent = np.zeros(n)
    delay = np.zeros(n, dtype=np.int64)
    pending = np.arange(n)
    frame = 0
    while pending.size:
        frame += 1
        sent[pending] += np.log2(1.0 + snr * rng.exponential(1.0, pending.size))
        done = sent[pending] >= F
        delay[pending[done]] = frame
        pending = pending[~done]
    return delay


def test_criterion_9_monte_carlo_delay():
    with criterion(9, "Monte-Carlo delay: exact ceiling and oracle agreement"):
        for F, snr in ((96.13, 3.0), (11.29, 0.7), (1.5, 1.0), (40.0, 1000.0)):
            p = SystemParams(file_size=F, bs_power=1.0, user_powers=[1.0], fading="none")
            assert estimate_avg_delay(snr, 1.0, p, 100, 0) == math.ceil(F / math.log2(1 + snr))
        rng = np.random.default_rng(9)
        for k in range(10):
            F = float(rng.choice([96.13, 11.29]))
            d = float(rng.uniform(0.1, 1.5))
            power = 10 ** (float(rng.choice([13.0, 16.9, 20.0, 23.0])) / 10)
            p = SystemParams(file_size=F, bs_power=power, user_powers=[power])
            est, se = estimate_avg_delay(power, d ** -4, p, 10_000, 100 + k, return_stderr=True)
            ref = _frame_oracle(power * d ** -4, F, 200_000, np.random.default_rng(900 + k))
            se_ref = ref.std(ddof=1) / math.sqrt(ref.size)
            assert abs(est - ref.mean()) < 3 * math.hypot(se, se_ref), (k, est, ref.mean())


def _reduced(name):
    cfg = default_config(name)
    sets = ["replicates=3"]
    if cfg.kind == "estimation":
        sets += ["estimation_pairs=2", f"sweep.values={cfg.sweep.values[:2]}",
                 f"series.values={cfg.series.values[:2]}"]
    elif cfg.kind == "delay":
        sets += ["n_users=6", "n_files=12", "mc_samples=300", "slots=30"]
        if cfg.sweep.param == "cache_size":
            sets.append("sweep.values=[2, 4]")
        elif cfg.sweep.param == "n_users":
            sets += ["sweep.values=[2, 6]", "cache_size=3"]
        else:
            sets.append("cache_size=3")
    return cfgmod.apply_overrides(cfg, sets)


@pytest.mark.parametrize("name", [s.name for s in registered_scenarios()])
def test_criterion_10_determinism(name, tmp_path):
    with criterion(10, "byte-identical CSV for any worker count"):
        cfg = default_config(name) if name == "table-cache-states" else _reduced(name)
        paths = []
        for k, jobs in enumerate((1, 2, 1)):
            path = tmp_path / f"{k}.csv"
            emit_csv(run_scenario(cfg, jobs=jobs), path)
            paths.append(path.read_bytes())
        assert paths[0] == paths[1] == paths[2]
