"""Registered scenarios, the per-replicate pipelines and CSV output.

Each replicate draws everything (positions, link delays, intensity profiles,
request histories) from substreams of ``derive_seed(seed, REPLICATE, r)``,
so replicates are independent of each other and of the worker count.
Within a replicate all sweep points share these draws (common random
numbers), which keeps the curves comparable across the sweep axis.
"""

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from d2dcache import caching, seeding
from d2dcache import config as cfgmod
from d2dcache.channel import SystemParams, Topology, build_delay_matrix, compute_best_sources
from d2dcache.intensity import expected_requests_many, fit_intensities
from d2dcache.transmission import RequestBatch, simulate_phase
from d2dcache.workload import (
    build_user_profiles,
    estimation_error,
    pair_means,
    sample_requests,
    unit_profile,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("scenario", "sweep_param", "sweep_value", "policy", "metric", "value", "seed",
              "replicate")
AGGREGATE_REPLICATE = -1
# replicates cycle through this many equally spaced radial offsets
OFFSET_STRATA = 10

# a tight cluster of three users about 1.2 km from the base station
_CLUSTER = [[1.2 + 0.173 * math.cos(a), 0.173 * math.sin(a)]
            for a in (math.pi, math.pi / 3, -math.pi / 3)]

_FIG_A = dict(cell_radius=1.5, bs_power_db=16.9, user_power_db=13.0, file_size=96.13)
_FIG_B = dict(cell_radius=1.8, bs_power_db=23.0, user_power_db=20.0, file_size=11.29)
_ZIPF = dict(_FIG_B, n_users=25, n_files=100, cache_size=30, zipf_beta=0.1,
             popularity_modes=["independent", "identical"], intensity_sources=["true"],
             policies=["proposed", "naive", "probabilistic"], cycle_count=1, cycles_per_period=1)
_ESTIMATED = dict(_FIG_A, n_users=25, n_files=100, zipf_beta=0.5, min_intensity=2.0,
                  periods_observed=10, intensity_sources=["true", "estimated"],
                  policies=["proposed", "naive"], cycle_count=2, cycles_per_period=4,
                  mc_samples=1000)


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    defaults: dict

    def config(self):
        return cfgmod.from_dict({"scenario": self.name, **self.defaults})


SCENARIOS = {s.name: s for s in (
    Scenario("est-error-vs-minintensity",
             "intensity estimation error vs minimum intensity, one curve per N_T",
             dict(kind="estimation", n_users=25, n_files=100, cache_size=30, zipf_beta=0.5,
                  estimation_pairs=4, replicates=5,
                  sweep={"param": "min_intensity", "values": [5, 10, 20, 40, 100, 200, 400]},
                  series={"param": "periods_observed", "values": [1, 10, 100]})),
    Scenario("est-error-vs-NT",
             "intensity estimation error vs N_T, one curve per minimum intensity",
             dict(kind="estimation", n_users=7, n_files=15, cache_size=4, zipf_beta=0.5,
                  estimation_pairs=4, replicates=5,
                  sweep={"param": "periods_observed", "values": [1, 2, 5, 10, 20, 50, 100]},
                  series={"param": "min_intensity", "values": [40, 100, 400]})),
    Scenario("table-cache-states",
             "cache contents of three users with alternating activity, cycles 1/25/75",
             dict(_FIG_A, kind="cache_states", n_users=3, n_files=21, cache_size=3,
                  min_intensity=1.0, popularity_modes=["scripted"], intensity_sources=["true"],
                  policies=["proposed", "naive"], cycles_per_period=100, replicates=1,
                  mc_samples=10000, positions=_CLUSTER,
                  sweep={"param": "cycle", "values": [1, 25, 75]})),
    Scenario("fig-delay-vs-mu",
             "average delay vs cache size, true and estimated intensities",
             dict(_ESTIMATED, sweep={"param": "cache_size",
                                     "values": [5, 10, 20, 30, 50, 75, 100]})),
    Scenario("fig-delay-vs-N",
             "average delay vs number of users, true and estimated intensities",
             dict(_ESTIMATED, cache_size=25,
                  sweep={"param": "n_users", "values": [1, 2, 5, 10, 15, 20, 25]})),
    Scenario("table-broadcast",
             "realized delay with and without broadcasting",
             dict(_FIG_A, n_users=25, n_files=100, cache_size=30, zipf_beta=0.25,
                  policies=["proposed", "naive"], transmission=["unicast", "broadcast"],
                  slots=1000, replicates=3)),
    Scenario("fig-delay-vs-beta",
             "average delay vs Zipf exponent, independent and identical popularity",
             dict(_ZIPF, sweep={"param": "zipf_beta",
                                "values": [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0]})),
    Scenario("fig-delay-vs-mu-zipf",
             "average delay vs cache size under Zipf popularity",
             dict(_ZIPF, sweep={"param": "cache_size", "values": [5, 10, 20, 30, 40, 50]})),
    Scenario("fig-delay-vs-N-zipf",
             "average delay vs number of users under Zipf popularity",
             dict(_ZIPF, sweep={"param": "n_users", "values": [2, 5, 10, 15, 20, 25, 30]})),
)}


def registered_scenarios():
    """Registered scenarios in a stable order."""
    return list(SCENARIOS.values())


def default_config(name):
    if name not in SCENARIOS:
        raise cfgmod.ConfigError(f"unknown scenario {name!r}; see 'list'")
    return SCENARIOS[name].config()


@dataclass(frozen=True)
class Row:
    scenario: str
    sweep_param: str
    sweep_value: object
    policy: str
    metric: str
    value: object
    seed: int
    replicate: int

    def sort_key(self):
        return (float(self.sweep_value), self.policy, self.replicate, self.metric)


@dataclass
class ResultTable:
    """Append-only collection of result rows."""

    rows: list = field(default_factory=list)

    def add(self, *args):
        self.rows.append(Row(*args))

    def extend(self, rows):
        self.rows.extend(rows)

    def sorted_rows(self):
        return sorted(self.rows, key=Row.sort_key)

    def select(self, policy=None, metric=None, replicate=None):
        return [r for r in self.rows
                if (policy is None or r.policy == policy)
                and (metric is None or r.metric == metric)
                and (replicate is None or r.replicate == replicate)]

    def series(self, policy, metric):
        """``{sweep_value: value}`` for one policy and metric (aggregate rows)."""
        return {r.sweep_value: r.value for r in self.select(policy, metric, AGGREGATE_REPLICATE)}

    @property
    def policies(self):
        return sorted({r.policy for r in self.rows})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_number(s):
    try:
        return int(s)
    except ValueError:
        return float(s)


def emit_csv(table, path):
    """Write the table as UTF-8 CSV with LF line endings, rows sorted."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in table.sorted_rows():
                w.writerow([r.scenario, r.sweep_param, _fmt(r.sweep_value), r.policy, r.metric,
                            _fmt(r.value), _fmt(r.seed), _fmt(r.replicate)])
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_csv(path):
    """Parse a file written by :func:`emit_csv` back into a ResultTable."""
    table = ResultTable()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for rec in reader:
            value = rec[5] if rec[5].startswith("{") else _parse_number(rec[5])
            table.add(rec[0], rec[1], _parse_number(rec[2]), rec[3], rec[4], value,
                      int(rec[6]), int(rec[7]))
    return table


def _points(cfg):
    for sv in cfg.sweep.values:
        for rv in cfg.series.values:
            yield sv, rv, cfgmod.from_point(cfg, {cfg.sweep.param: sv, cfg.series.param: rv})


def _label(*parts):
    return "/".join(str(p) for p in parts)


def _series_tag(cfg, rv):
    if cfg.series.param == "none":
        return None
    return f"{cfg.series.param}={rv:g}"


# -- estimation scenarios ----------------------------------------------------

def _estimation_replicate(cfg, r):
    rep_seed = seeding.derive_seed(cfg.seed, seeding.REPLICATE, r)
    rows = []
    for sv, rv, p in _points(cfg):
        n_pairs = min(p.estimation_pairs, p.n_users * p.n_files)
        flat = seeding.substream(rep_seed, seeding.PAIR_PICK).choice(
            p.n_users * p.n_files, size=n_pairs, replace=False)
        pairs = [divmod(int(f), p.n_files) for f in np.sort(flat)]
        for mode in p.popularity_modes:
            profiles = build_user_profiles(p.n_users, p.n_files, mode=mode, beta=p.zipf_beta,
                                           min_intensity=p.min_intensity,
                                           period_length=p.period_length, seed=rep_seed,
                                           users=sorted({i for i, _ in pairs}))
            truths = [profiles[i][j] for i, j in pairs]
            sets = [sample_requests(t, p.periods_observed,
                                    seeding.substream(rep_seed, seeding.SAMPLES, i, j))
                    for t, (i, j) in zip(truths, pairs)]
            errors = [estimation_error(e, t) for e, t in zip(fit_intensities(sets), truths)]
            tag = _series_tag(cfg, rv)
            label = _label("kde", mode, tag) if tag else _label("kde", mode)
            rows.append(Row(cfg.scenario, cfg.sweep.param, sv, label, "est_error",
                            float(np.mean(errors)), cfg.seed, r))
    return rows


# -- caching scenarios -------------------------------------------------------

class _Replicate:
    """Memoized per-replicate state shared by all sweep points."""

    def __init__(self, cfg, r):
        self.cfg = cfg
        self.r = r
        self.seed = seeding.derive_seed(cfg.seed, seeding.REPLICATE, r)
        self.offset = replicate_offset(cfg.seed, r)
        self.max_users = max(p.n_users for _, _, p in _points(cfg))
        self._memo = {}

    def memo(self, key, build):
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    def params(self, p):
        return SystemParams.from_db(p.file_size, p.bs_power_db, p.user_power_db, p.n_users)

    def topology(self, p):
        def build():
            if p.positions is not None:
                return Topology(p.cell_radius, p.positions)
            return Topology.random(p.n_users, p.cell_radius, self.seed, offset=self.offset)
        return self.memo(("topology", p.n_users, p.cell_radius), build)

    def delays(self, p):
        key = ("delays", p.n_users, p.cell_radius, p.bs_power_db, p.user_power_db, p.file_size,
               p.mc_samples)
        return self.memo(key, lambda: build_delay_matrix(self.topology(p), self.params(p),
                                                         p.mc_samples, self.seed))

    def unit_rows(self, p):
        # unit-mass time shape of every pair, one memo entry per user row
        return [self.memo(("unit", i, p.n_files, p.period_length),
                          lambda i=i: [unit_profile(i, j, p.period_length, self.seed)
                                       for j in range(p.n_files)])
                for i in range(p.n_users)]

    def means(self, p, mode):
        return pair_means(p.n_users, p.n_files, mode, p.zipf_beta, p.min_intensity, self.seed)

    def profiles(self, p, mode):
        key = ("profiles", mode, p.n_users, p.n_files, p.zipf_beta, p.min_intensity,
               p.period_length)
        if mode == "scripted":
            return self.memo(key, lambda: build_user_profiles(
                p.n_users, p.n_files, mode=mode, min_intensity=p.min_intensity,
                period_length=p.period_length, seed=self.seed))
        means = self.means(p, mode)
        return self.memo(key, lambda: [[g.scaled(m) for g, m in zip(row, mrow)]
                                       for row, mrow in zip(self.unit_rows(p), means)])

    def estimates(self, p, mode):
        # a user's history does not depend on n_users: fit once for the largest N
        big = p.at(n_users=max(p.n_users, self.max_users))

        def build():
            prof = self.profiles(big, mode)
            sets = [sample_requests(prof[i][j], big.periods_observed,
                                    seeding.substream(self.seed, seeding.SAMPLES, i, j))
                    for i in range(big.n_users) for j in range(big.n_files)]
            fits = fit_intensities(sets)
            return [fits[i * big.n_files:(i + 1) * big.n_files] for i in range(big.n_users)]
        key = ("estimates", mode, big.n_users, p.n_files, p.zipf_beta, p.min_intensity,
               p.period_length, p.periods_observed)
        return self.memo(key, build)[:p.n_users]

    def window(self, p, cycle):
        span = p.period_length / p.cycles_per_period
        return ((cycle - 1) % p.cycles_per_period) * span, span

    def unit_counts(self, p, cycle):
        start, span = self.window(p, cycle)
        return np.array([self.memo(("unit-counts", i, p.n_files, p.period_length,
                                    p.cycles_per_period, start),
                                   lambda row=row: [g.integral(start, start + span) for g in row])
                         for i, row in enumerate(self.unit_rows(p))])

    def expected_counts(self, p, mode, source, cycle):
        """Expected requests per pair in the operation cycle (1-based), shape (N, M)."""
        start, span = self.window(p, cycle)
        if source == "true" and mode != "scripted":
            return self.means(p, mode) * self.unit_counts(p, cycle)

        def build():
            if source == "true":
                return np.array([[g.integral(start, start + span) for g in row]
                                 for row in self.profiles(p, mode)])
            rows = self.estimates(p, mode)
            flat = expected_requests_many([g for row in rows for g in row], start, span)
            return flat.reshape(p.n_users, p.n_files)
        key = ("counts", mode, source, p.n_users, p.n_files, p.zipf_beta, p.min_intensity,
               p.period_length, p.periods_observed, p.cycles_per_period, start)
        return self.memo(key, build)


def replicate_offset(seed, r):
    """Radial stratum offset of replicate ``r``.

    Offsets are ``OFFSET_STRATA`` equally spaced points with one random
    shift, so every block of that many replicates places its users on an
    evenly stratified set of squared radii.  This removes most of the
    position noise from replicate means; each offset depends only on the
    master seed and ``r``.
    """
    shift = seeding.substream(seed, seeding.POSITION).uniform()
    return (shift + (r % OFFSET_STRATA) / OFFSET_STRATA) % 1.0


def _place(policy, omega, t_avg, p, state, cycle, seed):
    # returns the cache matrix for one cycle; state carries the previous placement
    if policy == "proposed":
        budgets = None if cycle == 1 or p.budget is None else np.full(p.n_users, p.budget)
        res = caching.run_caching(omega, t_avg, p.cache_size, state.get("phi"), budgets)
        return res.phi
    if policy == "naive":
        return caching.naive_cache(omega, p.cache_size).phi
    if policy == "probabilistic":
        pop = np.where(omega.sum(axis=1, keepdims=True) > 0, omega, 1.0)
        return caching.probabilistic_cache(pop, p.n_users, p.cache_size,
                                           seeding.derive_seed(seed, seeding.PROBABILISTIC,
                                                               cycle)).phi
    if policy == "optimal":
        return caching.exhaustive_optimal(omega, t_avg, p.cache_size)[0].phi
    raise ValueError(f"unknown policy {policy!r}")


def _optimal_feasible(p):
    return math.comb(p.n_files, p.cache_size) ** p.n_users <= caching.EXHAUSTIVE_LIMIT


def _caching_replicate(cfg, r):
    rep = _Replicate(cfg, r)
    rows = []
    by_cycle = cfg.sweep.param == "cycle"
    for sv, rv, p in _points(cfg):
        last = int(sv) if by_cycle else p.cycle_count
        t_avg = rep.delays(p)
        tag = _series_tag(cfg, rv)
        for mode in p.popularity_modes:
            truth = [caching.request_weights(rep.expected_counts(p, mode, "true", c))
                     for c in range(1, last + 1)]
            for source in p.intensity_sources:
                for policy in p.policies:
                    if policy == "optimal" and not _optimal_feasible(p):
                        log.info("skipping exhaustive search at %s=%s: instance too large",
                                 cfg.sweep.param, sv)
                        continue
                    label = _label(policy, mode, source, *([tag] if tag else []))
                    state, etas = {}, []
                    for c in range(1, last + 1):
                        omega = caching.request_weights(rep.expected_counts(p, mode, source, c))
                        phi = _place(policy, omega, t_avg, p, state, c, rep.seed)
                        state["phi"] = phi
                        src, d_min = compute_best_sources(t_avg, phi)
                        etas.append(caching.average_delay(truth[c - 1], d_min))

                    def emit(metric, value):
                        rows.append(Row(cfg.scenario, cfg.sweep.param, sv, label, metric, value,
                                        cfg.seed, r))

                    if by_cycle:
                        emit("eta", etas[-1])
                        for i in range(p.n_users):
                            files = ";".join(str(j + 1) for j in np.flatnonzero(phi[i]))
                            emit(f"cache_u{i + 1}", "{" + files + "}")
                    else:
                        emit("eta", float(np.mean(etas)))
                    if p.transmission:
                        requests = RequestBatch.sample(
                            truth[-1], p.slots, p.requests_per_user,
                            seeding.derive_seed(rep.seed, seeding.REQUESTS))
                        for tmode in p.transmission:
                            emit(f"eta_hat_{tmode}",
                                 simulate_phase(requests, phi, src, rep.topology(p),
                                                rep.params(p), tmode,
                                                seeding.derive_seed(rep.seed, seeding.UNICAST)))
    return rows


def _replicate(cfg, r):
    if cfg.kind == "estimation":
        return _estimation_replicate(cfg, r)
    return _caching_replicate(cfg, r)


def _aggregate(cfg, rows):
    groups = {}
    for row in rows:
        if isinstance(row.value, str):
            continue
        groups.setdefault((row.sweep_param, row.sweep_value, row.policy, row.metric), []).append(
            row.value)
    out = []
    for (param, sv, policy, metric), values in groups.items():
        v = np.array(values, dtype=float)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append(Row(cfg.scenario, param, sv, policy, f"{metric}_mean", float(v.mean()),
                       cfg.seed, AGGREGATE_REPLICATE))
        out.append(Row(cfg.scenario, param, sv, policy, f"{metric}_std", std, cfg.seed,
                       AGGREGATE_REPLICATE))
    return out


def run_scenario(cfg, jobs=1):
    """Run every sweep point and replicate of a scenario.

    Replicates are distributed over ``jobs`` worker processes; the returned
    table does not depend on ``jobs``.  Per-replicate rows are followed by
    ``<metric>_mean`` and ``<metric>_std`` rows with replicate ``-1``.
    """
    cfgmod.validate(cfg)
    reps = range(cfg.replicates)
    if jobs > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_replicate, [cfg] * cfg.replicates, reps))
    else:
        chunks = [_replicate(cfg, r) for r in reps]
    rows = [row for chunk in chunks for row in chunk]
    table = ResultTable()
    table.extend(rows)
    table.extend(_aggregate(cfg, rows))
    return table
