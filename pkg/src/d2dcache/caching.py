"""Delay-aware cache placement.

The greedy placement starts every operation cycle from logically empty
caches, where every request is served by the base station, and adds one
<user, file> pair at a time: the pair whose caching lowers the weighted
average delay ``eta = sum_ij omega_ij D_ij`` the most.  Caching file ``j`` at
user ``i`` zeroes ``D_ij`` and lets every other user ``k`` switch to the D2D
link ``i -> k`` when that link beats its current best source.

Replacement budgets: a pair that was cached in the previous cycle can be
re-selected for free; any other pair consumes one unit of the user's budget
``xi_i``.  With full caches in both cycles this is exactly the Hamming bound
``sum_j |phi_ij - phi_prev_ij| <= 2 xi_i``.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from d2dcache import seeding
from d2dcache.channel import BS, compute_best_sources

EXHAUSTIVE_LIMIT = 1_000_000

# callables invoked with every CachingResult that run_caching produces
_observers = []


def add_observer(fn):
    """Register ``fn(result)`` to be called after every :func:`run_caching`."""
    _observers.append(fn)


def remove_observer(fn):
    _observers.remove(fn)


class CacheFullError(RuntimeError):
    """No user has free cache space left."""


class InfeasibleBudgetError(RuntimeError):
    """Free cache space remains but every candidate is blocked by the budgets."""


@dataclass
class CacheMatrix:
    """Binary N x M placement with per-user capacity and replacement budgets."""

    phi: np.ndarray
    capacity: int
    budgets: np.ndarray = None

    def __post_init__(self):
        self.phi = np.asarray(self.phi).astype(np.int8)
        if self.phi.ndim != 2:
            raise ValueError("phi must be a 2-D matrix")
        if self.budgets is None:
            self.budgets = np.full(self.phi.shape[0], self.capacity, dtype=np.int64)
        self.budgets = np.asarray(self.budgets, dtype=np.int64).reshape(self.phi.shape[0])

    @classmethod
    def empty(cls, n_users, n_files, capacity, budgets=None):
        return cls(np.zeros((n_users, n_files), dtype=np.int8), capacity, budgets)

    @property
    def shape(self):
        return self.phi.shape

    def row_counts(self):
        return self.phi.sum(axis=1)

    def is_complete(self):
        return bool(np.all(self.row_counts() == self.capacity))

    def replacements(self, previous):
        """Per-user Hamming distance to a previous placement."""
        prev = previous.phi if isinstance(previous, CacheMatrix) else np.asarray(previous)
        return np.abs(self.phi.astype(int) - prev.astype(int)).sum(axis=1)

    def files_of(self, user):
        return [int(j) for j in np.flatnonzero(self.phi[user])]


def average_delay(omega, d_min):
    """Weighted average delay ``sum_ij omega_ij D_ij`` (frames)."""
    omega = np.asarray(omega, dtype=float)
    d_min = np.asarray(d_min, dtype=float)
    if omega.shape != d_min.shape:
        raise ValueError("omega and D must have the same shape")
    return float(np.sum(omega * d_min))


def request_weights(expected_counts):
    """Normalize expected request counts into the weight matrix ``omega``."""
    counts = np.asarray(expected_counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return np.zeros_like(counts)
    return counts / total


class Improvement(NamedTuple):
    gain: float
    source: np.ndarray
    d_min: np.ndarray
    budgets: np.ndarray


def delay_improvement(i, j, phi, phi_prev, omega, source, t_avg, d_min, budgets, capacity=None):
    """Delay reduction from caching file ``j`` at user ``i`` (no side effects).

    Returns the gain together with the source table, delay matrix and budget
    vector that would result from the placement.  The gain is zero when the
    pair is already cached, when user ``i`` has no free space (if
    ``capacity`` is given), or when the pair is new relative to the previous
    cycle and user ``i`` has no replacement budget left.
    """
    s_hat, d_hat, xi_hat = source.copy(), d_min.copy(), np.array(budgets, copy=True)
    if phi[i, j] == 1:
        return Improvement(0.0, s_hat, d_hat, xi_hat)
    if capacity is not None and phi[i].sum() >= capacity:
        return Improvement(0.0, s_hat, d_hat, xi_hat)
    new = phi_prev[i, j] == 0
    if new and budgets[i] <= 0:
        return Improvement(0.0, s_hat, d_hat, xi_hat)
    gain = omega[i, j] * d_min[i, j]
    s_hat[i, j] = i
    d_hat[i, j] = 0.0
    if new:
        xi_hat[i] -= 1
    for k in range(phi.shape[0]):
        if k != i and d_min[k, j] > t_avg[i, k]:
            gain += omega[k, j] * (d_min[k, j] - t_avg[i, k])
            d_hat[k, j] = t_avg[i, k]
            s_hat[k, j] = i
    return Improvement(float(gain), s_hat, d_hat, xi_hat)


@dataclass
class GreedyState:
    """Working state of one greedy caching cycle."""

    omega: np.ndarray
    t_avg: np.ndarray
    phi: np.ndarray
    phi_prev: np.ndarray
    source: np.ndarray
    d_min: np.ndarray
    budgets: np.ndarray
    capacity: int
    evaluations: int = 0
    _raw: np.ndarray = field(default=None, repr=False)

    @classmethod
    def initial(cls, omega, t_avg, capacity, phi_prev=None, budgets=None):
        omega = np.asarray(omega, dtype=float)
        t_avg = np.asarray(t_avg, dtype=float)
        N, M = omega.shape
        if phi_prev is None:
            phi_prev = np.zeros((N, M), dtype=np.int8)
        if budgets is None:
            budgets = np.full(N, capacity, dtype=np.int64)
        return cls(
            omega=omega,
            t_avg=t_avg,
            phi=np.zeros((N, M), dtype=np.int8),
            phi_prev=np.asarray(phi_prev, dtype=np.int8),
            source=np.full((N, M), BS, dtype=np.int64),
            d_min=np.repeat(np.diag(t_avg)[:, None], M, axis=1),
            budgets=np.array(budgets, dtype=np.int64).reshape(N),
            capacity=int(capacity),
        )

    @property
    def eta(self):
        return average_delay(self.omega, self.d_min)

    def eligible(self):
        free = self.phi.sum(axis=1) < self.capacity
        allowed = (self.phi_prev == 1) | (self.budgets > 0)[:, None]
        return (self.phi == 0) & free[:, None] & allowed

    def raw_gains(self, columns=None):
        """Placement gains ignoring eligibility, for all users and the given files."""
        cols = slice(None) if columns is None else columns
        om = self.omega[:, cols]
        dm = self.d_min[:, cols]
        # relief[i, k, j] = max(D_kj - T_ik, 0); the k == i term is <= 0 since D_ij <= T_ii
        relief = np.maximum(dm[None, :, :] - self.t_avg[:, :, None], 0.0)
        return om * dm + np.einsum("kj,ikj->ij", om, relief)

    def commit(self, i, j):
        """Cache file ``j`` at user ``i`` and update sources, delays and budgets."""
        if self.phi_prev[i, j] == 0:
            self.budgets[i] -= 1
        self.phi[i, j] = 1
        self.source[i, j] = i
        self.d_min[i, j] = 0.0
        better = self.d_min[:, j] > self.t_avg[i, :]
        better[i] = False
        self.d_min[better, j] = self.t_avg[i, better]
        self.source[better, j] = i
        if self._raw is not None:
            self._raw[:, j] = self.raw_gains([j])[:, 0]


def _fallback(state, eligible):
    if not eligible.any():
        if (state.phi.sum(axis=1) < state.capacity).any():
            raise InfeasibleBudgetError("free cache space left but budgets forbid every placement")
        raise CacheFullError("no user has free cache space")
    masked = np.where(eligible, state.omega, -np.inf)
    return np.unravel_index(int(np.argmax(masked)), masked.shape)


def best_pair(state, vectorized=True):
    """Select and commit the pair with the largest delay improvement.

    Every not-yet-cached pair counts as one improvement evaluation.  Ties go
    to the lowest (user, file).  When no pair has a positive gain the eligible
    pair with the largest weight is cached, so the caches always fill up.

    Returns ``(i, j, gain)`` of the committed placement.
    """
    if not (state.phi.sum(axis=1) < state.capacity).any():
        raise CacheFullError("no user has free cache space")
    eligible = state.eligible()
    state.evaluations += int(np.count_nonzero(state.phi == 0))
    if vectorized:
        if state._raw is None:
            state._raw = state.raw_gains()
        gains = np.where(eligible, state._raw, 0.0)
        flat = int(np.argmax(gains))
        g_star = float(gains.flat[flat])
        i, j = np.unravel_index(flat, gains.shape)
    else:
        g_star, i, j = 0.0, None, None
        N, M = state.phi.shape
        for a in range(N):
            for b in range(M):
                if state.phi[a, b]:
                    continue
                imp = delay_improvement(a, b, state.phi, state.phi_prev, state.omega,
                                        state.source, state.t_avg, state.d_min, state.budgets,
                                        state.capacity)
                if imp.gain > g_star:
                    g_star, i, j = imp.gain, a, b
    if not g_star > 0:
        i, j = _fallback(state, eligible)
        g_star = 0.0
    state.commit(int(i), int(j))
    return int(i), int(j), g_star


@dataclass
class CachingResult:
    """Outcome of one caching cycle plus its per-iteration trace."""

    cache: CacheMatrix
    source: np.ndarray
    d_min: np.ndarray
    evaluations: int
    placements: list
    gains: np.ndarray
    etas: np.ndarray

    @property
    def phi(self):
        return self.cache.phi

    @property
    def eta(self):
        return float(self.etas[-1])


def run_caching(omega, t_avg, capacity, phi_prev=None, budgets=None, vectorized=True):
    """Greedy cache placement for one operation cycle.

    Parameters
    ----------
    omega : (N, M) array
        Request weights of the cycle.
    t_avg : (N, N) array
        Average link delays; the diagonal holds the BS-to-user delays.
    capacity : int
        Files per user cache (``mu``).
    phi_prev : (N, M) array, optional
        Placement of the previous cycle; defaults to empty caches.
    budgets : (N,) array, optional
        Replacement budgets ``xi``; defaults to ``capacity`` (unconstrained).
    vectorized : bool
        Evaluate all candidate gains with array operations (default) or with
        one :func:`delay_improvement` call per candidate.
    """
    omega = np.asarray(omega, dtype=float)
    N, M = omega.shape
    if capacity > M:
        raise ValueError(f"cache size {capacity} exceeds the library size {M}")
    if capacity < 0:
        raise ValueError("cache size must be non-negative")
    state = GreedyState.initial(omega, t_avg, capacity, phi_prev, budgets)
    etas = [state.eta]
    gains, placements = [], []
    for _ in range(N * capacity):
        i, j, g = best_pair(state, vectorized)
        placements.append((i, j))
        gains.append(g)
        etas.append(state.eta)
    cache = CacheMatrix(state.phi, capacity, state.budgets)
    result = CachingResult(cache, state.source, state.d_min, state.evaluations, placements,
                           np.array(gains), np.array(etas))
    for fn in list(_observers):
        fn(result)
    return result


def search_space_size(N, M, mu):
    """Number of improvement evaluations of one greedy cycle."""
    # iteration t scans the N*M - t uncached pairs
    return (2 * N * N * M * mu - N * N * mu * mu + N * mu) // 2


def naive_cache(weights, capacity):
    """Each user caches its own ``capacity`` most requested files (ties: lowest index)."""
    w = np.asarray(weights, dtype=float)
    N, M = w.shape
    if capacity > M:
        raise ValueError(f"cache size {capacity} exceeds the library size {M}")
    order = np.argsort(-w, axis=1, kind="stable")[:, :capacity]
    phi = np.zeros((N, M), dtype=np.int8)
    np.put_along_axis(phi, order, 1, axis=1)
    return CacheMatrix(phi, capacity)


def probabilistic_cache(popularity, n_users, capacity, rng_seed):
    """Each user caches ``capacity`` distinct files drawn proportionally to popularity.

    ``popularity`` is one vector shared by all users or an (N, M) matrix of
    per-user popularities.  Files are drawn one at a time without
    replacement; each user has its own substream of ``rng_seed``.
    """
    pop = np.asarray(popularity, dtype=float)
    if pop.ndim == 1:
        pop = np.tile(pop, (n_users, 1))
    N, M = pop.shape
    if N != n_users:
        raise ValueError("popularity rows must match the number of users")
    if capacity > M:
        raise ValueError(f"cache size {capacity} exceeds the library size {M}")
    phi = np.zeros((N, M), dtype=np.int8)
    for i in range(N):
        p = np.clip(pop[i], 0.0, None)
        positive = np.flatnonzero(p > 0)
        rng = seeding.substream(rng_seed, seeding.PROBABILISTIC, i)
        take = min(capacity, positive.size)
        chosen = rng.choice(M, size=take, replace=False, p=p / p.sum()) if take else []
        phi[i, chosen] = 1
        if take < capacity:
            rest = np.flatnonzero(phi[i] == 0)[:capacity - take]
            phi[i, rest] = 1
    return CacheMatrix(phi, capacity)


def exhaustive_optimal(omega, t_avg, capacity, limit=EXHAUSTIVE_LIMIT):
    """Globally optimal placement by enumeration (replacement budgets ignored).

    Refuses instances with more than ``limit`` feasible placements.
    Returns ``(CacheMatrix, eta)``.
    """
    omega = np.asarray(omega, dtype=float)
    N, M = omega.shape
    if capacity > M:
        raise ValueError(f"cache size {capacity} exceeds the library size {M}")
    size = math.comb(M, capacity) ** N
    if size > limit:
        raise ValueError(f"{size} placements exceed the enumeration limit {limit}")
    rows = []
    for combo in itertools.combinations(range(M), capacity):
        r = np.zeros(M, dtype=np.int8)
        r[list(combo)] = 1
        rows.append(r)
    best_eta, best_phi = math.inf, None
    for choice in itertools.product(range(len(rows)), repeat=N):
        phi = np.stack([rows[c] for c in choice])
        _, d = compute_best_sources(t_avg, phi)
        eta = average_delay(omega, d)
        if eta < best_eta:
            best_eta, best_phi = eta, phi
    return CacheMatrix(best_phi, capacity), best_eta
