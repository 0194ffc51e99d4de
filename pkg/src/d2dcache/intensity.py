"""Periodic request-intensity estimation.

Arrivals of one <user, file> pair are folded onto a single behavior period
``[0, L]`` and smoothed with an Epanechnikov kernel.  Near the period ends the
plain kernel leaks mass outside ``[0, L]``; the corrected kernel adds the two
copies of the kernel translated by one period so that every sample keeps unit
mass inside the period.  The bandwidth is chosen by minimizing a
leave-one-out estimate of the integrated squared error.

Bandwidth selection for many sample sets is done in lockstep by
:func:`select_bandwidths`, which evaluates the ISE criterion for all sets at
once with an event sweep (``O(N log N)`` per evaluation instead of the
``O(N^2)`` pairwise form).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

#: number of log-spaced bandwidths scanned before golden-section refinement
GRID_POINTS = 50
#: relative tolerance of the golden-section refinement
BANDWIDTH_RTOL = 1e-4
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_GL_NODE = math.sqrt(0.6)
_DIRECT_LIMIT = 4_000_000


class InsufficientDataError(ValueError):
    """Raised when cross-validation needs more samples than available."""


def epanechnikov(x):
    """Epanechnikov kernel ``0.75 (1 - x^2)`` on ``|x| <= 1``, zero elsewhere."""
    x = np.asarray(x, dtype=float)
    out = np.where(np.abs(x) <= 1.0, 0.75 * (1.0 - x * x), 0.0)
    return out if out.ndim else float(out)


def kernel_cdf(x):
    """Integral of the Epanechnikov kernel from -1 to ``x``."""
    x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
    out = 0.5 + 0.75 * x - 0.25 * x ** 3
    return out if out.ndim else float(out)


def _check_bandwidth(W, L):
    if not W > 0:
        raise ValueError(f"bandwidth must be positive, got {W}")
    if not W < L:
        raise ValueError(f"bandwidth {W} must be smaller than the period length {L}")


def corrected_kernel(t, t_alpha, W, L):
    """End-corrected kernel: the kernel plus its copies shifted by +/- one period.

    Parameters
    ----------
    t, t_alpha : float or array_like
        Evaluation time and sample time (seconds).
    W : float
        Kernel bandwidth, ``0 < W < L``.
    L : float
        Period length.
    """
    _check_bandwidth(W, L)
    d = np.asarray(t, dtype=float) - np.asarray(t_alpha, dtype=float)
    out = epanechnikov(d / W) + epanechnikov((d + L) / W) + epanechnikov((d - L) / W)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Relative arrival times of one <user, file> pair within a behavior period.

    ``arrivals`` is stored sorted; the estimator does not depend on sample
    order.
    """

    arrivals: np.ndarray
    period_count: int
    period_length: float

    def __post_init__(self):
        arr = np.sort(np.asarray(self.arrivals, dtype=float).ravel())
        if self.period_length <= 0:
            raise ValueError("period_length must be positive")
        if int(self.period_count) != self.period_count or self.period_count < 1:
            raise ValueError("period_count must be a positive integer")
        if arr.size and (arr[0] < 0 or arr[-1] > self.period_length):
            raise ValueError("arrival times must lie in [0, period_length]")
        arr.setflags(write=False)
        object.__setattr__(self, "arrivals", arr)
        object.__setattr__(self, "period_count", int(self.period_count))
        object.__setattr__(self, "period_length", float(self.period_length))

    @classmethod
    def from_absolute(cls, times, period_length, period_count):
        """Fold absolute arrival times onto ``[0, period_length)``."""
        rel = np.mod(np.asarray(times, dtype=float), period_length)
        return cls(rel, period_count, period_length)

    def __len__(self):
        return int(self.arrivals.size)

    def without(self, index):
        """Sample set with the ``index``-th (sorted) arrival removed."""
        return SampleSet(np.delete(self.arrivals, index), self.period_count, self.period_length)


def _kernel_sums(sorted_t, x, W, L, corrected=True):
    """Sum of (corrected) kernel values ``sum_a K~((x - t_a) / W)`` at points ``x``."""
    x = np.asarray(x, dtype=float)
    offsets = (0.0, -L, L) if corrected else (0.0,)
    if sorted_t.size == 0:
        return np.zeros_like(x)
    if sorted_t.size * x.size * len(offsets) <= _DIRECT_LIMIT:
        d = x.reshape(-1, 1) - sorted_t.reshape(1, -1)
        total = sum(epanechnikov((d - c) / W).sum(axis=1) for c in offsets)
        return total.reshape(x.shape)
    # windowed prefix sums of centered powers: sum (x - c - t)^2 = n y^2 - 2 y S1 + S2
    half = 0.5 * L
    tau = sorted_t - half
    cs1 = np.concatenate(([0.0], np.cumsum(tau)))
    cs2 = np.concatenate(([0.0], np.cumsum(tau * tau)))
    total = np.zeros(x.shape)
    for c in offsets:
        lo = np.searchsorted(sorted_t, x - c - W, side="left")
        hi = np.searchsorted(sorted_t, x - c + W, side="right")
        n = hi - lo
        s1 = cs1[hi] - cs1[lo]
        s2 = cs2[hi] - cs2[lo]
        y = x - c - half
        sq = n * y * y - 2.0 * y * s1 + s2
        total += 0.75 * (n - sq / (W * W))
    return np.maximum(total, 0.0)


@dataclass(frozen=True, eq=False)
class IntensityEstimate:
    """Kernel estimate of a periodic intensity function (requests per second).

    Calling the object evaluates the estimate; it is zero outside ``[0, L]``.
    ``corrected=False`` gives the plain kernel estimator without end
    correction, kept for comparison.
    """

    samples: SampleSet
    bandwidth: float
    corrected: bool = True

    def __post_init__(self):
        _check_bandwidth(self.bandwidth, self.samples.period_length)

    @property
    def period_length(self):
        return self.samples.period_length

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        L = self.period_length
        inside = (t >= 0.0) & (t <= L)
        sums = _kernel_sums(self.samples.arrivals, np.where(inside, t, 0.0), self.bandwidth,
                            L, self.corrected)
        out = np.where(inside, sums / (self.samples.period_count * self.bandwidth), 0.0)
        return out if out.ndim else float(out)

    def cumulative(self, r):
        """Integral of the estimate over ``[0, r]`` for ``r`` in ``[0, L]``."""
        r = np.clip(np.asarray(r, dtype=float), 0.0, self.period_length)
        t = self.samples.arrivals
        if t.size == 0:
            out = np.zeros_like(r)
            return out if out.ndim else float(out)
        L, W = self.period_length, self.bandwidth
        offsets = (0.0, -L, L) if self.corrected else (0.0,)
        rr = r.reshape(-1, 1)
        acc = np.zeros(rr.shape[0])
        for c in offsets:
            u = (t + c).reshape(1, -1)
            acc += (kernel_cdf((rr - u) / W) - kernel_cdf(-u / W)).sum(axis=1)
        out = (acc / self.samples.period_count).reshape(r.shape)
        return out if out.ndim else float(out)

    @property
    def mass(self):
        """Expected number of requests per behavior period."""
        return float(self.cumulative(self.period_length))


def estimate_intensity(samples, W, corrected=True):
    """Build the (end-corrected) kernel intensity estimate with bandwidth ``W``.

    An empty sample set yields the zero function.
    """
    return IntensityEstimate(samples, float(W), corrected)


def expected_requests(estimate, t_start, duration):
    """Expected request count in ``[t_start, t_start + duration]``.

    The estimate is extended periodically, so windows may straddle period
    boundaries or span several periods.
    """
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    if duration == 0:
        return 0.0
    L = estimate.period_length
    mass = estimate.mass

    def cum(x):
        k = math.floor(x / L)
        return k * mass + float(estimate.cumulative(x - k * L))

    return cum(t_start + duration) - cum(t_start)


def expected_requests_many(estimates, t_start, duration):
    """:func:`expected_requests` for many estimates sharing one period length."""
    estimates = list(estimates)
    if not estimates:
        return np.zeros(0)
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    L = estimates[0].period_length
    if any(e.period_length != L for e in estimates):
        raise ValueError("all estimates must share one period length")
    if duration == 0:
        return np.zeros(len(estimates))
    sizes = np.array([e.samples.arrivals.size for e in estimates])
    t = np.concatenate([e.samples.arrivals for e in estimates])
    group = np.repeat(np.arange(len(estimates)), sizes)
    W = np.repeat([e.bandwidth for e in estimates], sizes)
    scale = np.repeat([1.0 / e.samples.period_count for e in estimates], sizes)
    corrected = np.repeat([e.corrected for e in estimates], sizes)

    def within(r):
        # integral over [0, r], r in [0, L], for every estimate
        acc = kernel_cdf((r - t) / W) - kernel_cdf(-t / W)
        for c in (-L, L):
            acc += np.where(corrected, kernel_cdf((r - t - c) / W) - kernel_cdf((-t - c) / W), 0.0)
        return np.bincount(group, weights=acc * scale, minlength=len(estimates))

    mass = within(L)

    def cum(x):
        k = math.floor(x / L)
        return k * mass + within(x - k * L)

    return cum(t_start + duration) - cum(t_start)


class _PackedSamples:
    """Many sample sets normalized to the unit period, for lockstep ISE evaluation."""

    def __init__(self, sample_sets):
        self.sets = list(sample_sets)
        self.count = len(self.sets)
        self.L = np.array([s.period_length for s in self.sets], dtype=float)
        self.n = np.array([len(s) for s in self.sets], dtype=np.int64)
        self.y = np.concatenate([s.arrivals / s.period_length for s in self.sets]) \
            if self.count else np.zeros(0)
        self.owner = np.repeat(np.arange(self.count), self.n)

    def ise(self, w):
        """ISE criterion for normalized bandwidths ``w`` (one per set).

        With ``S(z) = sum_a K~((z - y_a) / w)`` on the unit period,
        ``I = int_0^1 S^2`` and ``Q = sum_a (S(y_a) - K(0))`` the criterion is
        ``(I / (9 n^2 w^2) - 2 Q / (3 n (3 n - 1) w)) / L``; the period count
        cancels.
        """
        w = np.asarray(w, dtype=float)
        K = self.count
        y, owner = self.y, self.owner
        wv = w[owner]

        # kernel terms as (center, owner); shifted copies only where they reach [0, 1]
        right = y < wv
        left = y > 1.0 - wv
        centers = np.concatenate((y, y[right] + 1.0, y[left] - 1.0))
        c_owner = np.concatenate((owner, owner[right], owner[left]))
        cw = w[c_owner]
        # w^2 * K((z - v) / w) = 0.75 (w^2 - v^2) + 1.5 v z - 0.75 z^2 on |z - v| <= w
        a = 0.75 * (cw * cw - centers * centers)
        b = 1.5 * centers
        nc = centers.size
        nq = y.size

        pos = np.concatenate((
            np.clip(centers - cw, 0.0, 1.0),
            np.clip(centers + cw, 0.0, 1.0),
            y,
            np.zeros(K), np.ones(K),
        ))
        own = np.concatenate((c_owner, c_owner, owner, np.arange(K), np.arange(K)))
        da = np.concatenate((a, -a, np.zeros(nq + 2 * K)))
        db = np.concatenate((b, -b, np.zeros(nq + 2 * K)))
        dc = np.concatenate((np.full(nc, -0.75), np.full(nc, 0.75), np.zeros(nq + 2 * K)))
        is_query = np.zeros(pos.size, dtype=bool)
        is_query[2 * nc:2 * nc + nq] = True

        order = np.argsort(own * 2.0 + pos, kind="stable")
        pos, own, is_query = pos[order], own[order], is_query[order]
        ld = np.longdouble
        A = np.cumsum(da[order], dtype=ld)
        B = np.cumsum(db[order], dtype=ld)
        C = np.cumsum(dc[order], dtype=ld)

        # integral of P(z)^2 on each segment by 3-point Gauss-Legendre (exact for quartics);
        # P is re-expanded around the segment start in extended precision, which
        # removes the cancellation, and the quadrature itself runs in float64
        same = own[:-1] == own[1:]
        p0 = pos[:-1][same]
        width = pos[1:][same] - p0
        As, Bs, Cs = A[:-1][same], B[:-1][same], C[:-1][same]
        z0 = p0.astype(ld)
        c0 = (As + z0 * (Bs + z0 * Cs)).astype(float)
        c1 = (Bs + 2.0 * z0 * Cs).astype(float)
        c2 = Cs.astype(float)
        half = 0.5 * width

        def poly(u):
            return c0 + u * (c1 + u * c2)

        seg = half * (5.0 / 9.0 * (poly(half * (1.0 - _GL_NODE)) ** 2
                                   + poly(half * (1.0 + _GL_NODE)) ** 2)
                      + 8.0 / 9.0 * poly(half) ** 2)
        I = np.bincount(own[:-1][same], weights=seg, minlength=K) / w ** 4

        zq = pos[is_query].astype(ld)
        Sq = (A[is_query] + zq * (B[is_query] + zq * C[is_query])).astype(float)
        Q = np.bincount(own[is_query], weights=Sq, minlength=K) / w ** 2 - 0.75 * self.n

        n = self.n.astype(float)
        return (I / (9.0 * n * n * w * w) - 2.0 * Q / (3.0 * n * (3.0 * n - 1.0) * w)) / self.L


def ise_score(samples, W):
    """Leave-one-out ISE estimate for bandwidth ``W``.

    Raises :class:`InsufficientDataError` for fewer than two samples.
    """
    _check_bandwidth(W, samples.period_length)
    if len(samples) < 2:
        raise InsufficientDataError("ISE cross-validation needs at least two samples")
    packed = _PackedSamples([samples])
    return float(packed.ise(np.array([W / samples.period_length]))[0])


def default_bandwidth(samples):
    return samples.period_length / 10.0


def select_bandwidths(sample_sets):
    """Cross-validated bandwidth for each sample set.

    A 50-point log grid over ``[L / (2 N_p), L / 2]`` is scanned, then the best
    grid cell is refined by golden-section search on ``log W``.  Sets with
    fewer than two samples get the default ``L / 10``.
    """
    sets = list(sample_sets)
    out = np.array([default_bandwidth(s) for s in sets], dtype=float)
    valid = [k for k, s in enumerate(sets) if len(s) >= 2]
    if len(valid) < len(sets):
        log.warning("%d sample set(s) with fewer than two samples; using bandwidth L/10",
                    len(sets) - len(valid))
    if not valid:
        return out
    packed = _PackedSamples([sets[k] for k in valid])
    n = packed.n.astype(float)
    lo = np.log(0.5 / n)
    hi = np.full_like(lo, math.log(0.5))
    frac = np.linspace(0.0, 1.0, GRID_POINTS)
    grid = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
    values = np.empty_like(grid)
    for g in range(GRID_POINTS):
        values[:, g] = packed.ise(np.exp(grid[:, g]))

    rows = np.arange(packed.count)
    kbest = np.argmin(values, axis=1)
    best_x = grid[rows, kbest]
    best_f = values[rows, kbest]
    a = grid[rows, np.maximum(kbest - 1, 0)]
    b = grid[rows, np.minimum(kbest + 1, GRID_POINTS - 1)]

    tol = math.log1p(BANDWIDTH_RTOL)
    # per-set iteration counts keep each result independent of the batch
    steps = np.ceil(np.log(np.maximum(b - a, tol) / tol) / -math.log(_INV_PHI)).astype(int)
    n_iter = int(steps.max())
    x1 = b - _INV_PHI * (b - a)
    x2 = a + _INV_PHI * (b - a)
    f1 = packed.ise(np.exp(x1))
    f2 = packed.ise(np.exp(x2))

    def keep(x, f):
        better = (f < best_f) | ((f == best_f) & (x < best_x))
        best_x[better] = x[better]
        best_f[better] = f[better]

    keep(x1, f1)
    keep(x2, f2)
    for it in range(n_iter):
        live = it < steps
        go_left = f1 <= f2
        b = np.where(go_left, x2, b)
        a = np.where(go_left, a, x1)
        nx1 = np.where(go_left, b - _INV_PHI * (b - a), x2)
        nx2 = np.where(go_left, x1, a + _INV_PHI * (b - a))
        nf1 = np.where(go_left, 0.0, f2)
        nf2 = np.where(go_left, f1, 0.0)
        probe = np.where(go_left, nx1, nx2)
        fp = packed.ise(np.exp(probe))
        keep(np.where(live, probe, best_x), np.where(live, fp, best_f))
        x1, x2 = nx1, nx2
        f1 = np.where(go_left, fp, nf1)
        f2 = np.where(go_left, nf2, fp)

    out[valid] = np.exp(best_x) * packed.L
    return out


def select_bandwidth(samples):
    """Cross-validated bandwidth for a single sample set (see :func:`select_bandwidths`)."""
    return float(select_bandwidths([samples])[0])


def fit_intensities(sample_sets):
    """Estimate every sample set with its own cross-validated bandwidth."""
    sets = list(sample_sets)
    widths = select_bandwidths(sets)
    return [IntensityEstimate(s, float(W)) for s, W in zip(sets, widths)]
