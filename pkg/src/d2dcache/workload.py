"""Ground-truth request intensities, request traces and Zipf popularity.

The true intensity of a <user, file> pair is a constant base level plus a
few raised-cosine bumps, wrapped periodically on ``[0, L]``.  This family is
smooth, integrates in closed form and can be scaled so that its per-period
mean hits a configured value exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from d2dcache import seeding
from d2dcache.intensity import SampleSet

MODES = ("independent", "identical", "scripted")

#: preference lists (1-based file ids, most popular first) of the designed
#: three-user scenario
SCRIPTED_PREFERENCES = (
    (1, 2, 3, 4, 5, 6, 7, 8, 9),
    (8, 9, 10, 11, 12, 13, 14, 1, 2),
    (15, 16, 17, 18, 19, 20, 21, 1, 2),
)
#: operation cycle (1-based, out of 100 per behavior period) in which each
#: scripted user is most active
SCRIPTED_PEAK_CYCLES = (25, 75, 25)
SCRIPTED_CYCLES_PER_PERIOD = 100
#: mean of preference rank r relative to the minimum intensity
SCRIPTED_RANK_SCALE = 12.0
SCRIPTED_RANK_DECAY = 0.5
SCRIPTED_PEAK_MULTIPLIER = 5.0
SCRIPTED_PEAK_HALF_WIDTH = 0.2


def _rc_cdf_scalar(x, width):
    # integral of the raised cosine bump from -width to x
    if x <= -width:
        return 0.0
    if x >= width:
        return width
    return 0.5 * (x + width) + width / (2.0 * math.pi) * math.sin(math.pi * x / width)


@dataclass(frozen=True, eq=False)
class IntensityProfile:
    """Periodic intensity ``base + sum_k weight_k * rc((t - center_k) / width_k)``.

    ``rc`` is the raised cosine ``0.5 (1 + cos(pi u))`` on ``|u| <= 1``.
    Distances to bump centers are taken around the circle of length
    ``period_length``, so the profile is periodic by construction.
    """

    period_length: float
    base: float = 0.0
    centers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        L = float(self.period_length)
        if L <= 0:
            raise ValueError("period_length must be positive")
        arrays = [np.array(a, dtype=float).ravel() for a in (self.centers, self.widths, self.weights)]
        if len({a.size for a in arrays}) != 1:
            raise ValueError("centers, widths and weights must have equal length")
        c, w, a = arrays
        if self.base < 0 or np.any(a < 0):
            raise ValueError("base and bump weights must be non-negative")
        if np.any(w <= 0) or np.any(w > L / 2):
            raise ValueError("bump widths must lie in (0, L/2]")
        for arr in arrays:
            arr.setflags(write=False)
        object.__setattr__(self, "period_length", L)
        object.__setattr__(self, "base", float(self.base))
        object.__setattr__(self, "centers", np.mod(c, L))
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "weights", a)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        L = self.period_length
        out = np.full(t.shape, self.base)
        for c, w, a in zip(self.centers, self.widths, self.weights):
            d = np.mod(t - c + L / 2, L) - L / 2
            out += np.where(np.abs(d) <= w, a * 0.5 * (1.0 + np.cos(math.pi * d / w)), 0.0)
        return out if out.ndim else float(out)

    @property
    def mean_per_period(self):
        """Expected number of requests in one behavior period."""
        return self.base * self.period_length + float(np.dot(self.weights, self.widths))

    @property
    def upper_bound(self):
        return self.base + float(self.weights.sum())

    def _cum_within(self, r):
        # integral over [0, r] for r in [0, L]
        L = self.period_length
        total = self.base * r
        for c, w, a in zip(self.centers.tolist(), self.widths.tolist(), self.weights.tolist()):
            for shift in (-L, 0.0, L):
                total += a * (_rc_cdf_scalar(r - c - shift, w) - _rc_cdf_scalar(-c - shift, w))
        return total

    def integral(self, a, b):
        """Integral of the periodic profile over ``[a, b]``."""
        L = self.period_length
        mean = self.mean_per_period

        def cum(x):
            k = math.floor(x / L)
            return k * mean + self._cum_within(x - k * L)

        return cum(b) - cum(a)

    def scaled(self, factor):
        return IntensityProfile(self.period_length, self.base * factor, self.centers,
                                self.widths, self.weights * factor)


def zero_profile(period_length):
    return IntensityProfile(period_length)


def sample_requests(profile, periods, rng_seed):
    """Draw arrivals over ``periods`` behavior periods and fold them onto ``[0, L]``.

    The inhomogeneous Poisson process is simulated by thinning a homogeneous
    one whose rate is the profile's upper bound.
    """
    if periods < 1:
        raise ValueError("periods must be at least 1")
    L = profile.period_length
    rng = seeding.as_generator(rng_seed)
    bound = profile.upper_bound
    if bound <= 0:
        return SampleSet(np.zeros(0), periods, L)
    n = rng.poisson(bound * L * periods)
    t = rng.uniform(0.0, L * periods, size=n)
    keep = rng.uniform(0.0, bound, size=n) < profile(t)
    return SampleSet.from_absolute(t[keep], L, periods)


def zipf_popularity(M, beta):
    """Zipf probabilities ``k^-beta / sum`` for ranks ``k = 1..M``."""
    if M < 1:
        raise ValueError(f"number of files must be at least 1, got {M}")
    if beta < 0:
        raise ValueError(f"Zipf exponent must be non-negative, got {beta}")
    p = np.arange(1, M + 1, dtype=float) ** (-float(beta))
    return p / p.sum()


def rank_means(M, beta, min_intensity):
    """Per-period mean of each popularity rank; the last rank gets ``min_intensity``."""
    k = np.arange(1, M + 1, dtype=float)
    return min_intensity * (M / k) ** float(beta)


def _random_shape(rng, L, mean):
    # base carries 20-60% of the mass, the rest is split over 1-3 bumps
    n_bumps = int(rng.integers(1, 4))
    base_share = rng.uniform(0.2, 0.6)
    centers = rng.uniform(0.0, L, size=n_bumps)
    widths = rng.uniform(0.05, 0.25, size=n_bumps) * L
    split = rng.dirichlet(np.ones(n_bumps)) * (1.0 - base_share) * mean
    return IntensityProfile(L, base_share * mean / L, centers, widths, split / widths)


def unit_profile(user, file, period_length, seed):
    """Random time shape of one pair, scaled to one request per period.

    The shape depends only on (seed, user, file); popularity enters through
    :meth:`IntensityProfile.scaled`.
    """
    rng = seeding.substream(seed, seeding.PROFILE, user, file)
    return _random_shape(rng, float(period_length), 1.0)


def user_ranks(n_users, n_files, mode, seed):
    """Rank permutation per user: ``ranks[i, j]`` is file ``j``'s popularity rank (0-based)."""
    if mode == "identical":
        perm = seeding.substream(seed, seeding.RANKS, 0).permutation(n_files)
        order = np.tile(perm, (n_users, 1))
    elif mode == "independent":
        order = np.array([seeding.substream(seed, seeding.RANKS, i).permutation(n_files)
                          for i in range(n_users)]).reshape(n_users, n_files)
    else:
        raise ValueError(f"unknown popularity mode {mode!r}")
    ranks = np.empty_like(order)
    rows = np.arange(n_users)[:, None]
    ranks[rows, order] = np.arange(n_files)[None, :]
    return ranks


def scripted_means(n_files, min_intensity):
    """Per-period means of the designed three-user scenario, shape (3, M)."""
    if n_files < 21:
        raise ValueError("the scripted scenario needs at least 21 files")
    means = np.full((3, n_files), float(min_intensity))
    for i, prefs in enumerate(SCRIPTED_PREFERENCES):
        for r, f in enumerate(prefs, start=1):
            means[i, f - 1] = min_intensity * SCRIPTED_RANK_SCALE * r ** -SCRIPTED_RANK_DECAY
    return means


def build_user_profiles(n_users, n_files, *, mode, beta=0.0, min_intensity=1.0,
                        period_length=1000.0, seed=0, users=None):
    """Ground-truth profiles for every <user, file> pair as an N x M nested list.

    Modes
    -----
    independent
        each user ranks the files by its own random permutation;
    identical
        all users share one ranking;
    scripted
        the designed three-user scenario: fixed preference lists and one
        activity peak per user (5x its baseline intensity).

    The least popular file of every user has a per-period mean of exactly
    ``min_intensity``; rank ``k`` gets ``min_intensity * (M / k) ** beta``.
    Profiles depend only on (seed, user, file), so user ``i`` gets the same
    row for any ``n_users``.  Pass ``users`` to build only those rows (the
    others are ``None``).
    """
    L = float(period_length)
    if mode == "scripted":
        if n_users != 3:
            raise ValueError("the scripted scenario has exactly 3 users")
        means = scripted_means(n_files, min_intensity)
        width = SCRIPTED_PEAK_HALF_WIDTH * L
        extra = SCRIPTED_PEAK_MULTIPLIER - 1.0
        profiles = []
        for i in range(3):
            center = (SCRIPTED_PEAK_CYCLES[i] - 0.5) * L / SCRIPTED_CYCLES_PER_PERIOD
            row = []
            for j in range(n_files):
                level = means[i, j] / (L + extra * width)
                row.append(IntensityProfile(L, level, [center], [width], [extra * level]))
            profiles.append(row)
        return profiles
    if mode not in MODES:
        raise ValueError(f"unknown popularity mode {mode!r}")
    means = pair_means(n_users, n_files, mode, beta, min_intensity, seed)
    profiles = [None] * n_users
    for i in (range(n_users) if users is None else users):
        profiles[i] = [unit_profile(i, j, L, seed).scaled(means[i, j]) for j in range(n_files)]
    return profiles


def pair_means(n_users, n_files, mode, beta, min_intensity, seed):
    """Per-period mean request count of every <user, file> pair, shape (N, M)."""
    if mode == "scripted":
        return scripted_means(n_files, min_intensity)
    ranks = user_ranks(n_users, n_files, mode, seed)
    return rank_means(n_files, beta, min_intensity)[ranks]


def _quadrature(L, n_cells=2000):
    x, w = np.polynomial.legendre.leggauss(5)
    edges = np.linspace(0.0, L, n_cells + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def estimation_error(estimate, truth):
    """Normalized L2 distance ``||est - truth|| / ||truth||`` over one period."""
    L = truth.period_length
    if not math.isclose(estimate.period_length, L):
        raise ValueError("estimate and truth have different period lengths")
    nodes, weights = _quadrature(L)
    lam = truth(nodes)
    denom = float(np.dot(weights, lam * lam))
    if denom <= 0:
        raise ValueError("estimation error is undefined for a zero-mass truth")
    diff = estimate(nodes) - lam
    return math.sqrt(float(np.dot(weights, diff * diff)) / denom)
