"""Fading links, per-frame capacity and Monte-Carlo transmission delays.

Delays are measured in frames.  A file of ``F`` bits is delivered in the
first frame ``T`` at which the accumulated ``T0 * C[k]`` reaches ``F``, where
the capacity ``C[k] = B log2(1 + P z_k / (B sigma^2))`` sees a fresh
exponential fading draw ``z_k`` (Rayleigh magnitude squared) every frame.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from d2dcache import seeding

#: source-table entry meaning "served by the base station"
BS = -1
#: distance floor in km for coincident nodes
MIN_DISTANCE = 1e-3
MAX_FRAMES = 1_000_000
DEFAULT_MC_SAMPLES = 10_000
_BLOCK = 8
_LINK_CHUNK = 16


class PathologicalLinkError(RuntimeError):
    """A transmission did not finish within the frame cap."""


@dataclass(frozen=True, eq=False)
class SystemParams:
    """Physical-layer constants shared by every link.

    With the default normalization ``B = sigma^2 = T0 = 1`` a power equals
    its signal-to-noise ratio at unit fading.
    """

    file_size: float
    bs_power: float
    user_powers: np.ndarray
    frame_duration: float = 1.0
    channel_bandwidth: float = 1.0
    noise_variance: float = 1.0
    pathloss_exponent: float = 4.0
    channel_count: int = 1
    fading: str = "rayleigh"

    def __post_init__(self):
        powers = np.array(self.user_powers, dtype=float).ravel()
        powers.setflags(write=False)
        object.__setattr__(self, "user_powers", powers)
        for name in ("file_size", "bs_power", "frame_duration", "channel_bandwidth",
                     "noise_variance", "pathloss_exponent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if np.any(powers <= 0):
            raise ValueError("user powers must be positive")
        if self.channel_count < 1:
            raise ValueError("channel_count must be at least 1")
        if self.fading not in ("rayleigh", "none"):
            raise ValueError("fading must be 'rayleigh' or 'none'")

    @classmethod
    def from_db(cls, file_size, bs_power_db, user_power_db, n_users, **kwargs):
        """Powers given in dB relative to ``B sigma^2``."""
        scale = kwargs.get("channel_bandwidth", 1.0) * kwargs.get("noise_variance", 1.0)
        return cls(file_size=file_size,
                   bs_power=10 ** (bs_power_db / 10) * scale,
                   user_powers=np.full(n_users, 10 ** (user_power_db / 10) * scale),
                   **kwargs)

    def snr_scale(self, power):
        return power / (self.channel_bandwidth * self.noise_variance)


@dataclass(frozen=True, eq=False)
class Topology:
    """Base station and user positions in km."""

    cell_radius: float
    user_positions: np.ndarray
    bs_position: tuple = (0.0, 0.0)

    def __post_init__(self):
        pos = np.array(self.user_positions, dtype=float).reshape(-1, 2)
        bs = np.array(self.bs_position, dtype=float).reshape(2)
        if np.any(np.hypot(*(pos - bs).T) > self.cell_radius * (1 + 1e-12)):
            raise ValueError("all users must lie within the cell radius")
        pos.setflags(write=False)
        object.__setattr__(self, "user_positions", pos)
        object.__setattr__(self, "bs_position", (float(bs[0]), float(bs[1])))

    @property
    def n_users(self):
        return self.user_positions.shape[0]

    @classmethod
    def random(cls, n_users, cell_radius, seed, stratified=True, offset=None):
        """Users uniform in the disc around a central base station.

        With ``stratified=True`` the squared radii are a systematic sample
        (one user per equal-area annulus, annuli shuffled over users), which
        keeps the mean user-to-BS distance stable across ``n_users``.  The
        common offset within the annuli is drawn from ``seed`` unless given.
        """
        if stratified:
            u = seeding.substream(seed, seeding.POSITION, 0).uniform() if offset is None else offset
            strata = seeding.substream(seed, seeding.POSITION, 1, n_users).permutation(n_users)
            r2 = (strata + u) / max(n_users, 1)
        else:
            r2 = np.array([seeding.substream(seed, seeding.POSITION, 2, i).uniform()
                           for i in range(n_users)])
        theta = np.array([seeding.substream(seed, seeding.POSITION, 3, i).uniform(0, 2 * math.pi)
                          for i in range(n_users)])
        r = cell_radius * np.sqrt(r2)
        return cls(cell_radius, np.column_stack((r * np.cos(theta), r * np.sin(theta))))

    def position(self, node):
        return np.array(self.bs_position) if node == BS else self.user_positions[node]

    def distance(self, a, b):
        return max(float(np.hypot(*(self.position(a) - self.position(b)))), MIN_DISTANCE)

    def fading_mean(self, a, b, exponent=4.0):
        """Mean fading power ``d^-exponent`` of the link between nodes ``a`` and ``b``."""
        return self.distance(a, b) ** -exponent

    def subset(self, users):
        return Topology(self.cell_radius, self.user_positions[list(users)], self.bs_position)


@dataclass(frozen=True, eq=False)
class DelayState:
    """Average link delays ``t_avg`` (N x N, diagonal = BS link), best sources and delays."""

    t_avg: np.ndarray
    d_min: np.ndarray
    source: np.ndarray


def channel_capacity(power, fading, params):
    """Instantaneous capacity in bits/s."""
    fading = np.asarray(fading, dtype=float)
    if np.any(fading < 0):
        raise ValueError("fading power must be non-negative")
    out = params.channel_bandwidth * np.log2(1.0 + params.snr_scale(power) * fading)
    return out if out.ndim else float(out)


def sample_fading(mean, rng, size=None):
    """Exponential fading power with the given mean (Rayleigh magnitude squared)."""
    if not mean > 0:
        raise ValueError("fading mean must be positive")
    return seeding.as_generator(rng).exponential(mean, size=size)


def sample_delays(power, fading_mean, params, n, rng, max_frames=MAX_FRAMES):
    """Draw ``n`` independent transmission delays (frames) over one link.

    Fading is drawn in blocks of frames for all ``n`` transmissions at once,
    so the random stream does not depend on power or mean: two calls with
    the same seed share the same standardized fading (coupled samples).
    """
    rng = seeding.as_generator(rng)
    F = params.file_size
    scale = params.snr_scale(power)
    per_frame = params.frame_duration * params.channel_bandwidth
    delays = np.zeros(n, dtype=np.int64)
    sent = np.zeros(n)
    pending = np.ones(n, dtype=bool)
    frames = 0
    while pending.any():
        if frames >= max_frames:
            raise PathologicalLinkError(
                f"transmission unfinished after {max_frames} frames "
                f"(power={power}, fading mean={fading_mean})")
        if params.fading == "rayleigh":
            z = fading_mean * rng.standard_exponential((n, _BLOCK))
        else:
            z = np.full((n, _BLOCK), float(fading_mean))
        bits = per_frame * np.log2(1.0 + scale * z)
        cum = sent[:, None] + np.cumsum(bits, axis=1)
        done = cum >= F
        first = np.argmax(done, axis=1)
        finish = pending & done[:, -1]
        delays[finish] = frames + first[finish] + 1
        pending &= ~finish
        sent = cum[:, -1]
        frames += _BLOCK
    return delays


def transmission_delay_sample(power, fading_mean, params, rng):
    """One transmission delay in frames (at least 1)."""
    return int(sample_delays(power, fading_mean, params, 1, rng)[0])


def estimate_avg_delay(power, fading_mean, params, n_samples=DEFAULT_MC_SAMPLES, rng_seed=0,
                       return_stderr=False):
    """Monte-Carlo mean transmission delay (frames) of one link."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    d = sample_delays(power, fading_mean, params, int(n_samples), rng_seed)
    mean = float(d.mean())
    if return_stderr:
        se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else float("inf")
        return mean, se
    return mean


def link_power(params, a, b):
    """Transmit power of link ``a``-``b``; D2D links use the weaker user's power."""
    if a == BS or b == BS:
        return params.bs_power
    return float(min(params.user_powers[a], params.user_powers[b]))


class _BlockStream:
    """Standard exponential blocks drawn lazily from one generator and kept for reuse."""

    def __init__(self, rng, n):
        self._rng = rng
        self._n = n
        self._blocks = []

    def __getitem__(self, b):
        while len(self._blocks) <= b:
            self._blocks.append(self._rng.standard_exponential((self._n, _BLOCK)))
        return self._blocks[b]


def _coupled_mean_delays(snr, params, n, rng, max_frames=MAX_FRAMES):
    # snr: (links,) mean received SNR; every link sees the same standardized fading
    stream = _BlockStream(rng, n)
    F = params.file_size
    per_frame = params.frame_duration * params.channel_bandwidth
    out = np.empty(snr.size)
    for lo in range(0, snr.size, _LINK_CHUNK):
        s = snr[lo:lo + _LINK_CHUNK, None, None]
        delays = np.zeros((s.shape[0], n), dtype=np.int64)
        sent = np.zeros((s.shape[0], n))
        pending = np.ones((s.shape[0], n), dtype=bool)
        b = 0
        while pending.any():
            if b * _BLOCK >= max_frames:
                raise PathologicalLinkError(f"transmission unfinished after {max_frames} frames")
            z = stream[b] if params.fading == "rayleigh" else np.ones((n, _BLOCK))
            cum = sent[:, :, None] + np.cumsum(per_frame * np.log2(1.0 + s * z[None]), axis=2)
            done = cum >= F
            finish = pending & done[:, :, -1]
            delays[finish] = b * _BLOCK + np.argmax(done, axis=2)[finish] + 1
            pending &= ~finish
            sent = cum[:, :, -1]
            b += 1
        out[lo:lo + _LINK_CHUNK] = delays.mean(axis=1)
    return out


def build_delay_matrix(topology, params, n_samples=DEFAULT_MC_SAMPLES, rng_seed=0):
    """Symmetric N x N matrix of average delays; entry ``[i, i]`` is the BS-to-user link.

    All links are estimated from one shared stream of standardized fading
    draws (common random numbers), so each entry is a deterministic,
    monotone function of the link's mean SNR: the matrix does not depend on
    evaluation order or user numbering, and closer links never come out
    slower.  Entry ``[i, k]`` equals ``estimate_avg_delay`` of that link
    with the generator ``substream(rng_seed, LINK)``.
    """
    N = topology.n_users
    alpha = params.pathloss_exponent
    iu, ku = np.triu_indices(N)
    snr = np.array([
        params.snr_scale(link_power(params, BS if i == k else i, k))
        * topology.fading_mean(BS if i == k else i, k, alpha)
        for i, k in zip(iu, ku)
    ])
    values = _coupled_mean_delays(snr, params, int(n_samples),
                                  seeding.substream(rng_seed, seeding.LINK))
    t_avg = np.zeros((N, N))
    t_avg[iu, ku] = values
    t_avg[ku, iu] = values
    return t_avg


def compute_best_sources(t_avg, phi):
    """Best source table and minimum average delays for cache matrix ``phi``.

    ``source[i, j]`` is ``i`` itself when user ``i`` caches file ``j``
    (delay 0), otherwise the node with the lowest average delay among the
    base station and the other users caching ``j``; ties go to the base
    station, then to the lowest user index.
    """
    t_avg = np.asarray(t_avg, dtype=float)
    phi = np.asarray(phi).astype(bool)
    N, M = phi.shape
    if t_avg.shape != (N, N):
        raise ValueError("t_avg and phi dimensions disagree")
    others = phi[None, :, :] & ~np.eye(N, dtype=bool)[:, :, None]
    cand = np.where(others, t_avg[:, :, None], np.inf)
    k_best = np.argmin(cand, axis=1)
    v_best = np.take_along_axis(cand, k_best[:, None, :], axis=1)[:, 0, :]
    bs = np.diag(t_avg)[:, None]
    use_bs = bs <= v_best
    d_min = np.where(use_bs, bs, v_best)
    source = np.where(use_bs, BS, k_best)
    d_min = np.where(phi, 0.0, d_min)
    source = np.where(phi, np.arange(N)[:, None], source)
    return source.astype(np.int64), d_min
