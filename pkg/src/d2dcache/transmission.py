"""Transmission-phase simulation for a fixed cache state.

Requests that hit the requester's own cache cost nothing.  In unicast mode
every other request is served over its best-source link with fresh per-frame
fading.  In broadcast mode, two or more users requesting the same uncached
file in one slot are served by a single broadcast at the max-min rate, and
that one delay serves every request of the group.
"""

from dataclasses import dataclass

import numpy as np

from d2dcache import seeding
from d2dcache.channel import BS, MAX_FRAMES, PathologicalLinkError, link_power, sample_delays

MODES = ("unicast", "broadcast")


class NoRequestsError(ValueError):
    """The request batch is empty."""


@dataclass(frozen=True, eq=False)
class RequestBatch:
    """Request counts per time slot, shape (slots, N, M)."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3:
            raise ValueError("request counts must have shape (slots, users, files)")
        if np.any(c < 0):
            raise ValueError("request counts must be non-negative")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self):
        return int(self.counts.sum())

    @classmethod
    def sample(cls, omega, slots, per_user=1, rng_seed=0):
        """Draw ``per_user * N`` requests per slot over <user, file> pairs in proportion to ``omega``."""
        omega = np.asarray(omega, dtype=float)
        N, M = omega.shape
        p = omega.ravel() / omega.sum()
        rng = seeding.substream(rng_seed, seeding.REQUESTS)
        counts = rng.multinomial(per_user * N, p, size=slots).reshape(slots, N, M)
        return cls(counts)


def broadcast_rate(candidates, receivers, fading, params):
    """Max-min broadcast source and rate for one frame.

    Parameters
    ----------
    candidates : sequence of int
        Candidate transmitters; ``BS`` (-1) or user indices.
    receivers : sequence of int
        Receiving users.
    fading : (len(candidates), len(receivers)) array
        Fading power of every candidate-receiver link in this frame.
    params : SystemParams

    Returns
    -------
    (source, rate)
        The candidate whose weakest receiver link is strongest, and that
        weakest capacity.  Ties go to the first candidate listed, so list
        the base station first and users in increasing index.
    """
    if len(candidates) == 0 or len(receivers) == 0:
        raise ValueError("broadcast needs at least one candidate and one receiver")
    fading = np.asarray(fading, dtype=float).reshape(len(candidates), len(receivers))
    power = np.array([params.bs_power if c == BS else params.user_powers[c] for c in candidates])
    cap = params.channel_bandwidth * np.log2(1.0 + params.snr_scale(power)[:, None] * fading)
    worst = cap.min(axis=1)
    best = int(np.argmax(worst))
    return candidates[best], float(worst[best])


def _broadcast_delay(file, receivers, candidates, topology, params, rng, max_frames=MAX_FRAMES):
    # returns (frames, set of D2D users that transmitted at least one frame)
    alpha = params.pathloss_exponent
    means = np.array([[topology.fading_mean(c, r, alpha) for r in receivers] for c in candidates])
    # D2D power is the transmitter's own power when broadcasting
    power = np.array([params.bs_power if c == BS else params.user_powers[c] for c in candidates])
    scale = params.snr_scale(power)[:, None, None]
    per_frame = params.frame_duration * params.channel_bandwidth
    sent, frames, used = 0.0, 0, set()
    cand = np.asarray(candidates)
    while True:
        if frames >= max_frames:
            raise PathologicalLinkError(f"broadcast of file {file} unfinished after {max_frames} frames")
        if params.fading == "rayleigh":
            z = means[:, :, None] * rng.standard_exponential(means.shape + (8,))
        else:
            z = np.repeat(means[:, :, None], 8, axis=2)
        cap = per_frame * np.log2(1.0 + scale * z)
        worst = cap.min(axis=1)                 # (candidates, frames)
        pick = np.argmax(worst, axis=0)         # first max: BS, then lowest user
        rate = worst[pick, np.arange(8)]
        cum = sent + np.cumsum(rate)
        done = np.flatnonzero(cum >= params.file_size)
        stop = done[0] + 1 if done.size else 8
        used.update(int(c) for c in cand[pick[:stop]] if c != BS)
        if done.size:
            return frames + stop, used
        sent = cum[-1]
        frames += 8


def simulate_phase(requests, cache, source, topology, params, mode="unicast", rng_seed=0):
    """Realized average delay (frames per request) of one transmission phase.

    Parameters
    ----------
    requests : RequestBatch
    cache : (N, M) binary array or CacheMatrix
    source : (N, M) int array
        Best-source table for the cache state (``BS`` = -1).
    topology, params
        Positions and physical-layer constants.
    mode : {"unicast", "broadcast"}
    rng_seed : int
        Unicast draws are keyed by (slot, user, file), so both modes see the
        same fading for requests that are served alone.

    Notes
    -----
    In broadcast mode groups are served in decreasing request count, then
    increasing file index.  A user that broadcast in a slot is busy for the
    rest of that slot; the base station is always available.  Files wanted
    by a single user fall back to unicast.
    """
    if mode not in MODES:
        raise ValueError(f"unknown transmission mode {mode!r}")
    phi = np.asarray(getattr(cache, "phi", cache)).astype(bool)
    counts = requests.counts
    if counts.shape[1:] != phi.shape:
        raise ValueError("request and cache dimensions disagree")
    n_requests = requests.total
    if n_requests == 0:
        raise NoRequestsError("no requests to serve")
    alpha = params.pathloss_exponent
    total = 0
    for slot in range(counts.shape[0]):
        wanted = np.where(phi, 0, counts[slot])
        unicast = wanted.copy()
        if mode == "broadcast":
            receivers_per_file = (wanted > 0).sum(axis=0)
            files = np.flatnonzero(receivers_per_file >= 2)
            order = sorted(files, key=lambda j: (-int(wanted[:, j].sum()), int(j)))
            busy = set()
            for j in order:
                receivers = [int(r) for r in np.flatnonzero(wanted[:, j])]
                candidates = [BS] + [int(k) for k in np.flatnonzero(phi[:, j]) if k not in busy]
                rng = seeding.substream(rng_seed, seeding.BROADCAST, slot, j)
                frames, used = _broadcast_delay(j, receivers, candidates, topology, params, rng)
                busy |= used
                total += frames
                unicast[:, j] = 0
        for i, j in zip(*np.nonzero(unicast)):
            s = int(source[i, j])
            a = BS if s == BS else s
            rng = seeding.substream(rng_seed, seeding.UNICAST, slot, i, j)
            d = sample_delays(link_power(params, a, int(i)), topology.fading_mean(a, int(i), alpha),
                              params, int(unicast[i, j]), rng)
            total += int(d.sum())
    return total / n_requests
