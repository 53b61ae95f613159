"""Seedable random streams and the handful of special functions the rest of
the package relies on.

Streams are numpy ``Generator`` objects over PCG64, keyed by a
``SeedSequence`` built from ``(seed, stream_id, *subkeys)``. Distinct keys give
statistically independent streams; identical keys reproduce the sequence bit
for bit.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import ParameterDomainError

__all__ = [
    "RngHandle",
    "sample_gamma",
    "sample_beta",
    "sample_trunc_normal",
    "gamma_cdf",
    "normal_cdf",
    "log_normal_sf",
]


class RngHandle:
    """A reproducible random stream.

    Parameters
    ----------
    seed : int
        Non-negative 64-bit seed.
    stream_id : int or tuple of int
        Sub-stream key. Tuples let callers key streams by e.g.
        ``(replication, fold, chain)``.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if seed < 0 or seed >= 2**64:
            raise ParameterDomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        key = (stream_id,) if isinstance(stream_id, (int, np.integer)) else tuple(stream_id)
        self.seed = int(seed)
        self.stream_id = tuple(int(k) for k in key)
        self._ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(self._ss))

    def spawn(self, *keys: int) -> "RngHandle":
        """Derive an independent child stream keyed by ``keys``."""
        return RngHandle(self.seed, self.stream_id + tuple(int(k) for k in keys))

    def describe(self) -> str:
        return f"PCG64(SeedSequence(entropy={self.seed}, spawn_key={self.stream_id}))"

    def __repr__(self):
        return f"RngHandle(seed={self.seed}, stream_id={self.stream_id})"


def _check_positive(**params):
    for name, value in params.items():
        if not np.all(np.asarray(value) > 0):
            raise ParameterDomainError(f"{name} must be positive, got {value}")


def sample_gamma(shape, rate, rng: RngHandle, size=None):
    """Gamma(shape, rate) draws; mean ``shape / rate``."""
    _check_positive(shape=shape, rate=rate)
    return rng.generator.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def sample_beta(a, b, rng: RngHandle, size=None):
    _check_positive(a=a, b=b)
    return rng.generator.beta(a, b, size=size)


def sample_trunc_normal(mean, sd, lower, rng: RngHandle, size=None):
    """Draw from Normal(mean, sd**2) conditioned on exceeding ``lower``.

    Vectorised over broadcastable ``mean``, ``sd``, ``lower``. Entries whose
    standardized bound exceeds 2 use the exponential-proposal rejection
    sampler of Robert (1995); the others use plain rejection from the
    untruncated normal.
    """
    _check_positive(sd=sd)
    mean, sd, lower = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(sd, float), np.asarray(lower, float)
    )
    if size is not None:
        mean, sd, lower = (np.broadcast_to(a, size) for a in (mean, sd, lower))
    if not np.all(np.isfinite(lower)):
        raise ParameterDomainError("truncation bound must be finite")
    gen = rng.generator
    z_low = (lower - mean) / sd
    z = np.empty(z_low.shape)
    flat_low = z_low.ravel()
    out = z.ravel()

    tail = flat_low > 2.0
    idx = np.flatnonzero(~tail)
    while idx.size:
        cand = gen.standard_normal(idx.size)
        ok = cand > flat_low[idx]
        out[idx[ok]] = cand[ok]
        idx = idx[~ok]

    idx = np.flatnonzero(tail)
    while idx.size:
        a = flat_low[idx]
        rate = 0.5 * (a + np.sqrt(a * a + 4.0))
        cand = a + gen.exponential(1.0 / rate)
        ok = gen.random(idx.size) <= np.exp(-0.5 * (cand - rate) ** 2)
        out[idx[ok]] = cand[ok]
        idx = idx[~ok]

    # rounding in mean + sd*z can land exactly on the bound
    draws = np.maximum(mean + sd * z, np.nextafter(lower, np.inf))
    return draws if draws.ndim else float(draws)


def gamma_cdf(x, shape, rate):
    """Gamma(shape, rate) CDF. Negative ``x`` maps to 0."""
    _check_positive(shape=shape, rate=rate)
    x = np.asarray(x, dtype=float)
    val = special.gammainc(shape, rate * np.maximum(x, 0.0))
    val = np.where(x < 0, 0.0, val)
    return val if val.ndim else float(val)


def normal_cdf(x):
    val = special.ndtr(x)
    return val if np.ndim(val) else float(val)


def log_normal_sf(z):
    """log P(Z > z) for standard normal Z, accurate deep in the upper tail."""
    val = special.log_ndtr(-np.asarray(z, dtype=float))
    return val if np.ndim(val) else float(val)
