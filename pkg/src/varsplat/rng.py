"""Deterministic counter-based normal/uniform variate streams.

Every variate is a pure function of (seed, domain, context, entity, draw),
so sampling is order-independent, parallel-safe and croppable: drawing for
a subset of entities (Gaussians, pixels, rays) yields exactly the values
the full draw would have produced for those entities.

numpy's Generator is not used here on purpose: its ziggurat normal sampler
consumes a variable number of raw words per variate, which breaks the
fixed (seed, stream, draw-index) -> variate contract. Instead a splitmix64
finalizer hashes the counter tuple to 53 uniform bits, mapped through the
normal inverse CDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# Domain tags keep unrelated consumers of the same seed on disjoint streams.
DOMAIN_FEATURES = np.uint64(0x53454D41)
DOMAIN_PIXELS = np.uint64(0x50495845)
DOMAIN_BINS = np.uint64(0x42494E53)
DOMAIN_VIEWS = np.uint64(0x56494557)


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; operates on uint64 arrays, wraps silently."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _hash_counters(seed: int, domain: np.uint64, context: int, entity, draw) -> np.ndarray:
    entity = np.asarray(entity, dtype=np.uint64)
    draw = np.asarray(draw, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z0 = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ domain)
        z0 = _mix(z0 ^ (np.uint64(context & 0xFFFFFFFFFFFFFFFF) * _GOLDEN))
        z = _mix(z0 ^ (entity * _GOLDEN))
        z = _mix(z ^ (draw * _GOLDEN))
    return z


def uniform(seed: int, domain: np.uint64, context: int, entity, draw) -> np.ndarray:
    """Uniform variates on the open interval (0, 1), shape by broadcasting."""
    bits = _hash_counters(seed, domain, context, entity, draw)
    # 53 mantissa bits, offset by half an ulp to keep strictly inside (0, 1).
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def normal(seed: int, domain: np.uint64, context: int, entity, draw) -> np.ndarray:
    """Standard normal variates via the inverse CDF."""
    return ndtri(uniform(seed, domain, context, entity, draw))


@dataclass(frozen=True)
class RngStream:
    """Root of a family of counter-based streams.

    ``seed`` is the user-facing reproducibility knob; ``stream`` is a
    context id (e.g. the fit iteration) separating repeated sampling of the
    same entities. Per-entity streams are derived by the consuming
    operation from entity indices, never from draw order.
    """

    seed: int
    stream: int = 0

    def substream(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def normal(self, domain: np.uint64, entity, draw) -> np.ndarray:
        return normal(self.seed, domain, self.stream, entity, draw)

    def uniform(self, domain: np.uint64, entity, draw) -> np.ndarray:
        return uniform(self.seed, domain, self.stream, entity, draw)
