"""Discrete probability distributions over box-edge positions.

Each edge offset is modelled as a distribution over ``n`` uniformly spaced
values on ``[e_min, e_max]``; the predicted edge is its expectation. Targets
are encoded as a Dirac on the lattice, or split across the two neighbouring
bins when the target falls between lattice values.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc


@dataclass(frozen=True)
class BinLattice:
    e_min: float = 0.0
    e_max: float = 7.0
    n: int = 8

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"lattice needs at least 2 bins, got {self.n}")
        if not self.e_max > self.e_min:
            raise ValueError(f"empty lattice range [{self.e_min}, {self.e_max}]")

    @property
    def values(self):
        return np.linspace(self.e_min, self.e_max, self.n)

    @property
    def step(self):
        return (self.e_max - self.e_min) / (self.n - 1)

    @classmethod
    def default(cls, n=8):
        """Lattice ``{0, 1, ..., n-1}`` in stride units."""
        return cls(0.0, float(n - 1), n)


@dataclass(frozen=True)
class EdgeDistribution:
    lattice: BinLattice
    probs: np.ndarray = field(repr=False)
    clamped: bool = False

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (self.lattice.n,):
            raise ValueError(f"expected {self.lattice.n} probabilities, got shape {p.shape}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)


def decode_expectation(d):
    """Expected edge value ``sum_i e_i * p_i``."""
    return float(np.dot(d.lattice.values, d.probs))


def logits_to_distribution(edge_logits, lattice, T=1.0):
    logits = np.asarray(edge_logits, dtype=np.float64)
    if logits.shape != (lattice.n,):
        raise ValueError(f"expected {lattice.n} logits, got shape {logits.shape}")
    probs = nc.softmax_t(nc.Tensor(logits), T).data
    return EdgeDistribution(lattice, probs)


def encode_array(targets, lattice):
    """Vectorized two-bin encoding.

    Returns ``(probs[..., n], clamped_mask)`` for an array of edge targets.
    """
    t = np.asarray(targets, dtype=np.float64)
    clamped = (t < lattice.e_min) | (t > lattice.e_max)
    t = np.clip(t, lattice.e_min, lattice.e_max)
    u = (t - lattice.e_min) / lattice.step
    lo = np.minimum(np.floor(u).astype(np.int64), lattice.n - 2)
    frac = u - lo
    probs = np.zeros(t.shape + (lattice.n,))
    np.put_along_axis(probs, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    np.put_along_axis(probs, lo[..., None] + 1, frac[..., None], axis=-1)
    return probs, clamped


def encode_target(e_star, lattice):
    """Distribution whose expectation is ``e_star`` (clamped into range)."""
    probs, clamped = encode_array(np.array([e_star]), lattice)
    return EdgeDistribution(lattice, probs[0], clamped=bool(clamped[0]))


def sharpness(d):
    """Peak probability: 1 for a Dirac, 1/n for uniform."""
    return float(np.max(d.probs))
