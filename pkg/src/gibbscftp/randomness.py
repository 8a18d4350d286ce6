"""Deterministic addressable randomness: a counter-based pseudo-random field.

Every variate is a pure function of (seed, address); there is no stream
state, so backward compositions can re-read old randomness exactly. Address
components are mixed one 64-bit word at a time with a splitmix64-style
finalizer. Scalar and vectorized (numpy) readers agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
INV53 = 1.0 / (1 << 53)

# stage tags keep logically distinct draws at the same (vertex, n) apart
TAG_ACTIVE = 1      # A_{v,n}: activity coin
TAG_SELECT = 2      # block coupling: common-branch selector u0
TAG_COMMON = 3      # block coupling: common-branch configuration variate
TAG_RESIDUAL = 4    # block coupling: per-vertex residual variates
TAG_GENERIC = 5     # miscellaneous experiment draws


def _mix(h: int, w: int) -> int:
    """Absorb one 64-bit word and diffuse (splitmix64 finalizer)."""
    h = (h + GOLDEN + (w & MASK64)) & MASK64
    z = h
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _address_words(address) -> list:
    """Flatten an address into unsigned 64-bit words.

    Accepted components: ints (vertex coordinates as signed 32-bit, time
    index, stage tag, counter, replica id) and nested tuples of ints.
    """
    words = []
    for part in address:
        if isinstance(part, tuple):
            for c in part:
                words.append(int(c) & 0xFFFFFFFF)
        else:
            words.append(int(part) & MASK64)
    return words


@dataclass(frozen=True)
class RandomField:
    """Addressable i.i.d. uniform field keyed by a 64-bit seed."""

    seed: int
    replica: int = 0

    def split(self, replica: int) -> "RandomField":
        """Substream for an independent replica; same addressing contract."""
        return RandomField(self.seed, replica)

    def raw64(self, address) -> int:
        h = _mix(self.seed & MASK64, self.replica)
        for w in _address_words(address):
            h = _mix(h, w)
        return h

    def uniform(self, address) -> float:
        """Deterministic uniform variate in [0, 1) for this address."""
        return (self.raw64(address) >> 11) * INV53

    def bernoulli(self, address, p: float) -> bool:
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        return self.uniform(address) < p


def uniform(field: RandomField, address) -> float:
    return field.uniform(address)


def bernoulli(field: RandomField, address, p: float) -> bool:
    return field.bernoulli(address, p)


_GOLDEN_U = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def _mix_vec(h: np.ndarray, w) -> np.ndarray:
    """Vectorized _mix on uint64 arrays (wraparound arithmetic; numpy
    integer overflow on arrays is silent by design)."""
    if not (isinstance(w, np.ndarray) and w.dtype == np.uint64):
        w = np.asarray(w).astype(np.uint64)
    h = h + _GOLDEN_U + w
    z = (h ^ (h >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def uniform_array(field: RandomField, word_columns, replicas=None) -> np.ndarray:
    """Vectorized uniforms: one draw per row of the given word columns.

    word_columns: sequence of integer arrays (broadcastable), each entry the
    k-th address word of a draw. Vertex coordinates must already be masked to
    unsigned 32-bit (use coord & 0xFFFFFFFF) to match the scalar reader.
    When `replicas` is given (broadcastable integer array), entry i matches
    field.split(replicas[i]).uniform(...) bit for bit.
    """
    cols = [np.asarray(c) for c in word_columns]
    shapes = [c.shape for c in cols]
    if replicas is not None:
        replicas = np.asarray(replicas)
        shapes.append(replicas.shape)
    shape = np.broadcast_shapes(*shapes)
    if replicas is None:
        h = np.full(shape, _mix(field.seed & MASK64, field.replica),
                    dtype=np.uint64)
    else:
        h = _mix_vec(np.full(shape, np.uint64(field.seed & MASK64)),
                     np.broadcast_to(replicas, shape))
    for c in cols:
        h = _mix_vec(h, np.broadcast_to(c, shape).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * INV53


def hash_state(field: RandomField, replicas) -> np.ndarray:
    """Partial hash after absorbing only the replica ids (uint64 array).

    Extending with extend_state and finishing with state_uniform matches
    field.split(r).uniform(address) bit for bit; this lets hot loops absorb
    shared address prefixes once.
    """
    replicas = np.asarray(replicas)
    return _mix_vec(np.full(replicas.shape, np.uint64(field.seed & MASK64)),
                    replicas)


def extend_state(h: np.ndarray, *word_arrays) -> np.ndarray:
    """Absorb further address words (broadcastable integer arrays)."""
    for w in word_arrays:
        h = _mix_vec(h, w)
    return h


def state_uniform(h: np.ndarray) -> np.ndarray:
    """Uniforms in [0,1) from fully-absorbed hash states."""
    return (h >> np.uint64(11)).astype(np.float64) * INV53


def state_bernoulli(h: np.ndarray, p: float) -> np.ndarray:
    """state_uniform(h) < p, compared in the integer domain.

    m * 2^-53 is exact for every 53-bit mantissa m, so m * 2^-53 < p is
    equivalent to m < ceil(p * 2^53) computed exactly; this skips the
    float conversion on hot paths.
    """
    t = math.ceil(Fraction(p) * (1 << 53))
    return (h >> np.uint64(11)) < np.uint64(t)


def vertex_words(v) -> tuple:
    """Address words for a vertex: signed coordinates masked to 32 bits."""
    return tuple(int(c) & 0xFFFFFFFF for c in v)
