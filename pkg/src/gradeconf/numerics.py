"""Small deterministic numeric kernels shared across the package.

Everything runs in float64. Random numbers come from numpy's PCG64 bit
generator; a :class:`RandomStream` is keyed by ``(seed, stream_id)`` through
``numpy.random.SeedSequence`` so that unrelated consumers (weight init,
dropout masks, bootstrap resampling, data generation) never share draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Per-purpose stream ids. Anything that needs its own randomness derives a
# stream from one of these plus extra integer keys.
STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_BOOTSTRAP = 3
STREAM_DATA = 4
STREAM_SHUFFLE = 5
STREAM_SPLIT = 6
STREAM_RATERS = 7
STREAM_RANDOM_BASELINE = 8


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


@dataclass
class RandomStream:
    """A reproducible PCG64 stream identified by ``(seed, stream_id, *keys)``.

    Two streams built from the same identifiers produce identical draws on
    any platform numpy supports. Streams are not meant to be shared between
    concurrent tasks; derive a child with :meth:`child` instead.
    """

    seed: int
    stream_id: int = 0
    keys: tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0 or any(k < 0 for k in self.keys):
            raise ContractError("seed, stream id and keys must be non-negative")
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.stream_id), *map(int, self.keys))
        )
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.keys + tuple(int(k) for k in keys))

    # thin conveniences over the generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max-subtracted)."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("softmax needs a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax input must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax of a 2-D array."""
    x = np.asarray(m, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sample_std(samples: Sequence, ddof: int = 1) -> np.ndarray:
    """Per-coordinate sample standard deviation over a list of vectors."""
    if len(samples) < 2:
        raise ContractError("sample_std needs at least two samples")
    lengths = {len(np.atleast_1d(s)) for s in samples}
    if len(lengths) != 1:
        raise ContractError("samples must all have the same length")
    arr = np.asarray(samples, dtype=np.float64)
    # centring on the first sample makes identical samples give an exact zero
    return (arr - arr[0]).std(axis=0, ddof=ddof)


def min_max_normalize(values: Sequence[float]) -> np.ndarray:
    """Map values linearly onto [0, 1]; a degenerate spread maps to all ones."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot normalize an empty list")
    if not np.all(np.isfinite(x)):
        raise ContractError("values must be finite")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def min_max_invert_normalize(values: Sequence[float]) -> np.ndarray:
    """``1 - (x - min) / (max - min)``; largest input -> 0, smallest -> 1.

    Zero spread means no observed disagreement, so every output is 1.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot normalize an empty list")
    if not np.all(np.isfinite(x)):
        raise ContractError("values must be finite")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return 1.0 - (x - lo) / (hi - lo)


def softplus(x) -> np.ndarray:
    """``log(1 + e^x)`` without overflow for large positive ``x``."""
    x = np.asarray(x, dtype=np.float64)
    big = x > 30.0
    out = np.empty_like(x)
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def derive_seed(master: int, *keys: int) -> int:
    """A 32-bit seed derived from ``master`` and integer keys via SeedSequence."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
