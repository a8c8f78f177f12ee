"""Flat parameter vectors, seeded random streams and small math helpers.

Tensors are plain float64 numpy arrays. ``ParamVector`` adds a named layout
on top of a flat buffer so that model code can address weight matrices by
name while federation code treats the whole thing as one vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def build_layout(shapes: Iterable[tuple[str, tuple[int, ...]]]) -> tuple[LayoutEntry, ...]:
    entries = []
    offset = 0
    for name, shape in shapes:
        shape = tuple(int(s) for s in shape)
        entries.append(LayoutEntry(name, offset, shape))
        offset += math.prod(shape)
    return tuple(entries)


class ParamVector:
    """Immutable flat float64 vector with a named layout.

    The buffer is copied on construction and marked read-only; arithmetic
    produces new vectors via :meth:`replace`.
    """

    __slots__ = ("data", "layout", "_index")

    def __init__(self, data, layout: Sequence[LayoutEntry]):
        arr = np.array(data, dtype=np.float64, copy=True).reshape(-1)
        layout = tuple(layout)
        offset = 0
        for entry in layout:
            if entry.offset != offset:
                raise ConfigError(f"layout entry '{entry.name}' is not contiguous")
            offset += entry.size
        if offset != arr.size:
            raise ConfigError(f"layout covers {offset} values but data has {arr.size}")
        arr.flags.writeable = False
        self.data = arr
        self.layout = layout
        self._index = {e.name: e for e in layout}

    @classmethod
    def zeros(cls, layout: Sequence[LayoutEntry]) -> "ParamVector":
        total = sum(e.size for e in layout)
        return cls(np.zeros(total), layout)

    def __len__(self) -> int:
        return self.data.size

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [e.name for e in self.layout]

    def view(self, name: str) -> np.ndarray:
        e = self._index[name]
        return self.data[e.offset:e.offset + e.size].reshape(e.shape)

    def replace(self, data) -> "ParamVector":
        return ParamVector(data, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and self.data.tobytes() == other.data.tobytes()

    def __repr__(self) -> str:
        return f"ParamVector(d={self.data.size}, layout={[e.name for e in self.layout]})"


class SeededRng:
    """Counter-based random stream addressed by ``(seed, stream)``.

    Backed by numpy's Philox generator keyed through a ``SeedSequence`` so
    that every (seed, stream, sub-key path) triple maps to its own
    independent stream regardless of the order in which streams are created.
    """

    def __init__(self, seed: int, stream: int = 0, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.path = tuple(int(p) & _MASK64 for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *self.path))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, key: int) -> "SeededRng":
        """Independent child stream; does not advance this stream."""
        return SeededRng(self.seed, self.stream, (*self.path, key))

    def normal(self, size=None, scale: float = 1.0):
        return self.generator.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None, dtype=np.int64):
        return self.generator.integers(low, high, size, dtype=dtype)

    def dirichlet(self, alpha, size=None):
        return self.generator.dirichlet(alpha, size)

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream}, path={self.path})"


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ConfigError(f"{what} contains non-finite values")


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1:
        raise ConfigError(f"matvec expects rank-2 and rank-1 inputs, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ConfigError(f"matvec inner dimensions differ: {m.shape} x {v.shape}")
    return m @ v


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ConfigError("softmax of an empty vector")
    _require_finite(v, "softmax input")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def l2_norm_sq(p: ParamVector | np.ndarray) -> float:
    data = p.data if isinstance(p, ParamVector) else np.asarray(p, dtype=np.float64)
    return float(np.dot(data, data))


def gaussian_vector(rng: SeededRng, n: int, sigma: float) -> np.ndarray:
    """``n`` independent N(0, sigma^2) draws; exact zeros when sigma is 0."""
    if sigma < 0 or not math.isfinite(sigma):
        raise ConfigError(f"sigma must be a finite value >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(n)
    return rng.normal(n, scale=sigma)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
