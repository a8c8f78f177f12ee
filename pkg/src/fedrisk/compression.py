"""Top-k sparsification with error feedback and optional 8-bit quantization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PayloadError

RATIOS = (1, 2, 4, 8, 16)
QUANTIZE_MODES = ("off", "uniform-8bit")
LEVELS = 256

# Wire sizes, in bytes.
COUNT_BYTES = 4
INDEX_BYTES = 4
VALUE_BYTES = 8
CODE_BYTES = 1
SCALE_OFFSET_BYTES = 16


@dataclass(frozen=True)
class CompressionConfig:
    ratio: int = 1
    quantize: str = "off"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.ratio not in RATIOS:
            out.append(f"compression.ratio must be one of {RATIOS}")
        if self.quantize not in QUANTIZE_MODES:
            out.append(f"compression.quantize must be one of {QUANTIZE_MODES}")
        return out

    @property
    def lossless(self) -> bool:
        return self.ratio == 1 and self.quantize == "off"


@dataclass(eq=False)
class SparsePayload:
    """Kept coordinates of a length-``d`` vector.

    Unquantized payloads carry float64 ``values``. Quantized ones carry
    uint8 ``codes`` plus ``scale``/``offset`` so that value = offset + code * scale.
    """

    d: int
    indices: np.ndarray
    values: np.ndarray | None = None
    codes: np.ndarray | None = None
    scale: float | None = None
    offset: float | None = None

    @property
    def quantized(self) -> bool:
        return self.codes is not None

    def __len__(self) -> int:
        return int(self.indices.size)

    def validate(self) -> None:
        idx = self.indices
        if idx.size and (idx[-1] >= self.d or np.any(np.diff(idx.astype(np.int64)) <= 0)):
            raise PayloadError("sparse indices must be strictly increasing and below d")
        if (self.values is None) == (self.codes is None):
            raise PayloadError("payload must carry exactly one of values or codes")
        if self.quantized and (self.scale is None or self.offset is None):
            raise PayloadError("quantized payload needs scale and offset")
        n = self.values.size if self.values is not None else self.codes.size
        if n != idx.size:
            raise PayloadError("index and value counts differ")

    def kept_values(self) -> np.ndarray:
        if self.quantized:
            return self.offset + self.codes.astype(np.float64) * self.scale
        return self.values

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparsePayload):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and a.tobytes() == b.tobytes()
        return (self.d == other.d and same(self.indices, other.indices)
                and same(self.values, other.values) and same(self.codes, other.codes)
                and self.scale == other.scale and self.offset == other.offset)


@dataclass
class ErrorFeedbackState:
    residual: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "ErrorFeedbackState":
        return cls(np.zeros(d))


def kept_count(d: int, ratio: int) -> int:
    return d if ratio == 1 else min(d, math.ceil(d / ratio))


def top_k_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |v|, ties to the lower index, in ascending order."""
    order = np.argsort(-np.abs(v), kind="stable")
    return np.sort(order[:k])


def quantize_values(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    if values.size == 0:
        return np.zeros(0, dtype=np.uint8), 0.0, 0.0
    lo, hi = float(values.min()), float(values.max())
    scale = (hi - lo) / (LEVELS - 1)
    if scale == 0.0:
        return np.zeros(values.size, dtype=np.uint8), 0.0, lo
    codes = np.clip(np.rint((values - lo) / scale), 0, LEVELS - 1).astype(np.uint8)
    return codes, scale, lo


def quantize_payload(p: SparsePayload) -> SparsePayload:
    if p.quantized:
        return p
    codes, scale, offset = quantize_values(p.values)
    return SparsePayload(p.d, p.indices, codes=codes, scale=scale, offset=offset)


def sparsify(delta: np.ndarray, ratio: int, state: ErrorFeedbackState) -> SparsePayload:
    """Top-k selection with error feedback, no quantization."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 1 or delta.size < 1:
        raise ConfigError("compress expects a non-empty 1-D vector")
    if state.residual.shape != delta.shape:
        raise ConfigError("error-feedback residual has the wrong length")
    v = delta + state.residual
    idx = top_k_indices(v, kept_count(v.size, ratio))
    kept = v[idx]
    residual = v.copy()
    residual[idx] = 0.0
    state.residual = residual
    return SparsePayload(v.size, idx.astype(np.uint32), values=kept.copy())


def compress(delta: np.ndarray, cfg: CompressionConfig, state: ErrorFeedbackState) -> SparsePayload:
    payload = sparsify(delta, cfg.ratio, state)
    if cfg.quantize == "uniform-8bit":
        payload = quantize_payload(payload)
    return payload


def decompress(p: SparsePayload) -> np.ndarray:
    p.validate()
    out = np.zeros(p.d)
    out[p.indices.astype(np.int64)] = p.kept_values()
    return out


def payload_bytes(p: SparsePayload) -> int:
    n = len(p)
    if p.quantized:
        return COUNT_BYTES + SCALE_OFFSET_BYTES + n * (INDEX_BYTES + CODE_BYTES)
    return COUNT_BYTES + n * (INDEX_BYTES + VALUE_BYTES)


def dense_bytes(d: int) -> int:
    return VALUE_BYTES * d
