"""Update clipping, Gaussian perturbation and pairwise additive masking.

Masking stands in for homomorphic encryption: each client lifts its
(pre-weighted) update to 64-bit fixed point and adds pairwise masks that
cancel exactly in the sum modulo 2**64. The server can only combine masked
payloads; it never holds an individual update in the clear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError
from .numeric import SeededRng, gaussian_vector

MASKING_MODES = ("off", "pairwise")
# Fixed-point scale: value = int / 2**FRAC_BITS.
FRAC_BITS = 40
MASK_BITS = 52
_SCALE = float(2 ** FRAC_BITS)


@dataclass(frozen=True)
class PrivacyConfig:
    sigma: float = 0.0
    clip_norm: float | None = 1.0
    masking: str = "off"
    delta_dp: float = 1e-5

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            out.append("privacy.sigma must be a finite value >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            out.append("privacy.clip_norm must be > 0 or null (disabled)")
        if self.masking not in MASKING_MODES:
            out.append(f"privacy.masking must be one of {MASKING_MODES}")
        if not 0.0 < self.delta_dp < 1.0:
            out.append("privacy.delta_dp must lie in (0, 1)")
        return out


def clip_update(delta: np.ndarray, C: float) -> np.ndarray:
    """Scale ``delta`` down to L2 norm ``C`` if it is longer; otherwise return it unchanged."""
    if not C > 0:
        raise ConfigError(f"clip norm must be > 0, got {C}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = _norm(delta)
    if norm <= C:
        return delta
    out = delta * (C / norm)
    # Rounding can leave the norm an ulp above C; shrink until clipping is idempotent.
    shrink = 1.0
    while _norm(out) > C:
        shrink = np.nextafter(shrink, 0.0)
        out = delta * (C / norm) * shrink
    return out


def _norm(x: np.ndarray) -> float:
    return math.sqrt(float(np.dot(x, x)))


def perturb(delta: np.ndarray, sigma: float, rng: SeededRng) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if sigma == 0:
        return delta
    return delta + gaussian_vector(rng, delta.size, sigma)


def epsilon_report(sigma: float, C: float | None, delta_dp: float) -> float | None:
    """Single-round Gaussian-mechanism epsilon, or None when no guarantee holds.

    No composition across rounds is accounted for.
    """
    if C is None or sigma == 0:
        return None
    if sigma < 0 or not 0 < delta_dp < 1:
        raise ConfigError("epsilon_report needs sigma > 0 and 0 < delta < 1")
    return C * math.sqrt(2.0 * math.log(1.25 / delta_dp)) / sigma


@dataclass(frozen=True)
class MaskAgreement:
    """Shared seeds for every unordered client pair (i < j)."""

    seeds: dict[tuple[int, int], int]

    @classmethod
    def setup(cls, client_ids: Iterable[int], master_seed: int, round_: int) -> "MaskAgreement":
        # Stands in for a pairwise key exchange; fresh seeds every round.
        ids = sorted(client_ids)
        rng = SeededRng(master_seed, 0, (0x3A5C, round_))
        seeds = {}
        for a, i in enumerate(ids):
            for j in ids[a + 1:]:
                seeds[(i, j)] = int(rng.integers(0, 2**63 - 1))
        return cls(seeds)

    def seed(self, i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        try:
            return self.seeds[key]
        except KeyError:
            raise ProtocolError(f"no mask seed agreed for clients {key}") from None

    def members(self) -> list[int]:
        return sorted({c for pair in self.seeds for c in pair})


def _prg(seed: int, d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return gen.integers(0, 2**MASK_BITS, size=d, dtype=np.uint64)


def derive_masks(agreement: MaskAgreement, k: int, d: int, peers: Sequence[int] | None = None) -> np.ndarray:
    """Net mask of client ``k``: PRG of pairs above k minus PRG of pairs below, mod 2**64."""
    peers = agreement.members() if peers is None else sorted(peers)
    mask = np.zeros(d, dtype=np.uint64)
    for j in peers:
        if j == k:
            continue
        stream = _prg(agreement.seed(k, j), d)
        if j > k:
            mask += stream
        else:
            mask -= stream
    return mask


def to_fixed(x: np.ndarray) -> np.ndarray:
    scaled = np.rint(np.asarray(x, dtype=np.float64) * _SCALE)
    if np.any(np.abs(scaled) >= 2.0**62):
        raise ConfigError("value too large for the fixed-point masking domain")
    return scaled.astype(np.int64).view(np.uint64)


def from_fixed(words: np.ndarray) -> np.ndarray:
    return words.view(np.int64).astype(np.float64) / _SCALE


class MaskedPayload:
    """A masked fixed-point vector.

    Individual payloads can be serialized and summed, but there is no way to
    turn a single one back into floats: :func:`aggregate_masked` is the only
    exit, and it requires the complete set.
    """

    __slots__ = ("_words",)

    def __init__(self, words: np.ndarray):
        words = np.array(words, dtype=np.uint64, copy=True)
        words.flags.writeable = False
        self._words = words

    @property
    def d(self) -> int:
        return int(self._words.size)

    def to_bytes(self) -> bytes:
        return self._words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MaskedPayload":
        return cls(np.frombuffer(raw, dtype="<u8"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskedPayload):
            return NotImplemented
        return self._words.tobytes() == other._words.tobytes()

    def __repr__(self) -> str:
        return f"MaskedPayload(d={self.d})"


def mask_update(weighted_delta: np.ndarray, agreement: MaskAgreement, k: int,
                peers: Sequence[int] | None = None) -> MaskedPayload:
    """Client side: lift to fixed point and add the client's net mask."""
    words = to_fixed(weighted_delta)
    words += derive_masks(agreement, k, words.size, peers)
    return MaskedPayload(words)


def aggregate_masked(payloads: Sequence[MaskedPayload]) -> np.ndarray:
    """Server side: sum of all masked payloads, masks cancelled, back in floats."""
    if not payloads:
        raise ProtocolError("no masked payloads to aggregate")
    d = payloads[0].d
    total = np.zeros(d, dtype=np.uint64)
    for p in payloads:
        if p.d != d:
            raise ProtocolError("masked payloads differ in length")
        total += p._words
    return from_fixed(total)
