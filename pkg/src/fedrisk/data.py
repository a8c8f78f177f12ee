"""Synthetic institution-level risk data, non-IID sharding and CSV I/O.

The generator produces records with a sparse linear signal in the static
features, a trend signal in an AR(1) temporal sequence, per-market offsets
and noise levels, and optional systemic shock events shared across all
institutions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .numeric import SeededRng, sigmoid

MARKETS = ("equity", "bond", "commodity", "crypto", "forex")

# Per-market logit noise scale. Crypto is twice equity; forex sits between.
MARKET_NOISE = {"equity": 0.5, "bond": 0.5, "commodity": 0.6, "forex": 0.75, "crypto": 1.0}
MARKET_OFFSET = {"equity": 0.0, "bond": -0.3, "commodity": 0.2, "forex": -0.2, "crypto": 0.4}
# Per-step additive drift of the temporal walk.
MARKET_DRIFT = {"equity": 0.0, "bond": -0.04, "commodity": 0.04, "forex": -0.08, "crypto": 0.12}

AR_COEF = 0.8
N_ACTIVE = 6
TREND_COEF = 1.0
# Chosen once so the default generator yields roughly balanced labels.
INTERCEPT = 0.0


@dataclass(eq=False)
class SampleRecord:
    id: int
    static: np.ndarray
    sequence: np.ndarray
    label: int
    risk_score: float
    market: str
    systemic: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.market == other.market
            and self.systemic == other.systemic
            and np.float64(self.risk_score).tobytes() == np.float64(other.risk_score).tobytes()
            and self.static.shape == other.static.shape
            and self.static.tobytes() == other.static.tobytes()
            and self.sequence.shape == other.sequence.shape
            and self.sequence.tobytes() == other.sequence.tobytes()
        )


@dataclass(eq=False)
class SampleBatch:
    """Column-stacked view of a list of records, used by the model and metrics."""

    ids: np.ndarray
    static: np.ndarray       # (n, d_static)
    sequence: np.ndarray     # (n, seq_len, d_temporal)
    label: np.ndarray        # (n,) float 0/1
    risk_score: np.ndarray   # (n,)
    market: np.ndarray       # (n,) str
    systemic: np.ndarray     # (n,) int

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "SampleBatch":
        if len(records) == 0:
            raise ConfigError("cannot stack an empty record list")
        return cls(
            ids=np.array([r.id for r in records], dtype=np.int64),
            static=np.stack([r.static for r in records]).astype(np.float64),
            sequence=np.stack([r.sequence for r in records]).astype(np.float64),
            label=np.array([r.label for r in records], dtype=np.float64),
            risk_score=np.array([r.risk_score for r in records], dtype=np.float64),
            market=np.array([r.market for r in records]),
            systemic=np.array([r.systemic for r in records], dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.ids[idx], self.static[idx], self.sequence[idx], self.label[idx],
            self.risk_score[idx], self.market[idx], self.systemic[idx],
        )

    def targets(self, task: str) -> np.ndarray:
        return self.risk_score if task == "regression" else self.label


def as_batch(data) -> SampleBatch:
    if isinstance(data, SampleBatch):
        return data
    if isinstance(data, SampleRecord):
        return SampleBatch.from_records([data])
    return SampleBatch.from_records(list(data))


@dataclass
class GeneratorConfig:
    n: int = 20000
    seed: int = 0
    market_mix: dict[str, float] = field(default_factory=lambda: {m: 0.2 for m in MARKETS})
    noise_scale: dict[str, float] = field(default_factory=lambda: dict(MARKET_NOISE))
    systemic_event_rate: float = 0.05
    coef_seed: int = 1234
    d_static: int = 16
    seq_len: int = 12
    d_temporal: int = 4

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.n < 1:
            out.append("generator.n must be >= 1")
        unknown = set(self.market_mix) - set(MARKETS)
        if unknown:
            out.append(f"generator.market_mix has unknown markets {sorted(unknown)}")
        if any(p < 0 for p in self.market_mix.values()):
            out.append("generator.market_mix proportions must be >= 0")
        if abs(sum(self.market_mix.values()) - 1.0) > 1e-9:
            out.append("generator.market_mix proportions must sum to 1")
        missing = set(self.market_mix) - set(self.noise_scale)
        if missing:
            out.append(f"generator.noise_scale missing markets {sorted(missing)}")
        if any(s < 0 for s in self.noise_scale.values()):
            out.append("generator.noise_scale values must be >= 0")
        if not 0.0 <= self.systemic_event_rate <= 0.1:
            out.append("generator.systemic_event_rate must lie in [0, 0.1]")
        if self.d_static < N_ACTIVE:
            out.append(f"generator.d_static must be >= {N_ACTIVE}")
        if self.seq_len < 2 or self.d_temporal < 1:
            out.append("generator.seq_len must be >= 2 and d_temporal >= 1")
        return out


@dataclass(frozen=True)
class TrueCoefficients:
    beta: np.ndarray
    shock: np.ndarray


def true_coefficients(cfg: GeneratorConfig) -> TrueCoefficients:
    rng = SeededRng(cfg.coef_seed, 0)
    beta = np.zeros(cfg.d_static)
    support = np.sort(rng.generator.choice(cfg.d_static, N_ACTIVE, replace=False))
    signs = np.where(rng.random(N_ACTIVE) < 0.5, -1.0, 1.0)
    beta[support] = signs * rng.uniform(0.6, 1.2, N_ACTIVE)
    shock = 0.5 * rng.normal(cfg.d_static)
    shock[support] = 1.5 * signs
    return TrueCoefficients(beta, shock)


def sequence_trend(seq: np.ndarray) -> np.ndarray:
    """Mean over channels of (last three steps mean - first three steps mean)."""
    w = min(3, seq.shape[-2] // 2)
    return (seq[..., -w:, :].mean(axis=-2) - seq[..., :w, :].mean(axis=-2)).mean(axis=-1)


def generate(cfg: GeneratorConfig) -> list[SampleRecord]:
    coef = true_coefficients(cfg)
    rng = SeededRng(cfg.seed, 0)
    n = cfg.n

    names = [m for m in MARKETS if cfg.market_mix.get(m, 0.0) > 0]
    probs = np.array([cfg.market_mix[m] for m in names])
    market_idx = rng.generator.choice(len(names), size=n, p=probs / probs.sum())
    market = np.array(names)[market_idx]

    static = rng.normal((n, cfg.d_static))
    drift = np.array([MARKET_DRIFT[m] for m in names])[market_idx]
    seq = np.empty((n, cfg.seq_len, cfg.d_temporal))
    seq[:, 0, :] = rng.normal((n, cfg.d_temporal))
    innovations = 0.5 * rng.normal((n, cfg.seq_len - 1, cfg.d_temporal))
    for t in range(1, cfg.seq_len):
        seq[:, t, :] = AR_COEF * seq[:, t - 1, :] + drift[:, None] + innovations[:, t - 1, :]

    systemic = (rng.random(n) < cfg.systemic_event_rate).astype(np.int64)
    static = static + systemic[:, None] * coef.shock[None, :]

    offset = np.array([MARKET_OFFSET[m] for m in names])[market_idx]
    noise = np.array([cfg.noise_scale[m] for m in names])[market_idx] * rng.normal(n)
    logit = static @ coef.beta + TREND_COEF * sequence_trend(seq) + offset + INTERCEPT + noise
    risk = sigmoid(logit)
    risk = np.where(systemic == 1, np.maximum(risk, 0.5), risk)
    label = (risk >= 0.5).astype(np.int64)

    return [
        SampleRecord(
            id=i,
            static=static[i].copy(),
            sequence=seq[i].copy(),
            label=int(label[i]),
            risk_score=float(risk[i]),
            market=str(market[i]),
            systemic=int(systemic[i]),
        )
        for i in range(n)
    ]


@dataclass
class ShardSpec:
    K: int = 5
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.K < 1:
            out.append("shards.K must be >= 1")
        if not self.alpha > 0:
            out.append("shards.alpha must be > 0")
        return out


def _dirichlet_split(labels: np.ndarray, K: int, alpha: float, rng: SeededRng) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        props = rng.dirichlet(np.full(K, alpha))
        cuts = np.round(np.cumsum(props)[:-1] * members.size).astype(np.int64)
        for k, chunk in enumerate(np.split(members, cuts)):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def partition_non_iid(data: Sequence[SampleRecord], spec: ShardSpec,
                      max_attempts: int = 1000) -> list[list[SampleRecord]]:
    """Split records across ``spec.K`` clients with per-label Dirichlet proportions.

    Assignments leaving a client empty are redrawn from the same stream.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("cannot partition an empty dataset")
    if spec.K > n:
        raise ConfigError(f"K={spec.K} exceeds the number of samples ({n})")
    if spec.K == 1:
        return [list(data)]
    labels = np.array([r.label for r in data])
    rng = SeededRng(spec.seed, 0, (0x5A4D,))
    for _ in range(max_attempts):
        idx = _dirichlet_split(labels, spec.K, spec.alpha, rng)
        if all(part.size > 0 for part in idx):
            return [[data[i] for i in part] for part in idx]
    raise ConfigError(f"could not draw a partition without empty shards in {max_attempts} attempts")


def train_val_split(data: Sequence[SampleRecord], val_fraction: float = 0.2,
                    seed: int = 0) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Hold out ``val_fraction`` of every (label, market) stratum."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in (0, 1)")
    rng = SeededRng(seed, 0, (0x5E1,))
    strata: dict[tuple[int, str], list[int]] = {}
    for i, r in enumerate(data):
        strata.setdefault((r.label, r.market), []).append(i)
    val_idx = []
    for key in sorted(strata):
        members = np.array(strata[key])
        members = members[rng.permutation(members.size)]
        val_idx.extend(members[: int(round(val_fraction * members.size))].tolist())
    val_set = set(val_idx)
    train = [r for i, r in enumerate(data) if i not in val_set]
    val = [data[i] for i in sorted(val_set)]
    return train, val


# ---------------------------------------------------------------- CSV

FIXED_COLUMNS = ("id", "market", "label", "risk_score", "systemic")


def csv_header(d_static: int, seq_len: int, d_temporal: int) -> list[str]:
    cols = list(FIXED_COLUMNS)
    cols += [f"s{j}" for j in range(d_static)]
    cols += [f"t{t}_c{c}" for t in range(seq_len) for c in range(d_temporal)]
    return cols


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(data: Sequence[SampleRecord], path, *, dims: tuple[int, int, int] | None = None) -> None:
    """Write records to ``path``.

    ``dims`` = (d_static, seq_len, d_temporal) is only needed for an empty
    dataset; otherwise it is taken from the first record.
    """
    if data:
        dims = (data[0].static.shape[0], *data[0].sequence.shape)
    elif dims is None:
        dims = (0, 0, 0)
    header = csv_header(*dims)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in data:
            writer.writerow(
                [str(r.id), r.market, str(r.label), _fmt(r.risk_score), str(r.systemic)]
                + [_fmt(v) for v in r.static]
                + [_fmt(v) for v in r.sequence.reshape(-1)]
            )


def _infer_dims(header: list[str]) -> tuple[int, int, int]:
    missing = [c for c in FIXED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing columns {missing}")
    d_static = sum(1 for c in header if c.startswith("s") and c[1:].isdigit())
    steps, chans = set(), set()
    for c in header:
        if c.startswith("t") and "_c" in c:
            t, _, ch = c[1:].partition("_c")
            if t.isdigit() and ch.isdigit():
                steps.add(int(t))
                chans.add(int(ch))
    dims = (d_static, len(steps), len(chans))
    expected = csv_header(*dims)
    if header != expected:
        missing = [c for c in expected if c not in header]
        if missing:
            raise SchemaError(f"missing columns {missing[:5]}")
        raise SchemaError("columns are not in the documented order")
    return dims


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(line, f"column '{col}': not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(line, f"column '{col}': non-finite value {text!r}")
    return value


def _parse_int(text: str, line: int, col: str, allowed: Iterable[int] | None = None) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(line, f"column '{col}': not an integer: {text!r}") from None
    if allowed is not None and value not in allowed:
        raise ParseError(line, f"column '{col}': value {value} not allowed")
    return value


def read_csv(path) -> list[SampleRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("missing header row") from None
        d_static, seq_len, d_temporal = _infer_dims(header)
        width = len(header)
        records = []
        for row in reader:
            line = reader.line_num
            if len(row) != width:
                raise ParseError(line, f"expected {width} fields, found {len(row)}")
            market = row[1]
            if market not in MARKETS:
                raise ParseError(line, f"unknown market {market!r}")
            feats = [_parse_float(v, line, header[5 + j]) for j, v in enumerate(row[5:])]
            records.append(SampleRecord(
                id=_parse_int(row[0], line, "id"),
                static=np.array(feats[:d_static], dtype=np.float64),
                sequence=np.array(feats[d_static:], dtype=np.float64).reshape(seq_len, d_temporal),
                label=_parse_int(row[2], line, "label", (0, 1)),
                risk_score=_parse_float(row[3], line, "risk_score"),
                market=market,
                systemic=_parse_int(row[4], line, "systemic", (0, 1)),
            ))
    return records

