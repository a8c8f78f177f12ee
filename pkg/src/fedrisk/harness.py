"""Experiment presets, JSON config loading and metrics file emission.

Presets:

* ``compare`` - centralized pooled training, plain FedAvg with a mean-pooling
  model, FedAvg with the attention model, and the full pipeline
  (attention + clipping/noise + compression).
* ``compression-sweep`` - the full pipeline at every compression ratio in
  the sweep list, reporting rounds and uploaded bytes to the target metric.
* ``cross-market`` - train on a subset of markets, evaluate AUC per market.
* ``custom`` - a single federated run with the configured settings.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compression import RATIOS, CompressionConfig
from .data import MARKETS, GeneratorConfig, SampleBatch, ShardSpec, generate, partition_non_iid, read_csv, train_val_split
from .errors import ConfigError, MetricUndefined, SchemaError
from .federation import (Federation, FederationConfig, RoundReport, TrainingResult, run_training,
                         train_centralized)
from .metrics import compute_auc
from .model import ModelConfig, predict
from .privacy import PrivacyConfig

log = logging.getLogger(__name__)

PRESETS = ("compare", "compression-sweep", "cross-market", "custom")
METRICS_COLUMNS = ["preset", "variant", "seed", "round", "global_loss", "accuracy", "auc",
                   "systemic_auc", "bytes_up_cum", "converged_round"]
SUMMARY_COLUMNS = ["preset", "variant", "seed", "rounds", "final_loss", "final_accuracy", "final_auc",
                   "final_systemic_auc", "converged_round", "bytes_up_total", "bytes_up_to_target", "epsilon"]
MARKET_COLUMNS = ["preset", "variant", "seed", "market", "auc", "n"]
IN_DOMAIN = ("equity", "bond", "commodity")
# Preset defaults that differ from the library defaults.
_SECTION_DEFAULTS = {"privacy": {"sigma": 0.001, "clip_norm": 1.0}, "compression": {"ratio": 4}}


def _default_privacy() -> PrivacyConfig:
    return PrivacyConfig(**_SECTION_DEFAULTS["privacy"])


@dataclass
class ExperimentConfig:
    preset: str = "compare"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    shards: ShardSpec = field(default_factory=ShardSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    privacy: PrivacyConfig = field(default_factory=_default_privacy)
    compression: CompressionConfig = field(
        default_factory=lambda: CompressionConfig(**_SECTION_DEFAULTS["compression"]))
    sweep: list[int] = field(default_factory=lambda: list(RATIOS))
    train_markets: list[str] = field(default_factory=lambda: list(IN_DOMAIN))
    master_seed: int = 0
    repetitions: int = 5
    val_fraction: float = 0.2
    transport: str = "inprocess"
    data_path: str | None = None
    output_dir: str | None = None

    def problems(self) -> list[str]:
        return self.field_problems() + self.section_problems()

    def field_problems(self) -> list[str]:
        """Checks on the top-level fields alone."""
        out = []
        if self.preset not in PRESETS:
            out.append(f"preset must be one of {PRESETS}")
        if self.repetitions < 1:
            out.append("repetitions must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            out.append("val_fraction must lie in (0, 1)")
        if self.transport not in ("inprocess", "loopback"):
            out.append("transport must be 'inprocess' or 'loopback'")
        bad = [r for r in self.sweep if r not in RATIOS]
        if bad or not self.sweep:
            out.append(f"sweep must be a non-empty list drawn from {RATIOS}")
        unknown = [m for m in self.train_markets if m not in MARKETS]
        if unknown or not self.train_markets:
            out.append(f"train_markets must be a non-empty subset of {MARKETS}")
        return out

    def section_problems(self) -> list[str]:
        """Consistency checks across the nested configs."""
        out = []
        if self.shards.K != self.federation.K:
            out.append("shards.K and federation.K disagree")
        g, m = self.generator, self.model
        if (g.d_static, g.seq_len, g.d_temporal) != (m.d_static, m.seq_len, m.d_temporal):
            out.append("model dimensions must match the generator's d_static/seq_len/d_temporal")
        if self.privacy.masking == "pairwise":
            if self.preset == "compression-sweep" and any(r != 1 for r in self.sweep):
                out.append("masking cannot be combined with compression ratios > 1")
            elif self.preset != "compression-sweep" and not self.compression.lossless:
                out.append("masking cannot be combined with compression")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)


_SECTIONS = {
    "generator": GeneratorConfig,
    "shards": ShardSpec,
    "model": ModelConfig,
    "federation": FederationConfig,
    "privacy": PrivacyConfig,
    "compression": CompressionConfig,
}
_ALIASES = {"federation": {"lambda": "lam"}}

_SCALARS = {"preset", "sweep", "train_markets", "master_seed", "repetitions", "val_fraction",
            "transport", "data_path", "output_dir"}


def _build_section(name: str, raw, problems: list[str], overrides: dict | None = None):
    cls = _SECTIONS[name]
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected an object")
        return None
    aliases = _ALIASES.get(name, {})
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = aliases.get(key, key)
        if key in aliases.values() or attr not in known:
            problems.append(f"{name}: unknown key {key!r}")
            continue
        kwargs[attr] = value
    for key, value in {**_SECTION_DEFAULTS.get(name, {}), **(overrides or {})}.items():
        kwargs.setdefault(key, value)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        problems.extend(exc.problems)
    except TypeError as exc:
        problems.append(f"{name}: invalid value ({exc})")
    return None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`; all problems are reported together."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    problems: list[str] = []
    for key in raw:
        if key not in _SECTIONS and key not in _SCALARS:
            problems.append(f"unknown key {key!r}")

    sections = {k: raw.get(k, {}) for k in _SECTIONS}
    fed_raw = sections["federation"] if isinstance(sections["federation"], dict) else {}
    shard_raw = sections["shards"] if isinstance(sections["shards"], dict) else {}
    # K may be given in either section.
    K = shard_raw.get("K", fed_raw.get("K"))
    gen_raw = sections["generator"] if isinstance(sections["generator"], dict) else {}
    dims = {k: gen_raw[k] for k in ("d_static", "seq_len", "d_temporal") if k in gen_raw}

    built = {}
    for name in _SECTIONS:
        overrides = {}
        if name in ("federation", "shards") and K is not None:
            overrides["K"] = K
        if name == "model":
            overrides.update(dims)
        built[name] = _build_section(name, sections[name], problems, overrides)

    kwargs = {k: raw[k] for k in _SCALARS if k in raw}
    sections_ok = not problems
    try:
        if sections_ok:
            cfg = ExperimentConfig(**built, **kwargs)
            problems.extend(cfg.problems())
        else:
            problems.extend(ExperimentConfig(**kwargs).field_problems())
    except TypeError as exc:
        problems.append(f"invalid value ({exc})")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return config_from_dict(raw)


# ------------------------------------------------------------------ running

@dataclass
class RunRecord:
    variant: str
    seed: int
    result: TrainingResult
    epsilon: float | None = None
    market_auc: dict[str, tuple[float | None, int]] = field(default_factory=dict)


def _prepare_data(cfg: ExperimentConfig, seed: int):
    if cfg.data_path:
        data = read_csv(cfg.data_path)
    else:
        data = generate(dataclasses.replace(cfg.generator, seed=seed))
    return train_val_split(data, cfg.val_fraction, seed)


def _federate(cfg: ExperimentConfig, train, val, seed: int, model: ModelConfig,
              privacy: PrivacyConfig, compression: CompressionConfig) -> tuple[TrainingResult, float | None]:
    shards = partition_non_iid(train, dataclasses.replace(cfg.shards, seed=seed))
    with Federation(model, cfg.federation, shards, val, privacy, compression,
                    master_seed=seed, transport=cfg.transport) as fed:
        return run_training(fed), fed.epsilon


_NO_PRIVACY = PrivacyConfig(sigma=0.0, clip_norm=None)
_NO_COMPRESSION = CompressionConfig(1, "off")


def _run_repetition(cfg: ExperimentConfig, rep: int) -> list[RunRecord]:
    seed = cfg.master_seed + rep
    train, val = _prepare_data(cfg, seed)
    records = []
    if cfg.preset == "compare":
        res = train_centralized(train, val, cfg.model, cfg.federation, seed)
        records.append(RunRecord("centralized", seed, res))
        plain_model = dataclasses.replace(cfg.model, attention=False)
        res, eps = _federate(cfg, train, val, seed, plain_model, _NO_PRIVACY, _NO_COMPRESSION)
        records.append(RunRecord("fedavg-plain", seed, res, eps))
        res, eps = _federate(cfg, train, val, seed, cfg.model, _NO_PRIVACY, _NO_COMPRESSION)
        records.append(RunRecord("fedavg-attn", seed, res, eps))
        res, eps = _federate(cfg, train, val, seed, cfg.model, cfg.privacy, cfg.compression)
        records.append(RunRecord("ours", seed, res, eps))
    elif cfg.preset == "compression-sweep":
        for ratio in cfg.sweep:
            comp = CompressionConfig(ratio, cfg.compression.quantize if ratio > 1 else "off")
            res, eps = _federate(cfg, train, val, seed, cfg.model, cfg.privacy, comp)
            records.append(RunRecord(f"r{ratio}", seed, res, eps))
    elif cfg.preset == "cross-market":
        keep = set(cfg.train_markets)
        in_train = [r for r in train if r.market in keep]
        in_val = [r for r in val if r.market in keep]
        shards = partition_non_iid(in_train, dataclasses.replace(cfg.shards, seed=seed))
        with Federation(cfg.model, cfg.federation, shards, in_val, cfg.privacy, cfg.compression,
                        master_seed=seed, transport=cfg.transport) as fed:
            res = run_training(fed)
            rec = RunRecord("ours", seed, res, fed.epsilon)
        rec.market_auc = market_aucs(res.params, val, cfg.model)
        records.append(rec)
    else:
        res, eps = _federate(cfg, train, val, seed, cfg.model, cfg.privacy, cfg.compression)
        records.append(RunRecord("custom", seed, res, eps))
    return records


def market_aucs(params, validation, model: ModelConfig) -> dict[str, tuple[float | None, int]]:
    batch = SampleBatch.from_records(validation)
    scores = predict(batch, params, model)
    out = {}
    for m in MARKETS:
        sel = batch.market == m
        try:
            out[m] = (compute_auc(scores[sel], batch.label[sel]), int(sel.sum()))
        except MetricUndefined:
            out[m] = (None, int(sel.sum()))
    return out


def thread_count() -> int:
    raw = os.environ.get("FEDRISK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDRISK_THREADS must be an integer, got {raw!r}") from None


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> list[RunRecord]:
    cfg.validate()
    threads = thread_count() if threads is None else threads
    reps = range(cfg.repetitions)
    if threads > 1 and cfg.repetitions > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(lambda r: _run_repetition(cfg, r), reps))
    else:
        batches = [_run_repetition(cfg, r) for r in reps]
    return [rec for batch in batches for rec in batch]


# ------------------------------------------------------------------ output

def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _bytes_to_target(history: list[RoundReport], converged: int | None) -> int | None:
    if converged is None:
        return None
    return sum(h.bytes_up for h in history[:converged])


def metrics_rows(preset: str, records: list[RunRecord]) -> list[list[str]]:
    rows = []
    for rec in records:
        cum = 0
        for h in rec.result.history:
            cum += h.bytes_up
            rows.append([preset, rec.variant, str(rec.seed), str(h.round), _num(h.global_objective),
                         _num(h.val_accuracy), _num(h.val_auc), _num(h.systemic_auc), str(cum),
                         _num(rec.result.convergence_round)])
    return rows


def summary_rows(preset: str, records: list[RunRecord]) -> list[list[str]]:
    rows = []
    for rec in records:
        hist = rec.result.history
        last = hist[-1]
        rows.append([preset, rec.variant, str(rec.seed), str(len(hist)), _num(last.global_objective),
                     _num(last.val_accuracy), _num(last.val_auc), _num(last.systemic_auc),
                     _num(rec.result.convergence_round), str(sum(h.bytes_up for h in hist)),
                     _num(_bytes_to_target(hist, rec.result.convergence_round)), _num(rec.epsilon)])
    return rows


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def aggregate_summary(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation of summary columns per (preset, variant)."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["preset"], row["variant"]), []).append(row)
    out = []
    for (preset, variant), members in groups.items():
        entry = {"preset": preset, "variant": variant, "runs": len(members)}
        for col in ("final_loss", "final_accuracy", "final_auc", "final_systemic_auc",
                    "converged_round", "bytes_up_to_target", "epsilon"):
            vals = [float(m[col]) for m in members if m[col] not in ("", None)]
            entry[f"{col}_mean"] = statistics.fmean(vals) if vals else None
            entry[f"{col}_std"] = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
            entry[f"{col}_count"] = len(vals)
        out.append(entry)
    return out


def write_outputs(cfg: ExperimentConfig, records: list[RunRecord], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "summary": out / "summary.csv", "aggregate": out / "summary.json"}
    _write_csv(paths["metrics"], METRICS_COLUMNS, metrics_rows(cfg.preset, records))
    summary = summary_rows(cfg.preset, records)
    _write_csv(paths["summary"], SUMMARY_COLUMNS, summary)
    if cfg.preset == "cross-market":
        paths["markets"] = out / "markets.csv"
        rows = [[cfg.preset, rec.variant, str(rec.seed), m, _num(auc), str(n)]
                for rec in records for m, (auc, n) in rec.market_auc.items()]
        _write_csv(paths["markets"], MARKET_COLUMNS, rows)
    agg = aggregate_summary([dict(zip(SUMMARY_COLUMNS, r)) for r in summary])
    paths["aggregate"].write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def run_preset(cfg: ExperimentConfig, out_dir=None, threads: int | None = None) -> dict[str, Path]:
    out_dir = out_dir or cfg.output_dir
    if out_dir is None:
        raise ConfigError("no output directory given")
    records = run_experiment(cfg, threads)
    return write_outputs(cfg, records, out_dir)


def read_summary(in_dir) -> list[dict]:
    path = Path(in_dir) / "summary.csv"
    if not path.exists():
        raise FileNotFoundError(f"no summary.csv in {in_dir}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_COLUMNS:
            raise SchemaError("summary.csv does not have the expected columns")
        return list(reader)


def report(in_dir, fmt: str = "csv") -> str:
    agg = aggregate_summary(read_summary(in_dir))
    if fmt == "json":
        return json.dumps(agg, indent=2, sort_keys=True) + "\n"
    if fmt != "csv":
        raise ConfigError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    cols = list(agg[0].keys()) if agg else ["preset", "variant", "runs"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for entry in agg:
        writer.writerow({k: "" if v is None else v for k, v in entry.items()})
    return buf.getvalue()
