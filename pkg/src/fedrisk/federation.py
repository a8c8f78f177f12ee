"""Client/server federation: local training, weighted averaging, rounds.

Every client uploads the change it made to the broadcast model. The server
forms ``global + sum_k (n_k / n) * delta_k``, which is the sample-weighted
average of the client models. Each upload passes through the pipeline
clip -> compress -> perturb -> mask before it is framed and carried by a
transport.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .compression import CompressionConfig, ErrorFeedbackState, decompress, quantize_payload, sparsify
from .data import SampleBatch, as_batch
from .errors import ConfigError, MetricUndefined, NumericFault, ProtocolError, RoundAborted
from .metrics import compute_accuracy, compute_auc, systemic_detection_score
from .model import ModelConfig, backward, check_loss_kind, forward_batch, init_params, sample_losses
from .numeric import ParamVector, SeededRng
from .privacy import (MaskAgreement, MaskedPayload, PrivacyConfig, aggregate_masked, clip_update,
                      epsilon_report, mask_update, perturb)
from .protocol import (ClientUpdate, PrivacyMeta, SparsePayload, decode_broadcast,
                       decode_control, decode_update, encode_broadcast, encode_control, encode_update,
                       frame_payload_len, make_transport)

log = logging.getLogger(__name__)

TARGET_METRICS = ("accuracy", "auc")
SERVER_STREAM = 0


@dataclass(frozen=True)
class FederationConfig:
    K: int = 5
    T: int = 100
    E: int = 1
    batch_size: int = 64
    learning_rate: float = 0.1
    lam: float = 1e-4
    loss: str = "cross-entropy"
    target_metric: str = "auc"
    target_value: float = 0.85
    patience: int = 3

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("K", "T", "E", "batch_size", "patience"):
            if getattr(self, name) < 1:
                out.append(f"federation.{name} must be >= 1")
        if not self.learning_rate > 0:
            out.append("federation.learning_rate must be > 0")
        if self.lam < 0:
            out.append("federation.lambda must be >= 0")
        if self.loss not in ("cross-entropy", "mse"):
            out.append("federation.loss must be 'cross-entropy' or 'mse'")
        if self.target_metric not in TARGET_METRICS:
            out.append(f"federation.target_metric must be one of {TARGET_METRICS}")
        return out


@dataclass
class RoundReport:
    round: int
    global_objective: float
    val_accuracy: float
    val_auc: float | None
    systemic_auc: float | None
    bytes_up: int = 0
    bytes_down: int = 0
    epsilon: float | None = None

    def metric(self, name: str) -> float:
        value = self.val_auc if name == "auc" else self.val_accuracy
        return float("nan") if value is None else value


class Client:
    """One institution: its shard, its random stream and its error-feedback memory."""

    def __init__(self, client_id: int, shard, master_seed: int):
        self.client_id = int(client_id)
        self.shard: SampleBatch = as_batch(shard)
        if len(self.shard) == 0:
            raise ConfigError(f"client {client_id} has an empty shard")
        self.rng = SeededRng(master_seed, stream=self.client_id + 1)
        self.params: ParamVector | None = None
        self.feedback: ErrorFeedbackState | None = None

    @property
    def n_k(self) -> int:
        return len(self.shard)

    def round_rng(self, round_: int, purpose: int) -> SeededRng:
        return self.rng.substream(round_).substream(purpose)


SHUFFLE, NOISE = 0, 1


def sgd_epochs(params: ParamVector, data: SampleBatch, cfg: FederationConfig, model_cfg: ModelConfig,
               rng: SeededRng, epochs: int) -> ParamVector:
    """Plain mini-batch gradient descent; a batch covering all data is taken in stored order."""
    n = len(data)
    lr = cfg.learning_rate
    for _ in range(epochs):
        if cfg.batch_size >= n:
            params = params.replace(params.data - lr * backward(data, params, model_cfg, cfg.lam, cfg.loss)[1].data)
            continue
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            _, grad = backward(batch, params, model_cfg, cfg.lam, cfg.loss)
            params = params.replace(params.data - lr * grad.data)
    return params


def local_train(client: Client, global_params: ParamVector, cfg: FederationConfig,
                model_cfg: ModelConfig, round_: int = 1) -> ClientUpdate:
    """Start from the global model, run ``cfg.E`` local epochs, return the dense change."""
    if client.params is not None and not client.params.same_layout(global_params):
        raise ProtocolError(f"client {client.client_id} layout does not match the global model")
    try:
        theta = sgd_epochs(global_params, client.shard, cfg, model_cfg,
                           client.round_rng(round_, SHUFFLE), cfg.E)
    except NumericFault as exc:
        raise RoundAborted(round_, client.client_id, exc) from exc
    client.params = theta
    return ClientUpdate(round_, client.client_id, client.n_k, theta.data - global_params.data)


def prepare_upload(client: Client, update: ClientUpdate, privacy: PrivacyConfig,
                   compression: CompressionConfig, *, weight: float | None = None,
                   agreement: MaskAgreement | None = None) -> ClientUpdate:
    """Apply clip -> compress -> perturb -> mask to a raw dense update."""
    delta = update.payload
    clipped = privacy.clip_norm is not None
    if clipped:
        delta = clip_update(delta, privacy.clip_norm)
    noise_rng = client.round_rng(update.round, NOISE)
    masked = privacy.masking == "pairwise"

    if not compression.lossless:
        if masked:
            raise ConfigError("masking cannot be combined with compression")
        if client.feedback is None:
            client.feedback = ErrorFeedbackState.zeros(delta.size)
        sparse = sparsify(delta, compression.ratio, client.feedback)
        sparse.values = perturb(sparse.values, privacy.sigma, noise_rng)
        if compression.quantize == "uniform-8bit":
            sparse = quantize_payload(sparse)
        payload = sparse
    else:
        payload = perturb(delta, privacy.sigma, noise_rng)
        if masked:
            if weight is None or agreement is None:
                raise ProtocolError("masking needs the aggregation weight and a mask agreement")
            payload = mask_update(weight * payload, agreement, client.client_id)
    meta = PrivacyMeta(clipped=clipped, sigma=float(privacy.sigma), masked=masked)
    return ClientUpdate(update.round, client.client_id, update.n_k, payload, meta)


def _dense(payload) -> np.ndarray:
    if isinstance(payload, SparsePayload):
        return decompress(payload)
    if isinstance(payload, MaskedPayload):
        raise ProtocolError("masked payloads can only be combined with aggregate_masked")
    return np.asarray(payload, dtype=np.float64)


def weighted_average(vectors: Sequence[np.ndarray], counts: Sequence[int]) -> np.ndarray:
    """Sample-count-weighted mean, accumulated in the given order.

    Offsets are taken from the first vector so that averaging identical
    vectors returns that vector bit for bit.
    """
    if len(vectors) == 0 or len(vectors) != len(counts):
        raise ProtocolError("need one count per vector and at least one vector")
    if any(c < 1 for c in counts):
        raise ConfigError("sample counts must be >= 1")
    n = sum(counts)
    ref = np.asarray(vectors[0], dtype=np.float64)
    acc = np.zeros_like(ref)
    for v, c in zip(vectors, counts):
        acc += (c / n) * (np.asarray(v, dtype=np.float64) - ref)
    return ref + acc


def _check_updates(updates: Sequence[ClientUpdate], d: int) -> list[ClientUpdate]:
    if not updates:
        raise ProtocolError("no updates to aggregate")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ProtocolError(f"updates from mixed rounds {sorted(rounds)}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids in one round")
    for u in updates:
        if u.d != d:
            raise ProtocolError(f"client {u.client_id} sent {u.d} values, expected {d}")
    return sorted(updates, key=lambda u: u.client_id)


def fed_avg(updates: Sequence[ClientUpdate], global_params: ParamVector) -> ParamVector:
    """``global + sum_k (n_k / n) * delta_k`` over ascending client ids."""
    ordered = _check_updates(updates, len(global_params))
    step = weighted_average([_dense(u.payload) for u in ordered], [u.n_k for u in ordered])
    return global_params.replace(global_params.data + step)


def fed_avg_masked(updates: Sequence[ClientUpdate], global_params: ParamVector) -> ParamVector:
    """Aggregate pre-weighted masked updates; only their sum is ever recovered."""
    ordered = _check_updates(updates, len(global_params))
    if not all(isinstance(u.payload, MaskedPayload) for u in ordered):
        raise ProtocolError("mixed masked and clear payloads")
    return global_params.replace(global_params.data + aggregate_masked([u.payload for u in ordered]))


def mean_loss(params: ParamVector, data: SampleBatch, model_cfg: ModelConfig, kind: str) -> float:
    cache = forward_batch(data.static, data.sequence, params, model_cfg)
    return float(np.mean(sample_losses(cache.prediction, data.targets(model_cfg.task), kind)))


def global_loss(params: ParamVector, shards: Sequence, cfg: FederationConfig, model_cfg: ModelConfig) -> float:
    """Sample-weighted mean of per-shard mean losses (no regularization term)."""
    if not shards:
        raise ConfigError("global_loss needs at least one shard")
    batches = []
    for s in shards:
        if len(s) == 0:
            raise ConfigError("shards must be non-empty")
        batches.append(as_batch(s))
    n = sum(len(b) for b in batches)
    return sum(len(b) / n * mean_loss(params, b, model_cfg, cfg.loss) for b in batches)


def evaluate(params: ParamVector, data: SampleBatch, model_cfg: ModelConfig, kind: str) -> dict:
    cache = forward_batch(data.static, data.sequence, params, model_cfg)
    pred = cache.prediction
    y = data.targets(model_cfg.task)
    out = {
        "loss": float(np.mean(sample_losses(pred, y, kind))),
        "accuracy": compute_accuracy(pred, data.label),
        "auc": None,
        "systemic_auc": None,
    }
    try:
        out["auc"] = compute_auc(pred, data.label)
    except MetricUndefined:
        pass
    try:
        out["systemic_auc"] = systemic_detection_score(pred, data.systemic)
    except MetricUndefined:
        pass
    return out


def convergence_round(values: Sequence[float], target: float, patience: int) -> int | None:
    """First 1-based round ending a run of ``patience`` consecutive values >= target."""
    streak = 0
    for r, v in enumerate(values, start=1):
        streak = streak + 1 if v >= target else 0
        if streak >= patience:
            return r
    return None


class Server:
    def __init__(self, params: ParamVector, validation, model_cfg: ModelConfig, cfg: FederationConfig):
        self.params = params
        self.validation = as_batch(validation)
        self.model_cfg = model_cfg
        self.cfg = cfg

    def aggregate(self, updates: Sequence[ClientUpdate]) -> ParamVector:
        if any(u.privacy.masked for u in updates):
            self.params = fed_avg_masked(updates, self.params)
        else:
            self.params = fed_avg(updates, self.params)
        return self.params

    def evaluate(self, params: ParamVector | None = None) -> dict:
        return evaluate(self.params if params is None else params, self.validation,
                        self.model_cfg, self.cfg.loss)


class Federation:
    """Server plus K clients, advanced one synchronous round at a time."""

    def __init__(self, model_cfg: ModelConfig, cfg: FederationConfig, shards: Sequence, validation,
                 privacy: PrivacyConfig | None = None, compression: CompressionConfig | None = None,
                 master_seed: int = 0, transport: str = "inprocess", parallel: bool = False,
                 init: ParamVector | None = None):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.privacy = privacy or PrivacyConfig()
        self.compression = compression or CompressionConfig()
        check_loss_kind(cfg.loss, model_cfg.task)
        if self.privacy.masking == "pairwise" and not self.compression.lossless:
            raise ConfigError("masking and compression are mutually exclusive")
        if len(shards) != cfg.K:
            raise ConfigError(f"expected {cfg.K} shards, got {len(shards)}")
        self.master_seed = master_seed
        params = init if init is not None else init_params(model_cfg, SeededRng(master_seed, SERVER_STREAM))
        self.server = Server(params, validation, model_cfg, cfg)
        self.clients = [Client(k, shard, master_seed) for k, shard in enumerate(shards)]
        self.transport = make_transport(transport) if isinstance(transport, str) else transport
        self.parallel = parallel
        self.round = 0
        self.epsilon = epsilon_report(self.privacy.sigma, self.privacy.clip_norm, self.privacy.delta_dp)

    @property
    def params(self) -> ParamVector:
        return self.server.params

    def close(self) -> None:
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _client_work(self, client: Client, global_params: ParamVector, t: int,
                     weight: float, agreement: MaskAgreement | None) -> bytes:
        raw = local_train(client, global_params, self.cfg, self.model_cfg, t)
        upload = prepare_upload(client, raw, self.privacy, self.compression,
                                weight=weight, agreement=agreement)
        return encode_update(upload)

    def run_round(self) -> RoundReport:
        t = self.round + 1
        layout = self.server.params.layout
        n_total = sum(c.n_k for c in self.clients)
        masked = self.privacy.masking == "pairwise"

        broadcast = encode_broadcast(t, self.server.params.data)
        bytes_down = 0
        received = []
        for _ in self.clients:
            frame = self.transport.carry(broadcast)
            bytes_down += frame_payload_len(frame)
            _, data = decode_broadcast(frame)
            received.append(ParamVector(data, layout))

        agreement = None
        if masked:
            ids = [c.client_id for c in self.clients]
            agreement = MaskAgreement.setup(ids, self.master_seed, t)
            control = self.transport.carry(encode_control(t, {"n_total": n_total, "peers": ids}))
            n_total = decode_control(control)[1]["n_total"]

        jobs = [(c, g, t, c.n_k / n_total, agreement) for c, g in zip(self.clients, received)]
        if self.parallel and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                frames = list(pool.map(lambda job: self._client_work(*job), jobs))
        else:
            frames = [self._client_work(*job) for job in jobs]

        updates = [decode_update(self.transport.carry(f)) for f in frames]
        bytes_up = sum(u.payload_bytes for u in updates)
        if masked and sum(u.n_k for u in updates) != n_total:
            raise ProtocolError("reported sample counts do not match the announced total")
        self.server.aggregate(updates)
        self.round = t

        ev = self.server.evaluate()
        return RoundReport(t, ev["loss"], ev["accuracy"], ev["auc"], ev["systemic_auc"],
                           bytes_up, bytes_down, self.epsilon)


def run_round(federation: Federation) -> RoundReport:
    return federation.run_round()


@dataclass
class TrainingResult:
    history: list[RoundReport]
    convergence_round: int | None
    initial: dict = field(default_factory=dict)
    params: ParamVector | None = None


def run_training(federation: Federation, rounds: int | None = None,
                 stop_on_convergence: bool = False) -> TrainingResult:
    """Run up to ``rounds`` (default ``cfg.T``) rounds and detect convergence."""
    cfg = federation.cfg
    rounds = cfg.T if rounds is None else rounds
    initial = federation.server.evaluate()
    history: list[RoundReport] = []
    converged = None
    for _ in range(rounds):
        report = federation.run_round()
        history.append(report)
        log.debug("round %d: loss=%.5f auc=%s", report.round, report.global_objective, report.val_auc)
        if converged is None:
            converged = convergence_round([r.metric(cfg.target_metric) for r in history],
                                          cfg.target_value, cfg.patience)
            if converged is not None and stop_on_convergence:
                break
    return TrainingResult(history, converged, initial, federation.params)


def train_centralized(train, validation, model_cfg: ModelConfig, cfg: FederationConfig,
                      master_seed: int = 0, rounds: int | None = None,
                      init: ParamVector | None = None) -> TrainingResult:
    """Pooled-data baseline: one 'round' is ``cfg.E`` epochs over all training data."""
    check_loss_kind(cfg.loss, model_cfg.task)
    data = as_batch(train)
    val = as_batch(validation)
    rounds = cfg.T if rounds is None else rounds
    params = init if init is not None else init_params(model_cfg, SeededRng(master_seed, SERVER_STREAM))
    rng = SeededRng(master_seed, stream=0, path=(0xCE,))
    initial = evaluate(params, val, model_cfg, cfg.loss)
    history = []
    for t in range(1, rounds + 1):
        params = sgd_epochs(params, data, cfg, model_cfg, rng.substream(t), cfg.E)
        ev = evaluate(params, val, model_cfg, cfg.loss)
        history.append(RoundReport(t, ev["loss"], ev["accuracy"], ev["auc"], ev["systemic_auc"]))
    converged = convergence_round([r.metric(cfg.target_metric) for r in history],
                                  cfg.target_value, cfg.patience)
    return TrainingResult(history, converged, initial, params)
