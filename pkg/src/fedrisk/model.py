"""Local risk model: additive feature attention plus a tanh recurrent encoder.

For one sample with static features ``x`` (length d_static) and a sequence
``X`` (seq_len x d_temporal)::

    e_j   = x_j * E[j]                       per-feature embedding
    s_j   = u . tanh(W_att e_j + b_att)      attention score
    a     = softmax(s)
    ctx   = sum_j a_j e_j
    h_t   = tanh(W_h h_{t-1} + W_x X_t + b_h),  h_0 = 0
    z     = w_out . [ctx, h_T] + b_out

Binary tasks emit sigmoid(z); regression emits z. Gradients are written out
by hand and checked against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SampleBatch, SampleRecord, as_batch
from .errors import ConfigError, NumericFault
from .numeric import ParamVector, SeededRng, build_layout, l2_norm_sq, sigmoid, softmax

TASKS = ("binary-classification", "regression")
LOSSES = ("cross-entropy", "mse")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    d_static: int = 16
    d_temporal: int = 4
    seq_len: int = 12
    d_embed: int = 8
    d_hidden: int = 16
    task: str = "binary-classification"
    # False swaps attention for mean pooling over feature embeddings.
    attention: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("d_static", "d_temporal", "seq_len", "d_embed", "d_hidden"):
            if getattr(self, name) < 1:
                out.append(f"model.{name} must be >= 1")
        if self.task not in TASKS:
            out.append(f"model.task must be one of {TASKS}")
        return out

    def layout(self):
        de, dh = self.d_embed, self.d_hidden
        shapes = [("E", (self.d_static, de))]
        if self.attention:
            shapes += [("W_att", (de, de)), ("b_att", (de,)), ("u", (de,))]
        shapes += [
            ("W_x", (dh, self.d_temporal)),
            ("W_h", (dh, dh)),
            ("b_h", (dh,)),
            ("w_out", (de + dh,)),
            ("b_out", (1,)),
        ]
        return build_layout(shapes)

    @property
    def n_params(self) -> int:
        return sum(e.size for e in self.layout())


BIASES = ("b_att", "b_h", "b_out")


def init_params(config: ModelConfig, rng: SeededRng) -> ParamVector:
    """Glorot-uniform weights, zero biases.

    Vectors that act as weights (``u``, ``w_out``) are treated as 1 x n
    matrices when computing the bound.
    """
    layout = config.layout()
    data = np.zeros(sum(e.size for e in layout))
    for e in layout:
        if e.name in BIASES:
            continue
        fan_in, fan_out = e.shape if len(e.shape) == 2 else (e.shape[0], 1)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        data[e.offset:e.offset + e.size] = rng.uniform(-bound, bound, e.size)
    return ParamVector(data, layout)


def _check(x: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericFault(layer)


def feature_attention(x_static: np.ndarray, params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample attention pooling; returns (context, weights)."""
    x_static = np.asarray(x_static, dtype=np.float64)
    E = params.view("E")
    if x_static.ndim != 1 or x_static.shape[0] != E.shape[0]:
        raise ConfigError(f"expected {E.shape[0]} static features, got shape {x_static.shape}")
    emb = x_static[:, None] * E
    if "u" not in params:
        weights = np.full(E.shape[0], 1.0 / E.shape[0])
    else:
        scores = np.tanh(emb @ params.view("W_att").T + params.view("b_att")) @ params.view("u")
        weights = softmax(scores)
    return weights @ emb, weights


def temporal_encode(x_seq: np.ndarray, params: ParamVector) -> np.ndarray:
    """Final hidden state of the recurrent encoder for one sequence."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    W_x, W_h, b_h = params.view("W_x"), params.view("W_h"), params.view("b_h")
    if x_seq.ndim != 2 or x_seq.shape[1] != W_x.shape[1]:
        raise ConfigError(f"expected sequence with {W_x.shape[1]} channels, got shape {x_seq.shape}")
    h = np.zeros(W_h.shape[0])
    for x_t in x_seq:
        h = np.tanh(W_h @ h + W_x @ x_t + b_h)
    return h


@dataclass
class ForwardCache:
    emb: np.ndarray          # (B, d_static, d_embed)
    att_hidden: np.ndarray | None   # (B, d_static, d_embed), tanh activations
    weights: np.ndarray      # (B, d_static)
    context: np.ndarray      # (B, d_embed)
    hidden: np.ndarray       # (B, seq_len + 1, d_hidden), hidden[:, 0] = h_0
    z: np.ndarray            # (B,)
    prediction: np.ndarray   # (B,)


def forward_batch(static: np.ndarray, sequence: np.ndarray, params: ParamVector,
                  config: ModelConfig) -> ForwardCache:
    if static.ndim != 2 or static.shape[1] != config.d_static:
        raise ConfigError(f"static features must have shape (n, {config.d_static}), got {static.shape}")
    if sequence.shape[1:] != (config.seq_len, config.d_temporal):
        raise ConfigError(
            f"sequence must have shape (n, {config.seq_len}, {config.d_temporal}), got {sequence.shape}")
    B = static.shape[0]
    E = params.view("E")
    emb = static[:, :, None] * E[None, :, :]
    _check(emb, "embedding")
    if config.attention:
        att_hidden = np.tanh(emb @ params.view("W_att").T + params.view("b_att"))
        scores = att_hidden @ params.view("u")
        _check(scores, "attention")
        weights = softmax(scores, axis=1)
    else:
        att_hidden = None
        weights = np.full((B, config.d_static), 1.0 / config.d_static)
    context = np.einsum("bj,bje->be", weights, emb)

    W_x, W_h, b_h = params.view("W_x"), params.view("W_h"), params.view("b_h")
    hidden = np.zeros((B, config.seq_len + 1, config.d_hidden))
    drive = sequence @ W_x.T + b_h
    for t in range(config.seq_len):
        hidden[:, t + 1] = np.tanh(hidden[:, t] @ W_h.T + drive[:, t])
    _check(hidden, "recurrent")

    w_out = params.view("w_out")
    de = config.d_embed
    z = context @ w_out[:de] + hidden[:, -1] @ w_out[de:] + params.view("b_out")[0]
    _check(z, "output")
    pred = sigmoid(z) if config.task == "binary-classification" else z
    return ForwardCache(emb, att_hidden, weights, context, hidden, z, pred)


def forward(x: SampleRecord, params: ParamVector, config: ModelConfig) -> tuple[float, ForwardCache]:
    cache = forward_batch(x.static[None, :], x.sequence[None, :, :], params, config)
    return float(cache.prediction[0]), cache


def predict(data, params: ParamVector, config: ModelConfig) -> np.ndarray:
    batch = as_batch(data)
    return forward_batch(batch.static, batch.sequence, params, config).prediction


def check_loss_kind(kind: str, task: str) -> None:
    if kind not in LOSSES:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSSES}")
    if kind == "cross-entropy" and task != "binary-classification":
        raise ConfigError("cross-entropy loss requires the binary-classification task")


def sample_losses(pred: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "mse":
        return (pred - y) ** 2
    if kind == "cross-entropy":
        p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
        return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    raise ConfigError(f"unknown loss kind {kind!r}")


def sample_loss(prediction: float, y: float, kind: str, task: str = "binary-classification") -> float:
    check_loss_kind(kind, task)
    if task == "binary-classification" and y not in (0, 1):
        raise ConfigError(f"classification label must be 0 or 1, got {y}")
    return float(sample_losses(np.array([prediction], dtype=np.float64), np.array([y], dtype=np.float64), kind)[0])


def _objective(cache: ForwardCache, y: np.ndarray, params: ParamVector, lam: float, kind: str) -> float:
    data_loss = float(np.mean(sample_losses(cache.prediction, y, kind)))
    return data_loss + lam * l2_norm_sq(params)


def local_objective(params: ParamVector, batch, lam: float, kind: str, config: ModelConfig) -> float:
    """Mean sample loss plus ``lam * ||params||^2``."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    check_loss_kind(kind, config.task)
    batch = as_batch(batch)
    cache = forward_batch(batch.static, batch.sequence, params, config)
    return _objective(cache, batch.targets(config.task), params, lam, kind)


def _output_grad(cache: ForwardCache, y: np.ndarray, kind: str, task: str) -> np.ndarray:
    """d(sample loss)/dz per sample."""
    p = cache.prediction
    if task == "regression":
        return 2.0 * (p - y)
    if kind == "mse":
        return 2.0 * (p - y) * p * (1.0 - p)
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
    return np.where(inside, p - y, 0.0)


def backward(batch, params: ParamVector, config: ModelConfig, lam: float,
             kind: str) -> tuple[float, ParamVector]:
    """Objective value and its gradient with respect to every parameter."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    check_loss_kind(kind, config.task)
    batch = as_batch(batch)
    y = batch.targets(config.task)
    cache = forward_batch(batch.static, batch.sequence, params, config)
    objective = _objective(cache, y, params, lam, kind)

    B = len(batch)
    de = config.d_embed
    grads = {}
    dz = _output_grad(cache, y, kind, config.task) / B

    w_out = params.view("w_out")
    h_T = cache.hidden[:, -1]
    grads["w_out"] = np.concatenate([dz @ cache.context, dz @ h_T])
    grads["b_out"] = np.array([dz.sum()])
    d_ctx = dz[:, None] * w_out[None, :de]
    dh = dz[:, None] * w_out[None, de:]

    # Backpropagation through time.
    W_h = params.view("W_h")
    gW_x = np.zeros_like(params.view("W_x"))
    gW_h = np.zeros_like(W_h)
    gb_h = np.zeros(config.d_hidden)
    for t in range(config.seq_len, 0, -1):
        h_t = cache.hidden[:, t]
        da = dh * (1.0 - h_t * h_t)
        gW_x += da.T @ batch.sequence[:, t - 1]
        gW_h += da.T @ cache.hidden[:, t - 1]
        gb_h += da.sum(axis=0)
        dh = da @ W_h
    grads["W_x"], grads["W_h"], grads["b_h"] = gW_x, gW_h, gb_h

    # Attention pooling.
    emb, weights = cache.emb, cache.weights
    d_emb = weights[:, :, None] * d_ctx[:, None, :]
    if config.attention:
        d_w = np.einsum("bje,be->bj", emb, d_ctx)
        d_s = weights * (d_w - np.sum(weights * d_w, axis=1, keepdims=True))
        A = cache.att_hidden
        grads["u"] = np.einsum("bj,bja->a", d_s, A)
        d_pre = d_s[:, :, None] * params.view("u")[None, None, :] * (1.0 - A * A)
        grads["W_att"] = np.einsum("bja,bje->ae", d_pre, emb)
        grads["b_att"] = d_pre.sum(axis=(0, 1))
        d_emb = d_emb + d_pre @ params.view("W_att")
    grads["E"] = np.einsum("bj,bje->je", batch.static, d_emb)

    flat = np.concatenate([grads[e.name].reshape(-1) for e in params.layout])
    flat = flat + 2.0 * lam * params.data
    if not np.all(np.isfinite(flat)):
        raise NumericFault("gradient")
    return objective, params.replace(flat)
