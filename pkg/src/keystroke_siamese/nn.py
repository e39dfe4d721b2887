"""Masked two-layer LSTM embedder with hand-written reverse-mode gradients.

Data flow for a batch ``x`` of shape (B, M, F) with mask (B, M)::

    x -> input dropout -> LSTM1 -> batch norm (valid steps only)
      -> dropout(0.5) * input dropout -> LSTM2 -> hidden state at last valid step

At masked steps an LSTM carries its (h, c) unchanged, so padding never
touches the recurrent state and receives no gradient. Internally all
sequence tensors are time-major (T, B, ...). Gate blocks are ordered
[input, forget, output, candidate].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalDivergenceError
from .features import PairBatch

PARAM_NAMES = ("W1", "U1", "b1", "gamma", "beta", "W2", "U2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    input_length: int = 50
    feature_dim: int = 5
    lstm_units: int = 128
    inter_layer_dropout: float = 0.5
    lstm_input_dropout: float = 0.2
    embedding_dim: int = 128
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    dtype: str = "float64"

    def __post_init__(self):
        if self.input_length < 1 or self.feature_dim < 1 or self.lstm_units < 1:
            raise ConfigurationError("input_length, feature_dim and lstm_units must be >= 1")
        for rate in (self.inter_layer_dropout, self.lstm_input_dropout):
            if not 0 <= rate < 1:
                raise ConfigurationError(f"dropout rate {rate} outside [0, 1)")
        if self.embedding_dim != self.lstm_units:
            raise ConfigurationError("embedding_dim must equal lstm_units (the embedding is the last hidden state)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    margin: float = 1.5

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigurationError("margin must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")


@dataclass
class ModelParams:
    """Trainable weights keyed by ``PARAM_NAMES`` plus batch-norm running stats."""

    weights: dict[str, np.ndarray]
    running_mean: np.ndarray
    running_var: np.ndarray

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            self.running_mean.copy(),
            self.running_var.copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.weights.keys() == other.weights.keys()
            and all(np.array_equal(v, other.weights[k]) for k, v in self.weights.items())
            and np.array_equal(self.running_mean, other.running_mean)
            and np.array_equal(self.running_var, other.running_var)
        )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


INIT_DESCRIPTOR = {
    "input_weights": "glorot_uniform(fan_in=rows, fan_out=4*units)",
    "recurrent_weights": "orthogonal",
    "bias": "zeros, forget gate ones",
    "bn": "gamma ones, beta zeros, running mean 0, running var 1",
}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, H = config.feature_dim, config.lstm_units
    return {
        "W1": (F, 4 * H),
        "U1": (H, 4 * H),
        "b1": (4 * H,),
        "gamma": (H,),
        "beta": (H,),
        "W2": (H, 4 * H),
        "U2": (H, 4 * H),
        "b2": (4 * H,),
    }


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    H = config.lstm_units
    dt = np.dtype(config.dtype)
    w = {}
    for layer, fan_in in (("1", config.feature_dim), ("2", H)):
        limit = np.sqrt(6.0 / (fan_in + 4 * H))
        w["W" + layer] = rng.uniform(-limit, limit, size=(fan_in, 4 * H))
        w["U" + layer] = _orthogonal(rng, H, 4 * H)
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        w["b" + layer] = b
    w["gamma"] = np.ones(H)
    w["beta"] = np.zeros(H)
    w = {k: w[k].astype(dt) for k in PARAM_NAMES}
    return ModelParams(w, np.zeros(H, dtype=dt), np.ones(H, dtype=dt))


def check_shapes(params: ModelParams, config: ModelConfig) -> None:
    for name, shape in param_shapes(config).items():
        if name not in params.weights:
            raise ConfigurationError(f"missing parameter {name}")
        if params.weights[name].shape != shape:
            raise ConfigurationError(f"{name} has shape {params.weights[name].shape}, expected {shape}")
    H = config.lstm_units
    if params.running_mean.shape != (H,) or params.running_var.shape != (H,):
        raise ConfigurationError("running statistics shape mismatch")
    if np.any(params.running_var < 0):
        raise ConfigurationError("running variance must be non-negative")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(x, valid, W, U, b):
    """Run a masked LSTM over time-major ``x`` (T, B, D).

    ``valid`` is a boolean (T, B) array. Returns all per-step hidden states
    (carried through masked steps) and the cache for :func:`lstm_backward`.
    """
    T, B, _ = x.shape
    H = U.shape[0]
    A = x @ W + b
    h = np.zeros((B, H), dtype=x.dtype)
    c = np.zeros((B, H), dtype=x.dtype)
    hs = np.empty((T, B, H), dtype=x.dtype)
    S = np.empty((T, B, 3 * H), dtype=x.dtype)
    G = np.empty((T, B, H), dtype=x.dtype)
    TC = np.empty((T, B, H), dtype=x.dtype)
    C_prev = np.empty((T, B, H), dtype=x.dtype)
    H_prev = np.empty((T, B, H), dtype=x.dtype)
    for t in range(T):
        z = A[t] + h @ U
        s = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        S[t], G[t], TC[t], C_prev[t], H_prev[t] = s, g, tc, c, h
        m = valid[t][:, None]
        c = np.where(m, c_new, c)
        h = np.where(m, h_new, h)
        hs[t] = h
    return hs, (x, valid, W, U, S, G, TC, C_prev, H_prev)


def lstm_backward(dhs, cache):
    """Backpropagate through time.

    ``dhs`` holds gradients w.r.t. each step's output, shape (T, B, H).
    Returns (dx, dW, dU, db).
    """
    x, valid, W, U, S, G, TC, C_prev, H_prev = cache
    T, B, _ = x.shape
    H = U.shape[0]
    dA = np.empty((T, B, 4 * H), dtype=x.dtype)
    dh = np.zeros((B, H), dtype=x.dtype)
    dc = np.zeros((B, H), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[t]
        m = valid[t][:, None]
        dh_new = np.where(m, dh, 0.0)
        dc_new = np.where(m, dc, 0.0)
        dh_carry = dh - dh_new
        dc_carry = dc - dc_new
        s, g, tc = S[t], G[t], TC[t]
        i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
        dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
        dz = dA[t]
        dz[:, :H] = dc_new * g
        dz[:, H : 2 * H] = dc_new * C_prev[t]
        dz[:, 2 * H : 3 * H] = dh_new * tc
        dz[:, : 3 * H] *= s * (1.0 - s)
        dz[:, 3 * H :] = dc_new * i * (1.0 - g * g)
        dh = dz @ U.T + dh_carry
        dc = dc_new * f + dc_carry
    dA_flat = dA.reshape(-1, 4 * H)
    dU = H_prev.reshape(-1, H).T @ dA_flat
    dW = x.reshape(-1, x.shape[2]).T @ dA_flat
    db = dA.sum(axis=(0, 1))
    dx = dA @ W.T
    return dx, dW, dU, db


def batchnorm_forward_train(h, valid, gamma, beta, eps):
    """Normalize per unit using statistics over valid (t, b) positions only."""
    m = valid[:, :, None].astype(h.dtype)
    n = m.sum()
    mean = (h * m).sum(axis=(0, 1)) / n
    centered = h - mean
    var = (centered * centered * m).sum(axis=(0, 1)) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return gamma * xhat + beta, (xhat, inv, m, n, gamma), mean, var


def batchnorm_backward(dy, cache):
    xhat, inv, m, n, gamma = cache
    dy = dy * m
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1)))
    return dx * m, dgamma, dbeta


def _dropout_mask(rng, shape, rate, dtype):
    if rate == 0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def model_forward(params: ModelParams, config: ModelConfig, x, mask, mode: str = "inference", rng=None):
    """Embed a batch of padded sequences.

    Args:
        x: (B, M, feature_dim) padded feature matrices.
        mask: (B, M) with 1 on valid rows; padding must be at the tail.
        mode: ``"train"`` uses batch statistics and dropout; ``"inference"``
            uses running statistics and no dropout.
        rng: generator for dropout masks, required in train mode when any
            dropout rate is non-zero.

    Returns:
        (embeddings (B, H), cache); cache is None in inference mode.
    """
    if mode not in ("train", "inference"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    mask = np.asarray(mask)
    if x.ndim == 2:
        x, mask = x[None], mask[None]
    if x.ndim != 3 or x.shape[2] != config.feature_dim or mask.shape != x.shape[:2]:
        raise ConfigurationError(f"input shape {x.shape} / mask {mask.shape} incompatible with config")
    dt = np.dtype(config.dtype)
    w = params.weights
    B = x.shape[0]
    H = config.lstm_units
    xt = np.ascontiguousarray(x.transpose(1, 0, 2), dtype=dt)
    valid = mask.T > 0
    train = mode == "train"

    d_in1 = d_in2 = None
    if train and (config.lstm_input_dropout or config.inter_layer_dropout):
        if rng is None:
            raise ConfigurationError("train mode with dropout needs an rng")
        d_in1 = _dropout_mask(rng, (B, config.feature_dim), config.lstm_input_dropout, dt)
        d_mid = _dropout_mask(rng, (B, H), config.inter_layer_dropout, dt)
        d_l2 = _dropout_mask(rng, (B, H), config.lstm_input_dropout, dt)
        if d_mid is not None or d_l2 is not None:
            d_in2 = (1.0 if d_mid is None else d_mid) * (1.0 if d_l2 is None else d_l2)

    x1 = xt * d_in1 if d_in1 is not None else xt
    h1, c1 = lstm_forward(x1, valid, w["W1"], w["U1"], w["b1"])
    if train:
        y, bn_cache, bmean, bvar = batchnorm_forward_train(h1, valid, w["gamma"], w["beta"], config.bn_epsilon)
    else:
        inv = 1.0 / np.sqrt(params.running_var + config.bn_epsilon)
        y = (h1 - params.running_mean) * (inv * w["gamma"]) + w["beta"]
    x2 = y * d_in2 if d_in2 is not None else y
    h2, c2 = lstm_forward(x2, valid, w["W2"], w["U2"], w["b2"])
    emb = h2[-1]
    if not np.all(np.isfinite(emb)):
        raise NumericalDivergenceError("non-finite embedding")
    if not train:
        return emb, None
    cache = {
        "lstm1": c1,
        "lstm2": c2,
        "bn": bn_cache,
        "bn_mean": bmean,
        "bn_var": bvar,
        "d_in1": d_in1,
        "d_in2": d_in2,
        "T": xt.shape[0],
    }
    return emb, cache


def model_backward(params: ModelParams, cache, d_emb) -> dict[str, np.ndarray]:
    T = cache["T"]
    dh2 = np.zeros((T,) + d_emb.shape, dtype=d_emb.dtype)
    dh2[-1] = d_emb
    dx2, dW2, dU2, db2 = lstm_backward(dh2, cache["lstm2"])
    if cache["d_in2"] is not None:
        dx2 = dx2 * cache["d_in2"]
    dh1, dgamma, dbeta = batchnorm_backward(dx2, cache["bn"])
    _, dW1, dU1, db1 = lstm_backward(dh1, cache["lstm1"])
    return {"W1": dW1, "U1": dU1, "b1": db1, "gamma": dgamma, "beta": dbeta, "W2": dW2, "U2": dU2, "b2": db2}


def embed_batch(params: ModelParams, config: ModelConfig, x, mask, chunk: int = 512) -> np.ndarray:
    """Inference-mode embeddings, computed in chunks of ``chunk`` sequences."""
    x = np.asarray(x)
    mask = np.asarray(mask)
    out = np.empty((len(x), config.lstm_units), dtype=np.dtype(config.dtype))
    for s in range(0, len(x), chunk):
        out[s : s + chunk], _ = model_forward(params, config, x[s : s + chunk], mask[s : s + chunk])
    return out


# ---------------------------------------------------------------------------
# distance and loss
# ---------------------------------------------------------------------------


def euclidean_distance(a, b):
    """L2 distance along the last axis."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise DomainError(f"dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def contrastive_loss(d, label, margin: float = 1.5):
    """``(1-L) d^2/2 + L max(0, margin-d)^2/2``; label 0 genuine, 1 impostor."""
    if margin < 0:
        raise DomainError("margin must be >= 0")
    d = np.asarray(d, dtype=float)
    label = np.asarray(label)
    if np.any(d < 0):
        raise DomainError("distance must be >= 0")
    hinge = np.maximum(0.0, margin - d)
    out = np.where(label == 1, 0.5 * hinge * hinge, 0.5 * d * d)
    return float(out) if out.ndim == 0 else out


@dataclass
class PassResult:
    loss: float
    grads: dict[str, np.ndarray]
    distances: np.ndarray
    labels: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray


def forward_backward(params, config, batch: PairBatch, hyper: TrainHyper, rng=None) -> PassResult:
    """Mean contrastive loss of a pair batch and its gradients.

    Both Siamese branches are run as one stacked batch, so the shared
    weights accumulate gradients from left and right inputs together and
    batch-norm statistics are taken over both.
    """
    B = len(batch)
    if B == 0:
        raise ConfigurationError("empty batch")
    x = np.concatenate([batch.left, batch.right])
    mask = np.concatenate([batch.left_mask, batch.right_mask])
    emb, cache = model_forward(params, config, x, mask, mode="train", rng=rng)
    diff = emb[:B] - emb[B:]
    d = np.sqrt(np.sum(diff * diff, axis=1))
    labels = np.asarray(batch.labels)
    imp = labels == 1
    hinge = np.maximum(0.0, hyper.margin - d)
    loss = float(np.mean(np.where(imp, 0.5 * hinge * hinge, 0.5 * d * d)))

    # d/d(diff) of d^2/2 is diff; of hinge^2/2 is -hinge * diff / d
    safe_d = np.where(d > 0, d, 1.0)
    coef = np.where(imp, -hinge / safe_d * (d > 0), 1.0) / B
    g = coef[:, None] * diff
    d_emb = np.concatenate([g, -g])
    grads = model_backward(params, cache, d_emb)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
        raise NumericalDivergenceError("non-finite loss or gradient")
    return PassResult(loss, grads, d, labels, cache["bn_mean"], cache["bn_var"])


def compute_gradients(params, config, batch: PairBatch, hyper: TrainHyper, rng=None):
    r = forward_backward(params, config, batch, hyper, rng)
    return r.loss, r.grads


def update_running_stats(params: ModelParams, mean, var, momentum: float) -> ModelParams:
    return ModelParams(
        params.weights,
        momentum * params.running_mean + (1.0 - momentum) * mean,
        momentum * params.running_var + (1.0 - momentum) * var,
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def init_adam_state(weights: dict[str, np.ndarray]) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in weights.items()}, {k: np.zeros_like(v) for k, v in weights.items()}, 0)


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, hyper: TrainHyper):
    """One bias-corrected Adam update. Inputs are not modified."""
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_w, new_m, new_v = {}, {}, {}
    for k, p in weights.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_w[k] = p - hyper.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + hyper.epsilon)
        new_m[k], new_v[k] = m, v
    return new_w, AdamState(new_m, new_v, t)
