"""Temporal CNN-1D + stacked graph-convolutional LSTMs + dense head, in numpy.

Everything runs in float64 with hand-written reverse-mode gradients. Batched
activations are kept as flat ``(N * B, dim)`` row blocks, user-major, so a
block reshapes to ``(N, B * dim)`` for the sparse Chebyshev products without
copies.

Parameter names::

    conv.W        (n_cnn, w_cnn, n_features)   temporal filters, no bias
    lstm{l}.Wx    (K, in_dim, 4 * hidden)      gate blocks ordered i, f, o, g
    lstm{l}.Wh    (K, hidden, 4 * hidden)
    lstm{l}.b     (4 * hidden,)
    dense.W       (hidden_last, n_f)
    dense.b       (n_f,)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import rng
from .errors import (
    ConfigMismatchError,
    InvalidDataError,
    InvalidInputError,
    InvalidParameterError,
    NumericError,
)
from .graph import SpectralOperator, chebyshev_adjoint, chebyshev_apply

log = logging.getLogger(__name__)

Params = dict  # name -> np.ndarray

CHECKPOINT_FORMAT = "geoleak-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_ts: int = 4
    n_cnn: int = 4
    w_cnn: int = 4
    n_g: tuple = (20, 10, 30)
    n_f: int = 2
    k: int = 3
    n_features: int = 3
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 0
    chunk_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.n_g = tuple(int(h) for h in self.n_g)
        if self.n_f != 2:
            raise InvalidParameterError("n_f must be 2 (latitude, longitude)")
        if self.w_cnn > self.n_ts:
            raise InvalidParameterError(f"w_cnn={self.w_cnn} exceeds n_ts={self.n_ts}")
        if self.k < 1:
            raise InvalidParameterError("Chebyshev order k must be >= 1")
        sizes = (self.n_ts, self.n_cnn, self.w_cnn, self.n_features, self.chunk_size, *self.n_g)
        if not self.n_g or min(sizes) < 1:
            raise InvalidParameterError("all layer sizes must be >= 1")
        if self.max_epochs < 0 or self.patience < 0 or self.batch_size < 0:
            raise InvalidParameterError("max_epochs, patience and batch_size must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def architecture(self) -> dict:
        """Fields that fix parameter shapes."""
        return {"n_ts": self.n_ts, "n_cnn": self.n_cnn, "w_cnn": self.w_cnn,
                "n_g": list(self.n_g), "n_f": self.n_f, "k": self.k,
                "n_features": self.n_features}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {"conv.W": (cfg.n_cnn, cfg.w_cnn, cfg.n_features)}
    d = cfg.n_cnn
    for layer, h in enumerate(cfg.n_g):
        shapes[f"lstm{layer}.Wx"] = (cfg.k, d, 4 * h)
        shapes[f"lstm{layer}.Wh"] = (cfg.k, h, 4 * h)
        shapes[f"lstm{layer}.b"] = (4 * h,)
        d = h
    shapes["dense.W"] = (d, cfg.n_f)
    shapes["dense.b"] = (cfg.n_f,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int | None = None) -> Params:
    """Glorot-uniform weights, zero biases except forget gates at 1."""
    gen = rng.generator(cfg.seed if seed is None else seed, rng.PARAMS)

    def glorot(shape, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return gen.uniform(-lim, lim, size=shape)

    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "conv.W":
            params[name] = glorot(shape, cfg.w_cnn * cfg.n_features, cfg.n_cnn)
        elif name.endswith(".b"):
            b = np.zeros(shape)
            if name.startswith("lstm"):
                h = shape[0] // 4
                b[h:2 * h] = 1.0
            params[name] = b
        elif name == "dense.W":
            params[name] = glorot(shape, shape[0], shape[1])
        else:
            k, d_in, four_h = shape
            # each gate block is its own (K*d_in -> hidden) map
            params[name] = glorot(shape, k * d_in, four_h // 4)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- layers ------------------------------------------------------------------

def _same_pad(w: int) -> tuple[int, int]:
    before = (w - 1) // 2
    return before, w - 1 - before


def conv1d_temporal_forward(x: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """SAME-padded 1-D cross-correlation along axis 0, independently per node.

    ``x`` is (T, ..., F_in) and ``filters`` (n_out, w, F_in); returns
    (T, ..., n_out).
    """
    x = np.asarray(x, dtype=np.float64)
    n_out, w, f_in = filters.shape
    if x.shape[-1] != f_in:
        raise InvalidInputError(f"input has {x.shape[-1]} features, filters expect {f_in}")
    if w > x.shape[0]:
        raise InvalidInputError(f"filter width {w} exceeds sequence length {x.shape[0]}")
    t = x.shape[0]
    before, after = _same_pad(w)
    pad = [(before, after)] + [(0, 0)] * (x.ndim - 1)
    xp = np.pad(x, pad)
    out = np.zeros(x.shape[:-1] + (n_out,))
    for tau in range(w):
        out += xp[tau:tau + t] @ filters[:, tau, :].T
    return out


def _conv_backward(x: np.ndarray, filters: np.ndarray, dout: np.ndarray) -> np.ndarray:
    n_out, w, f_in = filters.shape
    t = x.shape[0]
    before, after = _same_pad(w)
    xp = np.pad(x, [(before, after)] + [(0, 0)] * (x.ndim - 1))
    d2 = dout.reshape(-1, n_out)
    dw = np.empty_like(filters)
    for tau in range(w):
        dw[:, tau, :] = d2.T @ xp[tau:tau + t].reshape(-1, f_in)
    return dw


@dataclass
class _StepCache:
    basis: np.ndarray  # (K, rows, in_dim + hidden)
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c_prev: np.ndarray
    tanh_c: np.ndarray


def _lstm_step(op, x, h, c, w_stack, b, k, cache):
    """One GConvLSTM step on flat (N*B, dim) rows; ``w_stack`` is (K, in+H, 4H)."""
    hidden = h.shape[1]
    z = np.concatenate([x, h], axis=1)
    basis = chebyshev_apply(op, z.reshape(op.n, -1), k).reshape((k,) + z.shape)
    pre = basis[0] @ w_stack[0]
    for j in range(1, k):
        pre += basis[j] @ w_stack[j]
    pre += b
    gates = expit(pre[:, :3 * hidden])
    i, f, o = gates[:, :hidden], gates[:, hidden:2 * hidden], gates[:, 2 * hidden:]
    g = np.tanh(pre[:, 3 * hidden:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    if cache is not None:
        cache.append(_StepCache(basis, i, f, o, g, c, tanh_c))
    return h_new, c_new


def gconv_lstm_step(x_t, h_prev, c_prev, op: SpectralOperator, wx, wh, b, layer: int | str = 0):
    """Single GConvLSTM step for one graph snapshot: returns ``(h_t, c_t)``.

    Gates: ``sigma(GC(Wx, x) + GC(Wh, h) + b)`` for i, f, o and tanh for the
    candidate, with ``GC(W, Z) = sum_k T_k(L~) Z W_k``.
    """
    for name, arr in (("x_t", x_t), ("h_prev", h_prev), ("c_prev", c_prev)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite {name} entering GConvLSTM layer {layer}")
    w_stack = np.concatenate([wx, wh], axis=1)
    return _lstm_step(op, np.asarray(x_t, float), np.asarray(h_prev, float),
                      np.asarray(c_prev, float), w_stack, b, wx.shape[0], None)


# -- full stack --------------------------------------------------------------

@dataclass
class GradientTape:
    """Forward intermediates needed to replay the stack in reverse."""

    op: SpectralOperator
    cfg: ModelConfig
    params: Params
    x: np.ndarray          # (T, rows, F)
    conv_out: np.ndarray   # (T, rows, n_cnn), pre-ReLU
    layers: list = field(default_factory=list)  # per layer: list of _StepCache over time
    h_last: np.ndarray | None = None
    pred: np.ndarray | None = None
    n_users: int = 0
    batch: int = 0


def _to_rows(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """(B, T, N, F) or (T, N, F) -> (T, N*B, F) user-major rows."""
    single = x.ndim == 3
    if single:
        x = x[None]
    b, t, n, f = x.shape
    return np.ascontiguousarray(x.transpose(1, 2, 0, 3)).reshape(t, n * b, f), single


def _run(x: np.ndarray, op: SpectralOperator, params: Params, cfg: ModelConfig, record: bool):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4) or x.shape[-3:] != (cfg.n_ts, op.n, cfg.n_features):
        raise InvalidInputError(f"expected input (..., {cfg.n_ts}, {op.n}, {cfg.n_features}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in the input tensor")
    batch = 1 if x.ndim == 3 else x.shape[0]
    rows, single = _to_rows(x)
    conv_out = conv1d_temporal_forward(rows, params["conv.W"])
    seq = np.maximum(conv_out, 0.0)
    tape = GradientTape(op, cfg, params, rows, conv_out, n_users=op.n, batch=batch) if record else None
    n_rows = rows.shape[1]
    for layer, hidden in enumerate(cfg.n_g):
        w_stack = np.concatenate([params[f"lstm{layer}.Wx"], params[f"lstm{layer}.Wh"]], axis=1)
        b = params[f"lstm{layer}.b"]
        h = np.zeros((n_rows, hidden))
        c = np.zeros((n_rows, hidden))
        cache = [] if record else None
        outs = np.empty((cfg.n_ts, n_rows, hidden))
        for t in range(cfg.n_ts):
            h, c = _lstm_step(op, seq[t], h, c, w_stack, b, cfg.k, cache)
            outs[t] = h
        if not np.all(np.isfinite(outs)):
            raise NumericError(f"non-finite activations in GConvLSTM layer {layer}")
        if record:
            tape.layers.append(cache)
        seq = outs
    h_last = seq[-1]
    pred = expit(h_last @ params["dense.W"] + params["dense.b"])
    # back to (B, N, 2)
    out = pred.reshape(op.n, batch, cfg.n_f).transpose(1, 0, 2)
    if record:
        tape.h_last = h_last
        tape.pred = pred
    return (out[0] if single else out), tape


def forward(x: np.ndarray, op: SpectralOperator, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Predictions in [0, 1]: (N, 2) for one example, (B, N, 2) for a batch."""
    return _run(x, op, params, cfg, record=False)[0]


def forward_with_tape(x, op, params, cfg) -> tuple[np.ndarray, GradientTape]:
    return _run(x, op, params, cfg, record=True)


def backward(tape: GradientTape, dpred: np.ndarray) -> Params:
    """Reverse-mode gradients of a scalar loss given its gradient w.r.t. the predictions."""
    cfg, op, params = tape.cfg, tape.op, tape.params
    dpred = np.asarray(dpred, dtype=np.float64)
    if dpred.ndim == 2:
        dpred = dpred[None]
    # (B, N, 2) -> user-major rows
    dp = np.ascontiguousarray(dpred.transpose(1, 0, 2)).reshape(-1, cfg.n_f)
    grads = {}
    dy = dp * tape.pred * (1.0 - tape.pred)
    grads["dense.W"] = tape.h_last.T @ dy
    grads["dense.b"] = dy.sum(axis=0)
    n_rows = dp.shape[0]
    dseq = np.zeros((cfg.n_ts, n_rows, cfg.n_g[-1]))
    dseq[-1] = dy @ params["dense.W"].T
    for layer in range(len(cfg.n_g) - 1, -1, -1):
        hidden = cfg.n_g[layer]
        wx, wh = params[f"lstm{layer}.Wx"], params[f"lstm{layer}.Wh"]
        d_in = wx.shape[1]
        w_stack = np.concatenate([wx, wh], axis=1)
        dw = np.zeros_like(w_stack)
        db = np.zeros(4 * hidden)
        dh_next = np.zeros((n_rows, hidden))
        dc_next = np.zeros((n_rows, hidden))
        dseq_in = np.empty((cfg.n_ts, n_rows, d_in))
        for t in range(cfg.n_ts - 1, -1, -1):
            s = tape.layers[layer][t]
            dh = dseq[t] + dh_next
            do = dh * s.tanh_c
            dc = dc_next + dh * s.o * (1.0 - s.tanh_c ** 2)
            dpre = np.concatenate([
                dc * s.g * s.i * (1.0 - s.i),
                dc * s.c_prev * s.f * (1.0 - s.f),
                do * s.o * (1.0 - s.o),
                dc * s.i * (1.0 - s.g ** 2),
            ], axis=1)
            dc_next = dc * s.f
            db += dpre.sum(axis=0)
            dbasis = np.empty_like(s.basis)
            for j in range(cfg.k):
                dw[j] += s.basis[j].T @ dpre
                dbasis[j] = dpre @ w_stack[j].T
            dz = chebyshev_adjoint(op, dbasis)
            dseq_in[t] = dz[:, :d_in]
            dh_next = dz[:, d_in:]
        grads[f"lstm{layer}.Wx"] = dw[:, :d_in, :]
        grads[f"lstm{layer}.Wh"] = dw[:, d_in:, :]
        grads[f"lstm{layer}.b"] = db
        dseq = dseq_in
    dconv = dseq * (tape.conv_out > 0.0)
    grads["conv.W"] = _conv_backward(tape.x, params["conv.W"], dconv)
    return {name: grads[name] for name in params}


# -- loss --------------------------------------------------------------------

def masked_mse(pred, target, mask) -> float:
    """Mean squared error over masked users and both coordinates; 0 for an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0
    diff = np.where(mask[..., None], np.asarray(pred) - np.nan_to_num(target), 0.0)
    return float((diff ** 2).sum() / (2 * n))


def masked_mse_grad(pred, target, mask, denom: int | None = None) -> np.ndarray:
    """Gradient of :func:`masked_mse` w.r.t. ``pred``.

    ``denom`` overrides the masked-entry count, used when one loss spans
    several chunks.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum()) if denom is None else denom
    if n == 0:
        return np.zeros_like(np.asarray(pred, dtype=np.float64))
    return np.where(mask[..., None], np.asarray(pred) - np.nan_to_num(target), 0.0) / n


def loss_and_grads(params, x, target, mask, op, cfg) -> tuple[float, Params]:
    pred, tape = forward_with_tape(x, op, params, cfg)
    return masked_mse(pred, target, mask), backward(tape, masked_mse_grad(pred, target, mask))


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params), 0)


def adam_step(params: Params, grads: Params, state: AdamState, cfg: ModelConfig):
    """Bias-corrected Adam; returns new ``(params, state)`` without mutating inputs."""
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    adam: AdamState
    log: list[dict]
    best_epoch: int | None
    stopped_early: bool


def _chunks(b: int, size: int):
    for start in range(0, b, size):
        yield slice(start, min(start + size, b))


def predict_batch(x: np.ndarray, op, params, cfg) -> np.ndarray:
    """Forward over (B, T, N, F) in chunks; returns (B, N, 2)."""
    out = np.empty((x.shape[0], op.n, cfg.n_f))
    for sl in _chunks(x.shape[0], cfg.chunk_size):
        out[sl] = forward(x[sl], op, params, cfg)
    return out


def epoch_pass(x, y, train_mask, val_mask, op, params, cfg, with_grads: bool = True):
    """Full-batch train loss, validation loss and (optionally) train-loss gradients."""
    n_train, n_val = int(train_mask.sum()), int(val_mask.sum())
    grads = zeros_like_params(params) if with_grads else None
    se_train = se_val = 0.0
    for sl in _chunks(x.shape[0], cfg.chunk_size):
        if with_grads and train_mask[sl].any():
            pred, tape = forward_with_tape(x[sl], op, params, cfg)
            g = backward(tape, masked_mse_grad(pred, y[sl], train_mask[sl], denom=n_train))
            for k in grads:
                grads[k] += g[k]
        else:
            pred = forward(x[sl], op, params, cfg)
        diff2 = (pred - y[sl]) ** 2
        se_train += float(diff2[train_mask[sl]].sum())
        se_val += float(diff2[val_mask[sl]].sum())
    train_loss = se_train / (2 * n_train) if n_train else 0.0
    val_loss = se_val / (2 * n_val) if n_val else None
    return train_loss, val_loss, grads


def _minibatch_epoch(x, y, train_mask, op, params, state, cfg):
    """One pass over fixed-order slices of ``batch_size`` examples, one Adam step each."""
    se, n_total = 0.0, 0
    for sl in _chunks(x.shape[0], cfg.batch_size):
        m = train_mask[sl]
        n = int(m.sum())
        if n == 0:
            continue
        pred, tape = forward_with_tape(x[sl], op, params, cfg)
        se += float(((pred - y[sl]) ** 2)[m].sum())
        n_total += n
        grads = backward(tape, masked_mse_grad(pred, y[sl], m))
        params, state = adam_step(params, grads, state, cfg)
    return se / (2 * n_total), params, state


def train(examples, op: SpectralOperator, cfg: ModelConfig, params: Params | None = None,
          progress=None) -> TrainResult:
    """Adam with early stopping on the validation loss.

    ``cfg.batch_size == 0`` is full-batch: each epoch measures the train and
    validation losses of the current weights, then takes one step on the
    accumulated gradient. Otherwise each epoch takes one step per slice of
    ``batch_size`` examples, in fixed order, and then measures the
    validation loss. The weights with the lowest validation loss are returned.
    """
    from .geosn import stack_examples

    if not examples:
        raise InvalidDataError("no training examples")
    x, y, train_mask, val_mask, _ = stack_examples(examples)
    if not train_mask.any():
        raise InvalidDataError("every example has an empty TRAIN mask")
    if params is None:
        params = init_params(cfg)
    state = AdamState.zeros(params)
    has_val = bool(val_mask.any())
    if not has_val and cfg.max_epochs > 0:
        log.warning("validation set is empty; early stopping disabled, returning final weights")
    best_val, best_params, best_state, best_epoch = math.inf, params, state, None
    bad_epochs = 0
    rows = []
    stopped = False
    for epoch in range(cfg.max_epochs):
        if cfg.batch_size == 0:
            train_loss, val_loss, grads = epoch_pass(x, y, train_mask, val_mask, op, params, cfg)
            candidate = (params, state)
            params, state = adam_step(params, grads, state, cfg)
        else:
            train_loss, params, state = _minibatch_epoch(x, y, train_mask, op, params, state, cfg)
            val_loss = None
            if has_val:
                _, val_loss, _ = epoch_pass(x, y, train_mask, val_mask, op, params, cfg, with_grads=False)
            candidate = (params, state)
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if progress is not None:
            progress(rows[-1])
        if not has_val:
            continue
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_params, best_state = candidate
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                stopped = True
                break
    if has_val and best_epoch is not None:
        return TrainResult(best_params, best_state, rows, best_epoch, stopped)
    return TrainResult(params, state, rows, None, stopped)


# -- checkpoints -------------------------------------------------------------

def _encode(arrays: Params) -> dict:
    return {k: {"shape": list(v.shape), "dtype": "float64", "data": v.ravel().tolist()}
            for k, v in arrays.items()}


def _decode(blob: dict) -> Params:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}


def save_checkpoint(path, cfg: ModelConfig, params: Params, norm, adam: AdamState | None = None,
                    pipeline: dict | None = None) -> None:
    """JSON container; float reprs round-trip exactly, so reloads are bit-identical."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": {**asdict(cfg), "n_g": list(cfg.n_g)},
        "pipeline": pipeline or {},
        "normalization": norm.to_dict() if norm is not None else None,
        "params": _encode(params),
        "adam": None if adam is None else {"t": adam.t, "m": _encode(adam.m), "v": _encode(adam.v)},
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True) + "\n")


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: Params
    norm: object
    adam: AdamState | None
    pipeline: dict


def load_checkpoint(path) -> Checkpoint:
    from .geosn import NormalizationBounds

    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a geoleak checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig.from_dict(blob["model_config"])
    params = _decode(blob["params"])
    expected = param_shapes(cfg)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ConfigMismatchError(f"{path}: parameter shapes do not match the stored model config")
    adam = None
    if blob.get("adam"):
        adam = AdamState(_decode(blob["adam"]["m"]), _decode(blob["adam"]["v"]), blob["adam"]["t"])
    norm = NormalizationBounds(**blob["normalization"]) if blob.get("normalization") else None
    return Checkpoint(cfg, params, norm, adam, blob.get("pipeline", {}))
