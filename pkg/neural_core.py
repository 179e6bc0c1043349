"""
From-scratch LSTM encoder-decoder engine on numpy.

Covers the LSTM recurrence, stacked seq2seq and direct-head networks with
dropout, MAE loss, backpropagation through time (including the
autoregressive decoder feedback path), Adam, and the training loop.
"""
import base64
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.special import expit

from errors import (
    ArtifactMismatch,
    DivergedLoss,
    HorizonZero,
    MissingArtifact,
    MissingCache,
    NoData,
    NonFiniteGradient,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class ModelSpec(BaseModel):
    """Topology of an encoder-decoder (or direct multi-output) LSTM forecaster."""
    architecture: Literal["seq2seq", "direct"] = "seq2seq"
    input_dim: int = Field(..., ge=1)
    encoder_units: List[int] = Field(..., min_length=1)
    decoder_units: List[int] = Field(default_factory=list)
    dense_units: List[int] = Field(default_factory=list)
    dense_activation: Literal["relu", "tanh", "linear"] = "relu"
    dropout_rate: float = Field(0.0, ge=0.0, le=0.9)
    teacher_forcing: float = Field(1.0, ge=0.0, le=1.0)
    look_back: int = Field(..., ge=1)
    horizon: int
    output_dim: int = Field(1, ge=1)
    target_index: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_topology(self):
        if self.horizon < 1:
            raise HorizonZero("horizon must be at least 1")
        if self.target_index + self.output_dim > self.input_dim:
            raise ShapeMismatch("target_index/output_dim fall outside the input features")
        if self.architecture == "seq2seq":
            if not self.decoder_units:
                raise ShapeMismatch("seq2seq needs at least one decoder layer")
            for layer, units in enumerate(self.decoder_units):
                source = self.decoder_source(layer)
                if units != self.encoder_units[source]:
                    raise ShapeMismatch(
                        f"decoder layer {layer} has {units} units but encoder layer {source} hands over "
                        f"{self.encoder_units[source]}")
        return self

    @property
    def encoder_layers(self) -> int:
        return len(self.encoder_units)

    @property
    def decoder_layers(self) -> int:
        return len(self.decoder_units)

    @property
    def dense_layers(self) -> int:
        return len(self.dense_units)

    def decoder_source(self, layer: int) -> int:
        """Encoder layer whose final (h, c) initializes the given decoder layer."""
        return min(layer, self.encoder_layers - 1)

    @property
    def head_outputs(self) -> int:
        return self.output_dim * (self.horizon if self.architecture == "direct" else 1)


class NetworkWeights:
    """Named parameter blocks in a fixed order."""

    def __init__(self, blocks: Dict[str, np.ndarray]):
        self.blocks = dict(blocks)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.blocks[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.blocks)

    def items(self):
        return self.blocks.items()

    def names(self) -> List[str]:
        return list(self.blocks)

    def copy(self) -> "NetworkWeights":
        return NetworkWeights({k: v.copy() for k, v in self.blocks.items()})

    def zeros_like(self) -> "NetworkWeights":
        return NetworkWeights({k: np.zeros_like(v) for k, v in self.blocks.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.blocks.values()])

    def with_flat(self, vector: np.ndarray) -> "NetworkWeights":
        out, offset = {}, 0
        for name, value in self.blocks.items():
            out[name] = np.asarray(vector[offset:offset + value.size], dtype=value.dtype).reshape(value.shape)
            offset += value.size
        return NetworkWeights(out)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks.values())

    def to_payload(self) -> Dict[str, Dict]:
        return {
            name: {"shape": list(value.shape),
                   "data": base64.b64encode(np.ascontiguousarray(value, dtype="<f8").tobytes()).decode("ascii")}
            for name, value in self.blocks.items()
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Dict], dtype=np.float64) -> "NetworkWeights":
        blocks = {}
        for name, entry in payload.items():
            data = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
            blocks[name] = data.reshape(entry["shape"]).astype(dtype)
        return cls(blocks)


def _block_shapes(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) of every parameter block."""
    shapes = []
    in_dim = spec.input_dim
    for l, units in enumerate(spec.encoder_units):
        shapes += [(f"enc{l}_W", (in_dim, 4 * units), in_dim),
                   (f"enc{l}_U", (units, 4 * units), units),
                   (f"enc{l}_b", (4 * units,), units)]
        in_dim = units
    if spec.architecture == "seq2seq":
        in_dim = spec.output_dim
        for l, units in enumerate(spec.decoder_units):
            shapes += [(f"dec{l}_W", (in_dim, 4 * units), in_dim),
                       (f"dec{l}_U", (units, 4 * units), units),
                       (f"dec{l}_b", (4 * units,), units)]
            in_dim = units
    for k, units in enumerate(spec.dense_units):
        shapes += [(f"dense{k}_W", (in_dim, units), in_dim), (f"dense{k}_b", (units,), in_dim)]
        in_dim = units
    shapes += [("out_W", (in_dim, spec.head_outputs), in_dim), ("out_b", (spec.head_outputs,), in_dim)]
    return shapes


def init_weights(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> NetworkWeights:
    """Uniform in [-k, k], k = 1/sqrt(fan_in), per parameter block."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, shape, fan_in in _block_shapes(spec):
        k = 1.0 / np.sqrt(fan_in)
        blocks[name] = rng.uniform(-k, k, size=shape).astype(dtype)
    return NetworkWeights(blocks)


# --- LSTM -----------------------------------------------------------------

def _lstm_step(x, h_prev, c_prev, W, U, b):
    units = h_prev.shape[1]
    z = x @ W + h_prev @ U + b
    i = expit(z[:, :units])
    f = expit(z[:, units:2 * units])
    g = np.tanh(z[:, 2 * units:3 * units])
    o = expit(z[:, 3 * units:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def _lstm_step_backward(dh, dc, cache, W, U, dW, dU, db):
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
    dW += x.T @ dz
    dU += h_prev.T @ dz
    db += dz.sum(axis=0)
    return dz @ W.T, dz @ U.T, dc * f


def lstm_forward(x: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray,
                 state0: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """
    Run one LSTM layer over a batch of sequences.

    Args:
        x: (B, T, D) inputs
        W, U, b: (D, 4U), (U, 4U), (4U,) blocks, gate order i, f, g, o
        state0: initial (h, c), zeros when None

    Returns:
        hidden sequence (B, T, U), final (h, c), per-step cache
    """
    if x.ndim != 3 or W.shape[0] != x.shape[2] or U.shape[1] != W.shape[1] or U.shape[1] != 4 * U.shape[0] \
            or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"lstm_forward: input {x.shape} vs W {W.shape}, U {U.shape}, b {b.shape}")
    batch, steps, _ = x.shape
    units = U.shape[0]
    if state0 is None:
        h = np.zeros((batch, units), dtype=x.dtype)
        c = np.zeros((batch, units), dtype=x.dtype)
    else:
        h, c = state0
        if h.shape != (batch, units) or c.shape != (batch, units):
            raise ShapeMismatch(f"initial state {h.shape}/{c.shape}, expected {(batch, units)}")
    hs = np.empty((batch, steps, units), dtype=np.result_type(x, W))
    caches = []
    for t in range(steps):
        h, c, cache = _lstm_step(x[:, t], h, c, W, U, b)
        hs[:, t] = h
        caches.append(cache)
    return hs, (h, c), caches


def lstm_backward(dhs: np.ndarray, dh_final: np.ndarray, dc_final: np.ndarray, caches, W: np.ndarray, U: np.ndarray):
    """Reverse pass of lstm_forward; returns dx, dW, dU, db, dh0, dc0."""
    dW, dU = np.zeros_like(W), np.zeros_like(U)
    db = np.zeros(W.shape[1], dtype=W.dtype)
    batch, steps, _ = dhs.shape
    dx = np.empty((batch, steps, W.shape[0]), dtype=dhs.dtype)
    dh_rec, dc_rec = dh_final, dc_final
    for t in reversed(range(steps)):
        dx[:, t], dh_rec, dc_rec = _lstm_step_backward(dhs[:, t] + dh_rec, dc_rec, caches[t], W, U, dW, dU, db)
    return dx, dW, dU, db, dh_rec, dc_rec


# --- dense head -------------------------------------------------------------

def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _head_forward(a, spec: ModelSpec, weights: NetworkWeights):
    caches = []
    for k in range(spec.dense_layers):
        z = a @ weights[f"dense{k}_W"] + weights[f"dense{k}_b"]
        out = _activate(z, spec.dense_activation)
        caches.append((a, z, out))
        a = out
    caches.append(a)
    return a @ weights["out_W"] + weights["out_b"], caches


def _head_backward(dy, spec: ModelSpec, weights: NetworkWeights, caches, grads: NetworkWeights):
    a_last = caches[-1]
    grads["out_W"] += a_last.T @ dy
    grads["out_b"] += dy.sum(axis=0)
    da = dy @ weights["out_W"].T
    for k in reversed(range(spec.dense_layers)):
        a_in, z, out = caches[k]
        dz = da * _activation_grad(z, out, spec.dense_activation)
        grads[f"dense{k}_W"] += a_in.T @ dz
        grads[f"dense{k}_b"] += dz.sum(axis=0)
        da = dz @ weights[f"dense{k}_W"].T
    return da


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)


def _apply(mask, values):
    return values if mask is None else values * mask


# --- encoder-decoder --------------------------------------------------------

@dataclass
class ForwardCache:
    """Activations kept by the forward pass for backpropagation."""
    mode: str
    batch: int
    enc_caches: List[list] = field(default_factory=list)
    enc_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    head_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    head_caches: List[list] = field(default_factory=list)
    dec_caches: List[List[tuple]] = field(default_factory=list)
    dec_masks: List[List[Optional[np.ndarray]]] = field(default_factory=list)
    fed_back: List[bool] = field(default_factory=list)
    decoder_inputs: List[np.ndarray] = field(default_factory=list)


def seq2seq_forward(x: np.ndarray, spec: ModelSpec, weights: NetworkWeights, mode: str = "infer",
                    teacher_targets: Optional[np.ndarray] = None,
                    rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, ForwardCache]:
    """
    Forecast ``spec.horizon`` steps from a look-back window batch.

    The encoder's final (h, c) per layer seeds the matching decoder layer.
    In infer mode the decoder feeds back its own predictions, starting from
    the last observed target value; in train mode each step after the first
    takes the ground truth with probability ``spec.teacher_forcing``.
    Dropout is active only in train mode when an rng is supplied.

    Returns:
        predictions (B, horizon, output_dim) and the forward cache
    """
    if spec.horizon < 1:
        raise HorizonZero("horizon must be at least 1")
    if x.ndim != 3 or x.shape[1] != spec.look_back or x.shape[2] != spec.input_dim:
        raise ShapeMismatch(f"input {x.shape}, expected (B, {spec.look_back}, {spec.input_dim})")
    training = mode == "train"
    batch = x.shape[0]
    if training and spec.architecture == "seq2seq":
        if teacher_targets is None or teacher_targets.shape != (batch, spec.horizon, spec.output_dim):
            raise ShapeMismatch(f"train mode needs teacher targets shaped {(batch, spec.horizon, spec.output_dim)}")
    drop_rng = rng if training else None
    rate = spec.dropout_rate
    cache = ForwardCache(mode=mode, batch=batch)

    inputs = x
    finals = []
    for l in range(spec.encoder_layers):
        mask = _dropout_mask(drop_rng, inputs.shape, rate, x.dtype) if l > 0 else None
        hs, final, steps = lstm_forward(_apply(mask, inputs), weights[f"enc{l}_W"], weights[f"enc{l}_U"],
                                        weights[f"enc{l}_b"])
        cache.enc_masks.append(mask)
        cache.enc_caches.append(steps)
        finals.append(final)
        inputs = hs

    if spec.architecture == "direct":
        top = finals[-1][0]
        mask = _dropout_mask(drop_rng, top.shape, rate, x.dtype)
        out, head_cache = _head_forward(_apply(mask, top), spec, weights)
        cache.head_masks.append(mask)
        cache.head_caches.append(head_cache)
        return out.reshape(batch, spec.horizon, spec.output_dim), cache

    states = [finals[spec.decoder_source(l)] for l in range(spec.decoder_layers)]
    preds = np.empty((batch, spec.horizon, spec.output_dim), dtype=np.result_type(x, weights["out_W"]))
    u = x[:, -1, spec.target_index:spec.target_index + spec.output_dim]
    fed_back = False
    for s in range(spec.horizon):
        cache.decoder_inputs.append(u)
        cache.fed_back.append(fed_back)
        step_caches, step_masks = [], []
        inp = u
        for l in range(spec.decoder_layers):
            mask = _dropout_mask(drop_rng, inp.shape, rate, x.dtype) if l > 0 else None
            h, c, step = _lstm_step(_apply(mask, inp), states[l][0], states[l][1],
                                    weights[f"dec{l}_W"], weights[f"dec{l}_U"], weights[f"dec{l}_b"])
            states[l] = (h, c)
            step_caches.append(step)
            step_masks.append(mask)
            inp = h
        mask = _dropout_mask(drop_rng, inp.shape, rate, x.dtype)
        y, head_cache = _head_forward(_apply(mask, inp), spec, weights)
        preds[:, s] = y
        cache.dec_caches.append(step_caches)
        cache.dec_masks.append(step_masks)
        cache.head_masks.append(mask)
        cache.head_caches.append(head_cache)
        if s + 1 < spec.horizon:
            use_truth = training and (spec.teacher_forcing >= 1.0 or
                                      (rng is not None and rng.random() < spec.teacher_forcing))
            u = teacher_targets[:, s] if use_truth else y
            fed_back = not use_truth
    return preds, cache


def mae_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient sign(pred - target) / N, sign(0) = 0."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def backward(spec: ModelSpec, weights: NetworkWeights, cache: Optional[ForwardCache], dpred: np.ndarray) -> NetworkWeights:
    """
    Exact reverse-mode gradients of sum(dpred * pred) w.r.t. every parameter.

    Flows through dropout masks, the dense head, the decoder (including the
    feedback of predictions into later decoder inputs) and the encoder.
    """
    if cache is None or not cache.enc_caches:
        raise MissingCache("backward needs the cache of a forward pass")
    if dpred.shape != (cache.batch, spec.horizon, spec.output_dim):
        raise ShapeMismatch(f"loss gradient {dpred.shape} does not match the forward output")
    grads = weights.zeros_like()
    batch = cache.batch
    d_final_h = [np.zeros((batch, u), dtype=dpred.dtype) for u in spec.encoder_units]
    d_final_c = [np.zeros((batch, u), dtype=dpred.dtype) for u in spec.encoder_units]

    if spec.architecture == "direct":
        da = _head_backward(dpred.reshape(batch, -1), spec, weights, cache.head_caches[0], grads)
        d_final_h[-1] = _apply(cache.head_masks[0], da)
    else:
        dh_next = [np.zeros((batch, u), dtype=dpred.dtype) for u in spec.decoder_units]
        dc_next = [np.zeros((batch, u), dtype=dpred.dtype) for u in spec.decoder_units]
        d_feedback = None
        for s in reversed(range(spec.horizon)):
            dy = dpred[:, s] if d_feedback is None else dpred[:, s] + d_feedback
            d_above = _apply(cache.head_masks[s], _head_backward(dy, spec, weights, cache.head_caches[s], grads))
            for l in reversed(range(spec.decoder_layers)):
                dx, dh_next[l], dc_next[l] = _lstm_step_backward(
                    d_above + dh_next[l], dc_next[l], cache.dec_caches[s][l],
                    weights[f"dec{l}_W"], weights[f"dec{l}_U"],
                    grads[f"dec{l}_W"], grads[f"dec{l}_U"], grads[f"dec{l}_b"])
                d_above = _apply(cache.dec_masks[s][l], dx)
            d_feedback = d_above if cache.fed_back[s] else None
        for l in range(spec.decoder_layers):
            source = spec.decoder_source(l)
            d_final_h[source] = d_final_h[source] + dh_next[l]
            d_final_c[source] = d_final_c[source] + dc_next[l]

    d_hs = None
    for l in reversed(range(spec.encoder_layers)):
        steps = cache.enc_caches[l]
        if d_hs is None:
            d_hs = np.zeros((batch, len(steps), spec.encoder_units[l]), dtype=dpred.dtype)
        dx, dW, dU, db, _, _ = lstm_backward(d_hs, d_final_h[l], d_final_c[l], steps,
                                             weights[f"enc{l}_W"], weights[f"enc{l}_U"])
        grads[f"enc{l}_W"] += dW
        grads[f"enc{l}_U"] += dU
        grads[f"enc{l}_b"] += db
        d_hs = _apply(cache.enc_masks[l], dx)
    return grads


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, weights: NetworkWeights, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = {k: np.zeros_like(v) for k, v in weights.items()}
        return cls(m=zeros, v={k: np.zeros_like(v) for k, v in weights.items()}, t=0,
                   learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(weights: NetworkWeights, grads: NetworkWeights, state: AdamState) -> Tuple[NetworkWeights, AdamState]:
    """One bias-corrected Adam update; refuses non-finite gradients."""
    if weights.names() != grads.names():
        raise ShapeMismatch("gradient blocks do not match weight blocks")
    for name, g in grads.items():
        if g.shape != weights[name].shape:
            raise ShapeMismatch(f"gradient {name} shaped {g.shape}, weight {weights[name].shape}")
        if not np.isfinite(g).all():
            logger.warning(f"NonFiniteGradient in {name}; update refused")
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    new_blocks, m, v = {}, {}, {}
    for name, g in grads.items():
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        new_blocks[name] = weights[name] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, t=t, learning_rate=state.learning_rate, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return NetworkWeights(new_blocks), new_state


# --- training ---------------------------------------------------------------

class TrainHyperparams(BaseModel):
    learning_rate: float = Field(1e-3, gt=0)
    dropout: Optional[float] = Field(None, ge=0.0, le=0.9)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(100, ge=0)
    patience: int = Field(10, ge=1)


@dataclass
class TrainingData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: Optional[np.ndarray] = None
    val_y: Optional[np.ndarray] = None


def predict(spec: ModelSpec, weights: NetworkWeights, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Dropout-free autoregressive inference, batched."""
    outputs = [seq2seq_forward(x[i:i + batch_size], spec, weights, "infer")[0] for i in range(0, len(x), batch_size)]
    if not outputs:
        return np.empty((0, spec.horizon, spec.output_dim))
    return np.concatenate(outputs, axis=0)


def evaluate_mae(spec: ModelSpec, weights: NetworkWeights, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.abs(predict(spec, weights, x) - y).mean())


def train(spec: ModelSpec, data: TrainingData, hyperparams: TrainHyperparams, seed: int = 0,
          initial_weights: Optional[NetworkWeights] = None) -> Tuple[NetworkWeights, pd.DataFrame]:
    """
    Mini-batch Adam on MAE with early stopping on validation MAE.

    The best-validation weights are restored at the end; a warm start
    counts as a candidate, so continued training never returns weights that
    validate worse than the ones it started from. Without a validation split
    the training MAE drives early stopping. Runs are fully determined by seed.

    Returns:
        (weights, trace with columns epoch, train_mae, val_mae)
    """
    if data.train_x is None or len(data.train_x) == 0:
        raise NoData("training needs at least one window")
    if hyperparams.dropout is not None and hyperparams.dropout != spec.dropout_rate:
        spec = spec.model_copy(update={"dropout_rate": hyperparams.dropout})
    dtype = data.train_x.dtype
    weights = initial_weights.copy() if initial_weights is not None else init_weights(spec, seed, dtype)
    trace_rows: List[Dict[str, float]] = []
    columns = ["epoch", "train_mae", "val_mae"]
    if hyperparams.max_epochs == 0:
        return weights, pd.DataFrame(trace_rows, columns=columns)

    rng = np.random.default_rng(seed)
    adam = AdamState.fresh(weights, hyperparams.learning_rate)
    has_val = data.val_x is not None and len(data.val_x) > 0
    best_score, best_weights, waited = np.inf, weights.copy(), 0
    if initial_weights is not None and has_val:
        best_score = evaluate_mae(spec, weights, data.val_x, data.val_y)
    n = len(data.train_x)
    for epoch in range(1, hyperparams.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyperparams.batch_size):
            rows = order[start:start + hyperparams.batch_size]
            xb, yb = data.train_x[rows], data.train_y[rows]
            pred, cache = seq2seq_forward(xb, spec, weights, "train", yb, rng)
            loss, dpred = mae_loss(pred, yb)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}", pd.DataFrame(trace_rows, columns=columns))
            weights, adam = adam_step(weights, backward(spec, weights, cache, dpred), adam)
            total += loss * len(rows)
        if not weights.all_finite():
            raise DivergedLoss(f"non-finite weights at epoch {epoch}", pd.DataFrame(trace_rows, columns=columns))
        train_mae = total / n
        val_mae = evaluate_mae(spec, weights, data.val_x, data.val_y) if has_val else float("nan")
        if not np.isfinite(train_mae) or (has_val and not np.isfinite(val_mae)):
            raise DivergedLoss(f"non-finite MAE at epoch {epoch}", pd.DataFrame(trace_rows, columns=columns))
        trace_rows.append({"epoch": epoch, "train_mae": train_mae, "val_mae": val_mae})
        score = val_mae if has_val else train_mae
        if score < best_score:
            best_score, best_weights, waited = score, weights.copy(), 0
        else:
            waited += 1
            if waited >= hyperparams.patience:
                logger.info(f"Early stop at epoch {epoch}, best score {best_score:.6f}")
                break
    return best_weights, pd.DataFrame(trace_rows, columns=columns)


# --- model files ------------------------------------------------------------

def save_model(path: str, spec: ModelSpec, weights: NetworkWeights, plan_fingerprint: str = "",
               config_hash: str = "", extra: Optional[Dict] = None) -> None:
    """Versioned JSON: spec, base64 little-endian f64 weight blobs, provenance."""
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": spec.model_dump(mode="json"),
        "weights": weights.to_payload(),
        "plan_fingerprint": plan_fingerprint,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as file:
        json.dump(payload, file, sort_keys=True, indent=1)


def load_model(path: str) -> Tuple[ModelSpec, NetworkWeights, Dict]:
    """Inverse of save_model; blocks come back in network order whatever the file order."""
    try:
        with open(path, "r", encoding="utf-8") as file:
            payload = json.load(file)
    except FileNotFoundError as e:
        raise MissingArtifact(f"model file not found: {path}") from e
    except (OSError, ValueError) as e:
        raise ArtifactMismatch(f"unreadable model file {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != MODEL_FORMAT_VERSION:
        version = payload.get("format_version") if isinstance(payload, dict) else None
        raise ArtifactMismatch(f"unsupported model format {version} in {path}")
    try:
        spec = ModelSpec.model_validate(payload["spec"])
        stored = NetworkWeights.from_payload(payload["weights"])
        blocks = {}
        for name, shape, _ in _block_shapes(spec):
            if stored[name].shape != shape:
                raise ShapeMismatch(f"block {name} shaped {stored[name].shape}, expected {shape}")
            blocks[name] = stored[name]
    except (KeyError, ValueError, TypeError, ShapeMismatch) as e:
        raise ArtifactMismatch(f"model file {path} does not match its spec: {e}") from e
    return spec, NetworkWeights(blocks), payload


# --- forecaster interface ---------------------------------------------------

class Forecaster(ABC):
    """Anything the evaluator and the drift monitor can drive."""

    look_back: int
    horizon: int
    target_index: int

    @abstractmethod
    def predict(self, x: np.ndarray) -> np.ndarray:
        """(N, look_back, F) windows -> (N, horizon) normalized target forecasts."""

    @abstractmethod
    def fine_tune(self, x: np.ndarray, y: np.ndarray, epochs: int, lr_scale: float, seed: int = 0) -> None:
        """Continue training the current weights on (N, L, F) / (N, H) windows."""


class NeuralForecaster(Forecaster):
    def __init__(self, spec: ModelSpec, weights: NetworkWeights, hyperparams: Optional[TrainHyperparams] = None):
        self.spec = spec
        self.weights = weights.copy()
        self.hyperparams = hyperparams or TrainHyperparams()
        self.look_back = spec.look_back
        self.horizon = spec.horizon
        self.target_index = spec.target_index

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self.spec, self.weights, x)[:, :, 0]

    def fine_tune(self, x: np.ndarray, y: np.ndarray, epochs: int, lr_scale: float, seed: int = 0) -> None:
        """
        Warm-started training on the given windows.

        The windows double as the selection set, scored by dropout-free
        autoregressive MAE as the monitor scores them; the current weights are
        kept when no epoch beats them.
        """
        if epochs <= 0 or len(x) == 0:
            return
        params = self.hyperparams.model_copy(update={
            "learning_rate": self.hyperparams.learning_rate * lr_scale,
            "max_epochs": epochs,
            "patience": min(self.hyperparams.patience, epochs),
        })
        targets = y.reshape(len(y), self.horizon, self.spec.output_dim)
        before = evaluate_mae(self.spec, self.weights, x, targets)
        self.weights, trace = train(self.spec, TrainingData(x, targets, x, targets), params, seed,
                                    initial_weights=self.weights)
        after = evaluate_mae(self.spec, self.weights, x, targets)
        logger.info(f"Fine-tuned {len(trace)} epochs on {len(x)} windows: MAE {before:.6f} -> {after:.6f}")
