"""Stacked bidirectional LSTM/GRU sentiment classifier, NumPy only.

Architecture over a (usually frozen) embedding matrix:

    indices -> embedding -> spatial dropout
            -> bidirectional LSTM (concat)  -> dropout -> bidirectional GRU
            -> dropout -> masked global max pool over the GRU output
            .. plus a masked global max pool over the (dropped-out) LSTM output
            -> concat -> dense -> softmax over 3 classes

Index 0 marks left padding. Padded steps pass the recurrent state through
unchanged in both directions, and pooling ignores them, so adding more left
padding never changes the output. Training-mode forward keeps a full trace
for exact backpropagation through time; gradients are checked against
central finite differences in the test suite.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    IndexOutOfRangeError,
    ShapeMismatchError,
    ValidationError,
)
from .seeding import derive_rng

NUM_CLASSES = 3


@dataclass
class ModelConfig:
    max_len: int = 60
    emb_dim: int = 300
    lstm_units: int = 512
    gru_units: int = 256
    spatial_dropout_rate: float = 0.2
    dropout_rate: float = 0.3
    num_classes: int = NUM_CLASSES
    seed: int = 0
    train_embedding: bool = False

    def __post_init__(self):
        if self.lstm_units < 1 or self.gru_units < 1 or self.emb_dim < 1 or self.max_len < 1:
            raise ValidationError("model dimensions must be positive")
        for rate in (self.spatial_dropout_rate, self.dropout_rate):
            if not 0.0 <= rate < 1.0:
                raise ValidationError("dropout rates must lie in [0, 1)")
        if self.num_classes != NUM_CLASSES:
            raise ValidationError("the classifier head is fixed at 3 classes")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# parameter blocks in a fixed order; flat vectors concatenate these
_BLOCK_ORDER = (
    "lstm_fw_W", "lstm_fw_U", "lstm_fw_b",
    "lstm_bw_W", "lstm_bw_U", "lstm_bw_b",
    "gru_fw_W", "gru_fw_U", "gru_fw_b",
    "gru_bw_W", "gru_bw_U", "gru_bw_b",
    "dense_W", "dense_b",
)


@dataclass
class ModelParameters:
    """All weights plus the embedding matrix, addressable by block name."""

    blocks: Dict[str, np.ndarray]
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.blocks = {k: np.asarray(v, dtype=np.float64) for k, v in self.blocks.items()}
        missing = [name for name in _BLOCK_ORDER if name not in self.blocks]
        if missing:
            raise ValidationError(f"missing parameter blocks: {missing}")

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            blocks={k: v.copy() for k, v in self.blocks.items()},
            embedding=self.embedding.copy(),
        )


def trainable_block_names(config: ModelConfig) -> Tuple[str, ...]:
    names = _BLOCK_ORDER
    if config.train_embedding:
        names = names + ("embedding",)
    return names


def _get_block(params: ModelParameters, name: str) -> np.ndarray:
    return params.embedding if name == "embedding" else params.blocks[name]


def to_flat(params: ModelParameters, config: ModelConfig) -> np.ndarray:
    """Concatenate the trainable blocks into one float64 vector."""
    return np.concatenate([_get_block(params, n).ravel() for n in trainable_block_names(config)])


def from_flat(params: ModelParameters, config: ModelConfig, flat: np.ndarray) -> ModelParameters:
    """Rebuild a parameter set from a flat vector (round-trip of to_flat)."""
    flat = np.asarray(flat, dtype=np.float64)
    new = params.copy()
    offset = 0
    for name in trainable_block_names(config):
        block = _get_block(params, name)
        chunk = flat[offset:offset + block.size]
        if chunk.size != block.size:
            raise ShapeMismatchError("flat vector length does not match the parameter layout")
        value = chunk.reshape(block.shape)
        if name == "embedding":
            new.embedding = value.copy()
        else:
            new.blocks[name] = value.copy()
        offset += block.size
    if offset != flat.size:
        raise ShapeMismatchError("flat vector length does not match the parameter layout")
    return new


def grads_to_flat(grads: Dict[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in trainable_block_names(config)])


def init_parameters(
    config: ModelConfig,
    embedding: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> ModelParameters:
    """Glorot-uniform input kernels, scaled-uniform recurrent kernels.

    Biases start at zero except the LSTM forget gate, which starts at one.
    Draw order over blocks is fixed so a seed pins every weight.
    """
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 2 or embedding.shape[1] != config.emb_dim:
        raise ShapeMismatchError(
            f"embedding shape {embedding.shape} does not match emb_dim={config.emb_dim}"
        )
    if rng is None:
        rng = derive_rng(config.seed, "init")
    Hl, Hg, D, C = config.lstm_units, config.gru_units, config.emb_dim, config.num_classes

    def glorot(fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    def recurrent(units: int, shape: Tuple[int, ...]) -> np.ndarray:
        limit = 1.0 / np.sqrt(units)
        return rng.uniform(-limit, limit, size=shape)

    blocks: Dict[str, np.ndarray] = {}
    for d in ("fw", "bw"):
        blocks[f"lstm_{d}_W"] = glorot(D, Hl, (D, 4 * Hl))
        blocks[f"lstm_{d}_U"] = recurrent(Hl, (Hl, 4 * Hl))
        b = np.zeros(4 * Hl)
        b[Hl:2 * Hl] = 1.0
        blocks[f"lstm_{d}_b"] = b
    for d in ("fw", "bw"):
        blocks[f"gru_{d}_W"] = glorot(2 * Hl, Hg, (2 * Hl, 3 * Hg))
        blocks[f"gru_{d}_U"] = recurrent(Hg, (Hg, 3 * Hg))
        blocks[f"gru_{d}_b"] = np.zeros(3 * Hg)
    feat = 2 * Hl + 2 * Hg
    blocks["dense_W"] = glorot(feat, C, (feat, C))
    blocks["dense_b"] = np.zeros(C)
    return ModelParameters(blocks=blocks, embedding=embedding.copy())


# --- single-step cell operations ---

def lstm_cell_step(
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    params: Tuple[np.ndarray, np.ndarray, np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """One LSTM step; gates packed [input, forget, candidate, output].

    x is (..., D), states are (..., H); W is (D, 4H), U is (H, 4H), b is (4H,).
    """
    W, U, b = (np.asarray(a, dtype=np.float64) for a in params)
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = h_prev.shape[-1]
    if W.shape != (x.shape[-1], 4 * H) or U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeMismatchError(
            f"LSTM shapes inconsistent: x{x.shape} h{h_prev.shape} W{W.shape} U{U.shape} b{b.shape}"
        )
    if c_prev.shape != h_prev.shape:
        raise ShapeMismatchError("h_prev and c_prev must have the same shape")
    a = x @ W + h_prev @ U + b
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = sigmoid(a[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def gru_cell_step(
    x: np.ndarray,
    h_prev: np.ndarray,
    params: Tuple[np.ndarray, np.ndarray, np.ndarray],
) -> np.ndarray:
    """One GRU step; gates packed [update, reset, candidate].

    The reset gate scales the recurrent term inside the candidate:
    n = tanh(x Wn + r * (h_prev Un) + bn); h = (1 - z) * n + z * h_prev.
    """
    W, U, b = (np.asarray(a, dtype=np.float64) for a in params)
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    G = h_prev.shape[-1]
    if W.shape != (x.shape[-1], 3 * G) or U.shape != (G, 3 * G) or b.shape != (3 * G,):
        raise ShapeMismatchError(
            f"GRU shapes inconsistent: x{x.shape} h{h_prev.shape} W{W.shape} U{U.shape} b{b.shape}"
        )
    xw = x @ W
    hu = h_prev @ U
    z = sigmoid(xw[..., :G] + hu[..., :G] + b[:G])
    r = sigmoid(xw[..., G:2 * G] + hu[..., G:2 * G] + b[G:2 * G])
    n = np.tanh(xw[..., 2 * G:] + r * hu[..., 2 * G:] + b[2 * G:])
    return (1.0 - z) * n + z * h_prev


# --- masked bidirectional layers (training caches for BPTT) ---

def _lstm_direction_forward(X, mask, W, U, b, reverse: bool):
    if reverse:
        X = X[:, ::-1]
        mask = mask[:, ::-1]
    B, T, D = X.shape
    H = U.shape[0]
    xw_all = X.reshape(B * T, D) @ W
    xw_all = xw_all.reshape(B, T, 4 * H)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.empty((B, T, H))
    cache = []
    for t in range(T):
        a = xw_all[:, t] + h @ U + b
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        m = mask[:, t:t + 1]
        cache.append((h, c, i, f, g, o, tanh_c))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        out[:, t] = h
    if reverse:
        out = out[:, ::-1]
    return out, cache


def _lstm_direction_backward(dout, X, mask, W, U, b, cache, reverse: bool):
    if reverse:
        dout = dout[:, ::-1]
        X = X[:, ::-1]
        mask = mask[:, ::-1]
    B, T, D = X.shape
    H = U.shape[0]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros_like(b)
    dX = np.empty((B, T, D))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tanh_c = cache[t]
        m = mask[:, t:t + 1]
        dh_total = dout[:, t] + dh
        dh_new = m * dh_total
        dh_pass = (1.0 - m) * dh_total
        dc_new = m * dc
        dc_pass = (1.0 - m) * dc
        do = dh_new * tanh_c
        dc_new = dc_new + dh_new * o * (1.0 - tanh_c * tanh_c)
        df = dc_new * c_prev
        di = dc_new * g
        dg = dc_new * i
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dW += X[:, t].T @ da
        dU += h_prev.T @ da
        db += da.sum(axis=0)
        dX[:, t] = da @ W.T
        dh = da @ U.T + dh_pass
        dc = dc_new * f + dc_pass
    if reverse:
        dX = dX[:, ::-1]
    return dX, dW, dU, db


def _gru_direction_forward(X, mask, W, U, b, reverse: bool):
    if reverse:
        X = X[:, ::-1]
        mask = mask[:, ::-1]
    B, T, D = X.shape
    G = U.shape[0]
    xw_all = (X.reshape(B * T, D) @ W).reshape(B, T, 3 * G)
    h = np.zeros((B, G))
    out = np.empty((B, T, G))
    cache = []
    for t in range(T):
        xw = xw_all[:, t]
        hu = h @ U
        z = sigmoid(xw[:, :G] + hu[:, :G] + b[:G])
        r = sigmoid(xw[:, G:2 * G] + hu[:, G:2 * G] + b[G:2 * G])
        hu_n = hu[:, 2 * G:]
        n = np.tanh(xw[:, 2 * G:] + r * hu_n + b[2 * G:])
        h_new = (1.0 - z) * n + z * h
        m = mask[:, t:t + 1]
        cache.append((h, z, r, n, hu_n))
        h = m * h_new + (1.0 - m) * h
        out[:, t] = h
    if reverse:
        out = out[:, ::-1]
    return out, cache


def _gru_direction_backward(dout, X, mask, W, U, b, cache, reverse: bool):
    if reverse:
        dout = dout[:, ::-1]
        X = X[:, ::-1]
        mask = mask[:, ::-1]
    B, T, D = X.shape
    G = U.shape[0]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros_like(b)
    dX = np.empty((B, T, D))
    dh = np.zeros((B, G))
    for t in range(T - 1, -1, -1):
        h_prev, z, r, n, hu_n = cache[t]
        m = mask[:, t:t + 1]
        dh_total = dout[:, t] + dh
        dh_new = m * dh_total
        dh_pass = (1.0 - m) * dh_total
        dz = dh_new * (h_prev - n)
        dn = dh_new * (1.0 - z)
        dh_prev = dh_new * z + dh_pass
        da_n = dn * (1.0 - n * n)
        dr = da_n * hu_n
        dhu_n = da_n * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        dw_in = np.concatenate([da_z, da_r, da_n], axis=1)
        du_in = np.concatenate([da_z, da_r, dhu_n], axis=1)
        dW += X[:, t].T @ dw_in
        dU += h_prev.T @ du_in
        db += dw_in.sum(axis=0)
        dX[:, t] = dw_in @ W.T
        dh = dh_prev + du_in @ U.T
    if reverse:
        dX = dX[:, ::-1]
    return dX, dW, dU, db


def masked_max_pool(seq: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-feature max over valid (unmasked) steps.

    Returns (pooled, argmax, all_pad); an all-padding sequence pools to the
    zero vector. Ties route to the earliest step.
    """
    masked = np.where(mask[:, :, None] > 0.0, seq, -np.inf)
    argmax = masked.argmax(axis=1)
    pooled = np.take_along_axis(masked, argmax[:, None, :], axis=1)[:, 0]
    all_pad = mask.sum(axis=1) == 0
    if all_pad.any():
        pooled[all_pad] = 0.0
    return pooled, argmax, all_pad


def _masked_max_pool_backward(dpool, argmax, all_pad, shape) -> np.ndarray:
    dseq = np.zeros(shape)
    dpool = dpool.copy()
    if all_pad.any():
        dpool[all_pad] = 0.0
    np.put_along_axis(dseq, argmax[:, None, :], dpool[:, None, :], axis=1)
    return dseq


@dataclass
class ForwardTrace:
    """Every intermediate needed for an exact backward pass."""

    x: np.ndarray
    mask: np.ndarray
    emb: np.ndarray
    sd_mask: Optional[np.ndarray]
    emb_dropped: np.ndarray
    lstm_fw_cache: list
    lstm_bw_cache: list
    S: np.ndarray
    do1_mask: Optional[np.ndarray]
    S_dropped: np.ndarray
    gru_fw_cache: list
    gru_bw_cache: list
    G: np.ndarray
    do2_mask: Optional[np.ndarray]
    G_dropped: np.ndarray
    pool1: Tuple[np.ndarray, np.ndarray, np.ndarray]
    pool2: Tuple[np.ndarray, np.ndarray, np.ndarray]
    feats: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep


def forward(
    x: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Optional[ForwardTrace]]:
    """Run the network on an int index batch (B, T).

    Returns (probs, trace); the trace is populated only in training mode.
    Dropout is active only in training mode and draws masks from rng in a
    fixed order (spatial, after-LSTM, after-GRU).
    """
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected a (batch, time) index array, got shape {x.shape}")
    if x.size and (x.min() < 0 or x.max() >= params.embedding.shape[0]):
        raise IndexOutOfRangeError(
            f"token index outside embedding table of {params.embedding.shape[0]} rows"
        )
    needs_rng = training and (config.spatial_dropout_rate > 0 or config.dropout_rate > 0)
    if needs_rng and rng is None:
        raise ValidationError("training-mode forward with dropout needs an rng")

    mask = (x != 0).astype(np.float64)
    emb = params.embedding[x]

    sd_mask = None
    if training and config.spatial_dropout_rate > 0:
        sd_mask = _dropout_mask(rng, (emb.shape[0], 1, emb.shape[2]), config.spatial_dropout_rate)
        emb_dropped = emb * sd_mask
    else:
        emb_dropped = emb

    p = params.blocks
    fw_out, fw_cache = _lstm_direction_forward(
        emb_dropped, mask, p["lstm_fw_W"], p["lstm_fw_U"], p["lstm_fw_b"], reverse=False)
    bw_out, bw_cache = _lstm_direction_forward(
        emb_dropped, mask, p["lstm_bw_W"], p["lstm_bw_U"], p["lstm_bw_b"], reverse=True)
    S = np.concatenate([fw_out, bw_out], axis=2)

    do1_mask = None
    if training and config.dropout_rate > 0:
        do1_mask = _dropout_mask(rng, S.shape, config.dropout_rate)
        S_dropped = S * do1_mask
    else:
        S_dropped = S

    gfw_out, gfw_cache = _gru_direction_forward(
        S_dropped, mask, p["gru_fw_W"], p["gru_fw_U"], p["gru_fw_b"], reverse=False)
    gbw_out, gbw_cache = _gru_direction_forward(
        S_dropped, mask, p["gru_bw_W"], p["gru_bw_U"], p["gru_bw_b"], reverse=True)
    G = np.concatenate([gfw_out, gbw_out], axis=2)

    do2_mask = None
    if training and config.dropout_rate > 0:
        do2_mask = _dropout_mask(rng, G.shape, config.dropout_rate)
        G_dropped = G * do2_mask
    else:
        G_dropped = G

    pool1 = masked_max_pool(S_dropped, mask)
    pool2 = masked_max_pool(G_dropped, mask)
    feats = np.concatenate([pool1[0], pool2[0]], axis=1)

    logits = feats @ p["dense_W"] + p["dense_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)

    if not training:
        return probs, None
    trace = ForwardTrace(
        x=x, mask=mask, emb=emb, sd_mask=sd_mask, emb_dropped=emb_dropped,
        lstm_fw_cache=fw_cache, lstm_bw_cache=bw_cache, S=S,
        do1_mask=do1_mask, S_dropped=S_dropped,
        gru_fw_cache=gfw_cache, gru_bw_cache=gbw_cache, G=G,
        do2_mask=do2_mask, G_dropped=G_dropped,
        pool1=pool1, pool2=pool2, feats=feats, probs=probs, log_probs=log_probs,
    )
    return probs, trace


def _loss_from_trace(trace: ForwardTrace, labels: np.ndarray) -> float:
    B = trace.probs.shape[0]
    return float(-trace.log_probs[np.arange(B), labels].mean())


def _backward(
    trace: ForwardTrace,
    labels: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
) -> Dict[str, np.ndarray]:
    p = params.blocks
    B = trace.probs.shape[0]
    Hl = config.lstm_units
    grads: Dict[str, np.ndarray] = {}

    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(B), labels] = 1.0
    dlogits = (trace.probs - onehot) / B

    grads["dense_W"] = trace.feats.T @ dlogits
    grads["dense_b"] = dlogits.sum(axis=0)
    dfeats = dlogits @ p["dense_W"].T

    dpool1 = dfeats[:, :2 * Hl]
    dpool2 = dfeats[:, 2 * Hl:]

    dG_dropped = _masked_max_pool_backward(dpool2, trace.pool2[1], trace.pool2[2], trace.G.shape)
    dG = dG_dropped * trace.do2_mask if trace.do2_mask is not None else dG_dropped

    G_units = config.gru_units
    dS_fw, dWgf, dUgf, dbgf = _gru_direction_backward(
        dG[:, :, :G_units], trace.S_dropped, trace.mask,
        p["gru_fw_W"], p["gru_fw_U"], p["gru_fw_b"], trace.gru_fw_cache, reverse=False)
    dS_bw, dWgb, dUgb, dbgb = _gru_direction_backward(
        dG[:, :, G_units:], trace.S_dropped, trace.mask,
        p["gru_bw_W"], p["gru_bw_U"], p["gru_bw_b"], trace.gru_bw_cache, reverse=True)
    grads["gru_fw_W"], grads["gru_fw_U"], grads["gru_fw_b"] = dWgf, dUgf, dbgf
    grads["gru_bw_W"], grads["gru_bw_U"], grads["gru_bw_b"] = dWgb, dUgb, dbgb

    dS_dropped = dS_fw + dS_bw
    dS_dropped += _masked_max_pool_backward(dpool1, trace.pool1[1], trace.pool1[2], trace.S.shape)
    dS = dS_dropped * trace.do1_mask if trace.do1_mask is not None else dS_dropped

    dE_fw, dWlf, dUlf, dblf = _lstm_direction_backward(
        dS[:, :, :Hl], trace.emb_dropped, trace.mask,
        p["lstm_fw_W"], p["lstm_fw_U"], p["lstm_fw_b"], trace.lstm_fw_cache, reverse=False)
    dE_bw, dWlb, dUlb, dblb = _lstm_direction_backward(
        dS[:, :, Hl:], trace.emb_dropped, trace.mask,
        p["lstm_bw_W"], p["lstm_bw_U"], p["lstm_bw_b"], trace.lstm_bw_cache, reverse=True)
    grads["lstm_fw_W"], grads["lstm_fw_U"], grads["lstm_fw_b"] = dWlf, dUlf, dblf
    grads["lstm_bw_W"], grads["lstm_bw_U"], grads["lstm_bw_b"] = dWlb, dUlb, dblb

    if config.train_embedding:
        dE = dE_fw + dE_bw
        if trace.sd_mask is not None:
            dE = dE * trace.sd_mask
        dEmb = np.zeros_like(params.embedding)
        np.add.at(dEmb, trace.x, dE)
        grads["embedding"] = dEmb
    return grads


def loss_and_grad(
    x: np.ndarray,
    labels: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its flat gradient."""
    loss, _, grad = _loss_probs_grad(x, labels, params, config, rng)
    return loss, grad


def _loss_probs_grad(x, labels, params, config, rng):
    """Train-loop variant of loss_and_grad that also reports batch probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if labels.shape != (x.shape[0],):
        raise ShapeMismatchError(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= config.num_classes):
        raise IndexOutOfRangeError("labels must lie in 0..2")
    probs, trace = forward(x, params, config, training=True, rng=rng)
    loss = _loss_from_trace(trace, labels)
    grads = _backward(trace, labels, params, config)
    return loss, probs, grads_to_flat(grads, config)


def evaluate(
    x: np.ndarray,
    labels: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    batch_size: int = 256,
) -> Tuple[float, float]:
    """Inference-mode (loss, accuracy) over a full set, computed in chunks."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return float("nan"), float("nan")
    total_nll = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = x[start:start + batch_size]
        yb = labels[start:start + batch_size]
        probs, _ = forward(xb, params, config, training=False)
        eps_safe = np.clip(probs[np.arange(len(yb)), yb], 1e-300, None)
        total_nll += float(-np.log(eps_safe).sum())
        correct += int((probs.argmax(axis=1) == yb).sum())
    return total_nll / n, correct / n


def predict(
    x: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    batch_size: int = 256,
) -> np.ndarray:
    """Inference-mode class predictions for an index batch."""
    out = []
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    for start in range(0, len(x), batch_size):
        probs, _ = forward(x[start:start + batch_size], params, config, training=False)
        out.append(probs.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p_, y_ in zip(pred, labels):
        cm[int(y_), int(p_)] += 1
    return cm


# --- checkpoint serialization ---

_CKPT_MAGIC = b"EMBFUSEC"
_CKPT_VERSION = 1


def save_checkpoint(fh, params: ModelParameters, config: ModelConfig) -> None:
    """Binary checkpoint: magic, version, JSON config, named float64 blocks."""
    cfg_bytes = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    fh.write(_CKPT_MAGIC)
    fh.write(struct.pack("<I", _CKPT_VERSION))
    fh.write(struct.pack("<I", len(cfg_bytes)))
    fh.write(cfg_bytes)
    items = [("embedding", params.embedding)] + [(n, params.blocks[n]) for n in _BLOCK_ORDER]
    fh.write(struct.pack("<I", len(items)))
    for name, arr in items:
        name_b = name.encode("utf-8")
        fh.write(struct.pack("<H", len(name_b)))
        fh.write(name_b)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(fh) -> Tuple[ModelParameters, ModelConfig]:
    """Read a checkpoint written by save_checkpoint, validating the layout."""
    def read_exact(n: int) -> bytes:
        data = fh.read(n)
        if len(data) != n:
            raise ValidationError("checkpoint file is truncated")
        return data

    if read_exact(8) != _CKPT_MAGIC:
        raise ValidationError("not a model checkpoint file")
    (version,) = struct.unpack("<I", read_exact(4))
    if version != _CKPT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", read_exact(4))
    cfg = json.loads(read_exact(cfg_len).decode("utf-8"))
    config = ModelConfig(**cfg)
    (n_items,) = struct.unpack("<I", read_exact(4))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(n_items):
        (name_len,) = struct.unpack("<H", read_exact(2))
        name = read_exact(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", read_exact(1))
        shape = tuple(struct.unpack("<Q", read_exact(8))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(read_exact(count * 8), dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64)
    if "embedding" not in arrays:
        raise ValidationError("checkpoint is missing the embedding block")
    embedding = arrays.pop("embedding")
    params = ModelParameters(blocks=arrays, embedding=embedding)
    return params, config
