"""Client-side model and local training in plain numpy.

The forward model is read off a :class:`ModelSpec`: every conv kernel is a
valid stride-1 convolution followed by ReLU and 2x2 max-pooling; dense
weights follow (ReLU between them, none after the last). Gradients are
hand-written.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .agps import Mask
from .param_space import ModelSpec, ParamSet, validate


@dataclass
class ClientDataset:
    features: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test splits overlap")


@dataclass(frozen=True)
class LocalTrainConfig:
    K: int = 50
    batch: int = 64
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.batch < 1:
            raise ValueError("K and batch must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def _layers(spec: ModelSpec):
    names = set(spec.names)
    out = []
    for t in spec.tensors:
        if t.role == "bias":
            continue
        prefix = t.name[:-len(".weight")] if t.name.endswith(".weight") else t.name
        bias = prefix + ".bias"
        out.append((t.role, t.name, bias if bias in names else None))
    return out


# ---------------------------------------------------------------------------
# primitives (activations are kept channels-last, NHWC)

def conv2d(x, W, b=None):
    """Valid stride-1 convolution of NHWC ``x`` with (F, C, k, k) ``W``."""
    F, C, k, _ = W.shape
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (B, Ho, Wo, C, k, k)
    B, Ho, Wo = win.shape[:3]
    cols = win.reshape(B * Ho * Wo, C * k * k)
    out = cols @ W.reshape(F, -1).T
    if b is not None:
        out += b
    return out.reshape(B, Ho, Wo, F), cols


def conv2d_backward(g_out, x_shape, W, cols, need_input=True):
    F, C, k, _ = W.shape
    B, Ho, Wo, _ = g_out.shape
    g2 = g_out.reshape(-1, F)
    gW = (g2.T @ cols).reshape(W.shape)
    gb = g2.sum(axis=0)
    if not need_input:
        return None, gW, gb
    g_cols = (g2 @ W.reshape(F, -1)).reshape(B, Ho, Wo, C, k, k)
    gx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            gx[:, i:i + Ho, j:j + Wo, :] += g_cols[..., i, j]
    return gx, gW, gb


def maxpool2(x):
    """2x2 max-pooling (floor); returns the output and the winning corner
    per window, ties resolved in row-major order."""
    h, w = x.shape[1] // 2, x.shape[2] // 2
    corners = [x[:, a:2 * h:2, c:2 * w:2, :] for a in (0, 1) for c in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    arg = np.where(corners[0] == out, 0, np.where(corners[1] == out, 1, np.where(corners[2] == out, 2, 3)))
    return out, arg


def maxpool2_backward(g_out, arg, x_shape):
    h, w = g_out.shape[1:3]
    gx = np.zeros(x_shape)
    for n, (a, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        gx[:, a:2 * h:2, c:2 * w:2, :] = np.where(arg == n, g_out, 0.0)
    return gx


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# model

def _forward(params: ParamSet, spec: ModelSpec, x: np.ndarray, keep: bool):
    layers = _layers(spec)
    tape = []
    h = np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(0, 2, 3, 1))
    last = len(layers) - 1
    for i, (role, wname, bname) in enumerate(layers):
        W = params[wname]
        b = params[bname] if bname else None
        if role == "conv-kernel":
            x_shape = h.shape
            z, cols = conv2d(h, W, b)
            a = np.maximum(z, 0.0)
            h, arg = maxpool2(a)
            tape.append(("conv", wname, bname, x_shape, cols, z, arg))
        else:
            x_shape = h.shape
            # dense weights index inputs in (C, H, W) order
            flat = h.transpose(0, 3, 1, 2).reshape(h.shape[0], -1) if h.ndim == 4 else h
            z = flat @ W.T
            if b is not None:
                z = z + b
            relu = i != last
            h = np.maximum(z, 0.0) if relu else z
            tape.append(("dense", wname, bname, x_shape, flat, z, relu))
    return h, (tape if keep else None)


def forward(params: ParamSet, spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Logits of shape (B, n_classes)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != spec.input_shape:
        raise ValueError(f"batch shape {batch.shape[1:]} != model input {spec.input_shape}")
    return _forward(params, spec, batch, keep=False)[0]


def loss_and_grad(params: ParamSet, spec: ModelSpec, x: np.ndarray,
                  y: np.ndarray) -> Tuple[float, ParamSet]:
    """Mean softmax cross-entropy and its gradient w.r.t. every tensor."""
    logits, tape = _forward(params, spec, x, keep=True)
    B = logits.shape[0]
    lsm = log_softmax(logits)
    loss = -float(np.mean(lsm[np.arange(B), y]))
    g = np.exp(lsm)
    g[np.arange(B), y] -= 1.0
    g /= B
    grads = {}
    for idx in reversed(range(len(tape))):
        entry = tape[idx]
        if entry[0] == "dense":
            _, wname, bname, in_shape, flat, z, relu = entry
            if relu:
                g = g * (z > 0)
            grads[wname] = g.T @ flat
            if bname:
                grads[bname] = g.sum(axis=0)
            if idx > 0:
                g = g @ params[wname]
                if len(in_shape) == 4:
                    B, H, W, C = in_shape
                    g = np.ascontiguousarray(g.reshape(B, C, H, W).transpose(0, 2, 3, 1))
        else:
            _, wname, bname, in_shape, cols, z, arg = entry
            g = maxpool2_backward(g, arg, z.shape) * (z > 0)
            gx, gW, gb = conv2d_backward(g, in_shape, params[wname], cols, need_input=idx > 0)
            grads[wname] = gW
            if bname:
                grads[bname] = gb
            g = gx
    return loss, {name: grads[name] for name in spec.names}


def task_loss(params: ParamSet, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> float:
    lsm = log_softmax(forward(params, spec, x))
    return -float(np.mean(lsm[np.arange(len(y)), y]))


def _batches(train_idx: np.ndarray, batch: int, K: int, rng: np.random.Generator):
    n = len(train_idx)
    size = min(batch, n)
    order, pos = rng.permutation(train_idx), 0
    for _ in range(K):
        if pos + size > n:
            order, pos = rng.permutation(train_idx), 0
        yield order[pos:pos + size]
        pos += size


def local_train(params: ParamSet, mask: Optional[Mask], data: ClientDataset, cfg: LocalTrainConfig,
                spec: ModelSpec) -> Tuple[ParamSet, List[float]]:
    """Run ``cfg.K`` SGD steps from ``params`` (already masked).

    Masked positions get zero gradient, so they stay at zero and contribute
    nothing to the returned delta. Returns ``(delta, loss_curve)`` with the
    mini-batch loss before each step.
    """
    validate(params, spec)
    if len(data.train_idx) == 0:
        raise ValueError("client has an empty training split")
    rng = np.random.default_rng(cfg.seed)
    keep = {k: mask.bits[k].astype(np.float64) for k in spec.names} if mask is not None else None
    theta = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    curve = []
    for idx in _batches(data.train_idx, cfg.batch, cfg.K, rng):
        loss, grads = loss_and_grad(theta, spec, data.features[idx], data.labels[idx])
        curve.append(loss)
        for k in spec.names:
            g = grads[k] if keep is None else grads[k] * keep[k]
            theta[k] = theta[k] - cfg.lr * g
    delta = {k: theta[k] - np.asarray(params[k], dtype=np.float64) for k in spec.names}
    return delta, curve


def predict(params: ParamSet, spec: ModelSpec, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [np.argmax(forward(params, spec, x[i:i + chunk]), axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: ParamSet, spec: ModelSpec, data: ClientDataset) -> float:
    """Test-split accuracy; argmax ties resolve to the lowest class index."""
    if len(data.test_idx) == 0:
        raise ValueError("client has an empty test split")
    pred = predict(params, spec, data.features[data.test_idx])
    return float(np.mean(pred == data.labels[data.test_idx]))
