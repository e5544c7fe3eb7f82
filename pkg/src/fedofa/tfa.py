"""Two-stream filter-aware attention (TFA) over generated convolution kernels.

For a conv layer ``L`` with ``n`` filters of ``d = S_in*k*k`` entries each, the
flattened layer ``l`` (length ``N = n*d``) is embedded three times by
element-wise affine maps (query/key/value). Two streams then recalibrate it:

* inter-filter: one multi-head attention over the whole layer vector;
* intra-filter: one multi-head attention per filter, whose values are sliced
  from the inter-filter value heads.

Each stream mixes its heads with weights ``alpha`` and projects with a
per-position scale ``s`` and shift ``b``. With ``s = b = 0`` (the
initialisation) both streams return ``L`` unchanged. The layer output is the
convex combination ``w * L_intra + (1 - w) * L_inter``.

Attention scores are inner products computed with correctly rounded
summation (``math.fsum``) and head sums are accumulated left to right, so the
forward pass is reproducible bit-for-bit independently of BLAS blocking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .param_space import ModelSpec, ParamSet

EMBED_KEYS = ("emb_q_scale", "emb_q_shift", "emb_k_scale", "emb_k_shift",
              "emb_v_scale", "emb_v_shift")
INTRA_KEYS = ("intra_q_gamma", "intra_q_beta", "intra_k_gamma", "intra_k_beta",
              "intra_alpha", "intra_scale", "intra_shift")
INTER_KEYS = ("inter_q_gamma", "inter_q_beta", "inter_k_gamma", "inter_k_beta",
              "inter_v_gamma", "inter_v_beta", "inter_alpha", "inter_scale", "inter_shift")
PARAM_KEYS = EMBED_KEYS + INTRA_KEYS + INTER_KEYS


@dataclass(frozen=True)
class LayerAttentionParams:
    n_filters: int
    d_filter: int
    h_intra: int
    h_inter: int
    values: Dict[str, np.ndarray] = field(repr=False)

    @property
    def size(self) -> int:
        return self.n_filters * self.d_filter

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return param_shapes(self.n_filters, self.d_filter, self.h_intra, self.h_inter)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]


@dataclass(frozen=True)
class AttentionState:
    layers: Dict[str, LayerAttentionParams]
    passthrough: Tuple[str, ...]
    w: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"fusion weight w must be in [0, 1], got {self.w}")


def param_shapes(n: int, d: int, h_intra: int, h_inter: int) -> Dict[str, Tuple[int, ...]]:
    N = n * d
    shapes = {k: (N,) for k in EMBED_KEYS}
    shapes.update({
        "intra_q_gamma": (h_intra, d), "intra_q_beta": (h_intra, d),
        "intra_k_gamma": (h_intra, d), "intra_k_beta": (h_intra, d),
        "intra_alpha": (h_intra,), "intra_scale": (n, d), "intra_shift": (n, d),
    })
    for x in "qkv":
        shapes[f"inter_{x}_gamma"] = (h_inter, N)
        shapes[f"inter_{x}_beta"] = (h_inter, N)
    shapes.update({"inter_alpha": (h_inter,), "inter_scale": (N,), "inter_shift": (N,)})
    return shapes


def init_layer(n: int, d: int, h_intra: int, h_inter: int, rng: np.random.Generator,
               sigma: float = 0.02) -> LayerAttentionParams:
    """Near-identity start: scales ~ N(1, sigma), shifts zero, output scale zero."""
    if min(n, d, h_intra, h_inter) < 1:
        raise ValueError("filter count, filter size and head counts must be >= 1")
    values = {}
    for key, shape in param_shapes(n, d, h_intra, h_inter).items():
        if key.endswith(("_scale", "_gamma")) and key not in ("intra_scale", "inter_scale"):
            values[key] = 1.0 + sigma * rng.standard_normal(shape)
        elif key == "intra_alpha":
            values[key] = np.full(shape, 1.0 / h_intra)
        elif key == "inter_alpha":
            values[key] = np.full(shape, 1.0 / h_inter)
        else:
            values[key] = np.zeros(shape)
    return LayerAttentionParams(n, d, h_intra, h_inter, values)


def init_attention(spec: ModelSpec, h_intra: int = 2, h_inter: int = 8, w: float = 0.5,
                   seed: int = 0, sigma: float = 0.02) -> AttentionState:
    rng = np.random.default_rng(seed)
    layers = {}
    for t in spec.by_role("conv-kernel"):
        n, s_in, k, _ = t.shape
        layers[t.name] = init_layer(n, s_in * k * k, h_intra, h_inter, rng, sigma)
    passthrough = tuple(t.name for t in spec.tensors if t.role != "conv-kernel")
    return AttentionState(layers, passthrough, float(w))


# ---------------------------------------------------------------------------
# primitive operations

def exact_dot(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum((a * b).tolist())


def embed_layer(L: np.ndarray, params: LayerAttentionParams):
    """Query/key/value embeddings ``a * flatten(L) + c`` of a conv layer."""
    L = np.asarray(L, dtype=np.float64)
    if L.size != params.size or L.ndim != 4 or L.shape[0] != params.n_filters:
        raise ValueError(f"layer shape {L.shape} does not match attention params "
                         f"({params.n_filters} filters x {params.d_filter})")
    flat = L.ravel()
    return tuple(params[f"emb_{x}_scale"] * flat + params[f"emb_{x}_shift"] for x in "qkv")


def multi_head(e: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Row ``j`` is ``gamma[j] * e + beta[j]``."""
    e = np.asarray(e, dtype=np.float64)
    if gamma.shape != beta.shape or gamma.ndim != 2 or gamma.shape[1] != e.shape[-1]:
        raise ValueError(f"head projection shapes {gamma.shape}/{beta.shape} do not match embedding {e.shape}")
    return gamma * e + beta


def softmax_rows(S: np.ndarray) -> np.ndarray:
    out = np.empty_like(S)
    for r in range(S.shape[0]):
        ex = np.exp(S[r] - S[r].max())
        out[r] = ex / math.fsum(ex.tolist())
    return out


def combine_rows(weights: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``sum_t weights[t] * rows[t]`` accumulated in index order."""
    acc = np.zeros(rows.shape[1:])
    for t in range(rows.shape[0]):
        acc = acc + weights[t] * rows[t]
    return acc


def attention_map(Q: np.ndarray, K: np.ndarray, V: np.ndarray):
    """Head-by-head attention ``softmax(Q K^T / sqrt(d)) V``.

    Returns ``(out, A)`` where ``A`` is the (h, h) attention matrix.
    """
    if not (Q.shape == K.shape == V.shape) or Q.ndim != 2:
        raise ValueError(f"Q, K, V must share one (h, d) shape, got {Q.shape}, {K.shape}, {V.shape}")
    h, d = Q.shape
    scale = math.sqrt(d)
    S = np.array([[exact_dot(Q[r], K[t]) for t in range(h)] for r in range(h)]) / scale
    A = softmax_rows(S)
    out = np.stack([combine_rows(A[r], V) for r in range(h)])
    return out, A


# ---------------------------------------------------------------------------
# per-layer forward with cache

def _layer_forward(L: np.ndarray, p: LayerAttentionParams, w: float):
    n, d, ha, he = p.n_filters, p.d_filter, p.h_intra, p.h_inter
    flat = np.asarray(L, dtype=np.float64).ravel()
    e_q, e_k, e_v = embed_layer(L, p)

    # inter-filter stream
    Q = multi_head(e_q, p["inter_q_gamma"], p["inter_q_beta"])
    K = multi_head(e_k, p["inter_k_gamma"], p["inter_k_beta"])
    V = multi_head(e_v, p["inter_v_gamma"], p["inter_v_beta"])
    out_er, A_er = attention_map(Q, K, V)
    mix_er = combine_rows(p["inter_alpha"], out_er)
    l_inter = flat + (p["inter_scale"] * mix_er + p["inter_shift"])

    # intra-filter stream; value heads are slices of the inter value heads
    head_src = np.arange(ha) % he
    eq_f, ek_f = e_q.reshape(n, d), e_k.reshape(n, d)
    Vf = V.reshape(he, n, d)
    l_intra = np.empty((n, d))
    intra = []
    for j in range(n):
        Qj = multi_head(eq_f[j], p["intra_q_gamma"], p["intra_q_beta"])
        Kj = multi_head(ek_f[j], p["intra_k_gamma"], p["intra_k_beta"])
        Vj = Vf[head_src, j, :]
        out_j, A_j = attention_map(Qj, Kj, Vj)
        mix_j = combine_rows(p["intra_alpha"], out_j)
        l_intra[j] = flat[j * d:(j + 1) * d] + (p["intra_scale"][j] * mix_j + p["intra_shift"][j])
        intra.append((Qj, Kj, Vj, out_j, A_j, mix_j))

    out = w * l_intra.ravel() + (1.0 - w) * l_inter
    cache = dict(flat=flat, e=(e_q, e_k, e_v), inter=(Q, K, V, out_er, A_er, mix_er),
                 intra=intra, head_src=head_src)
    return out.reshape(L.shape), cache


def _softmax_attention_vjp(Q, K, V, A, g_out):
    """Cotangents of Q, K, V for ``out = softmax(Q K^T / sqrt(d)) V``."""
    d = Q.shape[1]
    g_A = g_out @ V.T
    g_V = A.T @ g_out
    g_S = A * (g_A - np.sum(g_A * A, axis=1, keepdims=True))
    g_S = g_S / math.sqrt(d)
    return g_S @ K, g_S.T @ Q, g_V


def _layer_vjp(p: LayerAttentionParams, w: float, cache, G: np.ndarray):
    n, d, ha, he = p.n_filters, p.d_filter, p.h_intra, p.h_inter
    G = np.asarray(G, dtype=np.float64).ravel()
    flat = cache["flat"]
    e_q, e_k, e_v = cache["e"]
    Q, K, V, out_er, A_er, mix_er = cache["inter"]
    grads = {k: np.zeros(s) for k, s in p.shapes().items()}

    g_flat = w * G + (1.0 - w) * G
    g_eq = np.zeros_like(e_q)
    g_ek = np.zeros_like(e_k)
    g_V = np.zeros_like(V)

    # inter stream
    G_er = (1.0 - w) * G
    grads["inter_scale"] = G_er * mix_er
    grads["inter_shift"] = G_er.copy()
    g_mix = G_er * p["inter_scale"]
    grads["inter_alpha"] = out_er @ g_mix
    g_out = np.outer(p["inter_alpha"], g_mix)
    g_Q, g_K, g_Vi = _softmax_attention_vjp(Q, K, V, A_er, g_out)
    g_V += g_Vi
    grads["inter_q_gamma"] = g_Q * e_q
    grads["inter_q_beta"] = g_Q
    grads["inter_k_gamma"] = g_K * e_k
    grads["inter_k_beta"] = g_K
    g_eq += np.sum(g_Q * p["inter_q_gamma"], axis=0)
    g_ek += np.sum(g_K * p["inter_k_gamma"], axis=0)

    # intra stream
    G_ra = ((w * G).reshape(n, d))
    eq_f, ek_f = e_q.reshape(n, d), e_k.reshape(n, d)
    g_eq_f, g_ek_f = g_eq.reshape(n, d), g_ek.reshape(n, d)
    g_Vf = g_V.reshape(he, n, d)
    head_src = cache["head_src"]
    for j, (Qj, Kj, Vj, out_j, A_j, mix_j) in enumerate(cache["intra"]):
        grads["intra_scale"][j] = G_ra[j] * mix_j
        grads["intra_shift"][j] = G_ra[j]
        g_mix_j = G_ra[j] * p["intra_scale"][j]
        grads["intra_alpha"] += out_j @ g_mix_j
        g_out_j = np.outer(p["intra_alpha"], g_mix_j)
        g_Qj, g_Kj, g_Vj = _softmax_attention_vjp(Qj, Kj, Vj, A_j, g_out_j)
        np.add.at(g_Vf[:, j, :], head_src, g_Vj)
        grads["intra_q_gamma"] += g_Qj * eq_f[j]
        grads["intra_q_beta"] += g_Qj
        grads["intra_k_gamma"] += g_Kj * ek_f[j]
        grads["intra_k_beta"] += g_Kj
        g_eq_f[j] += np.sum(g_Qj * p["intra_q_gamma"], axis=0)
        g_ek_f[j] += np.sum(g_Kj * p["intra_k_gamma"], axis=0)

    grads["inter_v_gamma"] = g_V * e_v
    grads["inter_v_beta"] = g_V.copy()
    g_ev = np.sum(g_V * p["inter_v_gamma"], axis=0)

    for x, g_e in zip("qkv", (g_eq, g_ek, g_ev)):
        grads[f"emb_{x}_scale"] = g_e * flat
        grads[f"emb_{x}_shift"] = g_e.copy()
        g_flat = g_flat + g_e * p[f"emb_{x}_scale"]
    return g_flat, grads


# ---------------------------------------------------------------------------
# layer- and model-level API

def intra_fa(L: np.ndarray, params: LayerAttentionParams) -> np.ndarray:
    """Intra-filter stream alone (the TFA output at ``w = 1``)."""
    return _layer_forward(L, params, 1.0)[0]


def inter_fa(L: np.ndarray, params: LayerAttentionParams) -> np.ndarray:
    """Inter-filter stream alone (the TFA output at ``w = 0``)."""
    return _layer_forward(L, params, 0.0)[0]


def tfa_forward(params_in: ParamSet, state: AttentionState):
    """Recalibrate every conv kernel; returns ``(params_out, cache)``."""
    out, cache = {}, {}
    for name, value in params_in.items():
        if name in state.layers:
            out[name], cache[name] = _layer_forward(value, state.layers[name], state.w)
        else:
            out[name] = np.array(value, dtype=np.float64, copy=True)
    return out, cache


def tfa_recalibrate(params_in: ParamSet, state: AttentionState) -> ParamSet:
    return tfa_forward(params_in, state)[0]


def tfa_vjp(state: AttentionState, cache, cotangent: ParamSet):
    """Pull ``cotangent`` (at the TFA output) back to the input parameters and
    to every attention parameter. Returns ``(g_params, g_attention)`` where
    ``g_attention`` maps layer name to a dict keyed like the layer's values."""
    g_params, g_attn = {}, {}
    for name, G in cotangent.items():
        if name in state.layers:
            p = state.layers[name]
            g_flat, g_attn[name] = _layer_vjp(p, state.w, cache[name], G)
            g_params[name] = g_flat.reshape(np.shape(G))
        else:
            g_params[name] = np.array(G, dtype=np.float64, copy=True)
    return g_params, g_attn


def apply_attention_gradients(state: AttentionState, grads, lr: float) -> AttentionState:
    if lr == 0.0:
        return state
    layers = {}
    for name, p in state.layers.items():
        g = grads[name]
        values = {k: v - lr * g[k] for k, v in p.values.items()}
        layers[name] = replace(p, values=values)
    return replace(state, layers=layers)


def zero_like_grads(state: AttentionState):
    return {name: {k: np.zeros_like(v) for k, v in p.values.items()} for name, p in state.layers.items()}
