"""Independent reference computations used by the tests.

These are written as scalar loops directly from the defining formulas and
deliberately share no code with the package (only ``math.fsum`` for inner
products and ``np.exp`` for the exponential).
"""
import math

import numpy as np


def _softmax(row):
    m = max(row)
    ex = np.exp(np.array([x - m for x in row]))
    den = math.fsum(ex.tolist())
    return [float(e) / den for e in ex]


def _attend(Q, K, V):
    """Q, K, V: lists of h rows (lists of floats). Returns h output rows."""
    h, d = len(Q), len(Q[0])
    out = []
    for r in range(h):
        scores = [math.fsum([Q[r][i] * K[t][i] for i in range(d)]) / math.sqrt(d) for t in range(h)]
        a = _softmax(scores)
        row = []
        for i in range(d):
            acc = 0.0
            for t in range(h):
                acc = acc + a[t] * V[t][i]
            row.append(acc)
        out.append(row)
    return out


def _project(heads, alpha, scale, shift):
    d = len(heads[0])
    out = []
    for i in range(d):
        acc = 0.0
        for r in range(len(heads)):
            acc = acc + alpha[r] * heads[r][i]
        out.append(scale[i] * acc + shift[i])
    return out


def tfa_layer(L, v, w):
    """Straight-line TFA of one layer. ``v`` maps parameter name to array."""
    n = L.shape[0]
    d = L[0].size
    N = n * d
    ha, he = v["intra_alpha"].size, v["inter_alpha"].size
    flat = [float(x) for x in L.reshape(-1)]
    emb = {}
    for x in "qkv":
        a, c = v[f"emb_{x}_scale"], v[f"emb_{x}_shift"]
        emb[x] = [a[i] * flat[i] + c[i] for i in range(N)]

    def heads(e, gamma, beta):
        return [[gamma[r][i] * e[i] + beta[r][i] for i in range(len(e))] for r in range(gamma.shape[0])]

    # inter-filter stream over the whole layer
    Qe = heads(emb["q"], v["inter_q_gamma"], v["inter_q_beta"])
    Ke = heads(emb["k"], v["inter_k_gamma"], v["inter_k_beta"])
    Ve = heads(emb["v"], v["inter_v_gamma"], v["inter_v_beta"])
    Pe = _project(_attend(Qe, Ke, Ve), v["inter_alpha"], v["inter_scale"], v["inter_shift"])
    L_inter = [flat[i] + Pe[i] for i in range(N)]

    # intra-filter stream, one filter at a time
    L_intra = []
    for j in range(n):
        lo, hi = j * d, (j + 1) * d
        Qa = heads(emb["q"][lo:hi], v["intra_q_gamma"], v["intra_q_beta"])
        Ka = heads(emb["k"][lo:hi], v["intra_k_gamma"], v["intra_k_beta"])
        Va = [Ve[r % he][lo:hi] for r in range(ha)]
        Pa = _project(_attend(Qa, Ka, Va), v["intra_alpha"], v["intra_scale"][j], v["intra_shift"][j])
        L_intra.extend(flat[lo + i] + Pa[i] for i in range(d))

    out = [w * L_intra[i] + (1.0 - w) * L_inter[i] for i in range(N)]
    return np.array(out).reshape(L.shape), np.array(L_intra).reshape(L.shape), np.array(L_inter).reshape(L.shape)


def lenet_forward(params, x):
    """Single-sample LeNet forward by explicit loops (NCHW, 5x5 convs, 2x2 max-pool)."""
    def conv_relu_pool(img, W, b):
        F, C, k, _ = W.shape
        H, Wd = img.shape[1], img.shape[2]
        Ho, Wo = H - k + 1, Wd - k + 1
        z = np.zeros((F, Ho, Wo))
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    z[f, i, j] = np.sum(img[:, i:i + k, j:j + k] * W[f]) + b[f]
        z = np.maximum(z, 0)
        pooled = np.zeros((F, Ho // 2, Wo // 2))
        for f in range(F):
            for i in range(Ho // 2):
                for j in range(Wo // 2):
                    pooled[f, i, j] = z[f, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
        return pooled

    h = conv_relu_pool(x, params["conv1.weight"], params["conv1.bias"])
    h = conv_relu_pool(h, params["conv2.weight"], params["conv2.bias"])
    h = h.reshape(-1)
    h = np.maximum(params["fc1.weight"] @ h + params["fc1.bias"], 0)
    return params["fc2.weight"] @ h + params["fc2.bias"]
