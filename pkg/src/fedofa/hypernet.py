"""Hypernetwork that maps a client embedding to the full client parameter set.

The generator is an MLP trunk (ReLU after every hidden layer) followed by one
linear head per target tensor. Backward passes are written out by hand so the
server update can pull an arbitrary cotangent back to the embedding and to
the generator weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .param_space import ModelSpec, ParamSet, validate

Weights = Dict[str, np.ndarray]


@dataclass(frozen=True)
class HypernetState:
    spec: ModelSpec
    embeddings: np.ndarray  # (n_clients, D)
    phi: Weights = field(repr=False)
    n_hidden: int = 3
    seed: int = 0

    @property
    def n_clients(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def hidden_width(self) -> int:
        if self.n_hidden == 0:
            return self.embed_dim
        return self.phi["trunk.0.weight"].shape[0]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_hypernet(spec: ModelSpec, n_clients: int, D: int = 100, W_h: int = 100,
                  seed: int = 0, n_hidden: int = 3, embed_std: float = 1.0) -> HypernetState:
    """Seeded initialisation: Gaussian embeddings, fan-in uniform weights."""
    if n_clients < 1 or D < 1 or W_h < 1:
        raise ValueError("n_clients, D and W_h must all be >= 1")
    if n_hidden < 0:
        raise ValueError("n_hidden must be >= 0")
    rng = np.random.default_rng(seed)
    embeddings = embed_std * rng.standard_normal((n_clients, D))
    phi: Weights = {}
    width_in = D
    for i in range(n_hidden):
        phi[f"trunk.{i}.weight"] = _uniform(rng, width_in, (W_h, width_in))
        phi[f"trunk.{i}.bias"] = _uniform(rng, width_in, (W_h,))
        width_in = W_h
    for t in spec.tensors:
        phi[f"head.{t.name}.weight"] = _uniform(rng, width_in, (t.size, width_in))
        phi[f"head.{t.name}.bias"] = _uniform(rng, width_in, (t.size,))
    return HypernetState(spec, embeddings, phi, n_hidden, seed)


def _check_client(state: HypernetState, client_id: int) -> None:
    if not 0 <= int(client_id) < state.n_clients:
        raise IndexError(f"client_id {client_id} out of range [0, {state.n_clients})")


def _trunk_forward(state: HypernetState, v: np.ndarray):
    acts = [v]
    x = v
    for i in range(state.n_hidden):
        x = np.maximum(state.phi[f"trunk.{i}.weight"] @ x + state.phi[f"trunk.{i}.bias"], 0.0)
        acts.append(x)
    return acts


def generate_params(state: HypernetState, client_id: int) -> ParamSet:
    _check_client(state, client_id)
    feat = _trunk_forward(state, state.embeddings[client_id])[-1]
    return {
        t.name: (state.phi[f"head.{t.name}.weight"] @ feat
                 + state.phi[f"head.{t.name}.bias"]).reshape(t.shape)
        for t in state.spec.tensors
    }


def hypernet_vjp(state: HypernetState, client_id: int,
                 cotangent: ParamSet) -> Tuple[np.ndarray, Weights]:
    """Exact vector-Jacobian product of ``generate_params`` at ``client_id``.

    Returns the gradient w.r.t. the client's embedding and a dict of
    gradients keyed like ``state.phi``.
    """
    _check_client(state, client_id)
    validate(cotangent, state.spec)
    acts = _trunk_forward(state, state.embeddings[client_id])
    feat = acts[-1]
    grads: Weights = {}
    g_feat = np.zeros_like(feat)
    for t in state.spec.tensors:
        c = np.asarray(cotangent[t.name], dtype=np.float64).ravel()
        grads[f"head.{t.name}.weight"] = np.outer(c, feat)
        grads[f"head.{t.name}.bias"] = c.copy()
        g_feat += state.phi[f"head.{t.name}.weight"].T @ c
    g = g_feat
    for i in reversed(range(state.n_hidden)):
        g = g * (acts[i + 1] > 0)
        grads[f"trunk.{i}.weight"] = np.outer(g, acts[i])
        grads[f"trunk.{i}.bias"] = g
        g = state.phi[f"trunk.{i}.weight"].T @ g
    ordered = {k: grads[k] for k in state.phi}
    return g, ordered


def apply_gradients(state: HypernetState, client_id: int, g_embed: np.ndarray,
                    g_phi: Weights, lr_phi: float, lr_embed: float) -> HypernetState:
    """One SGD step; only ``client_id``'s embedding row moves."""
    embeddings = state.embeddings
    if lr_embed != 0.0:
        embeddings = embeddings.copy()
        embeddings[client_id] = embeddings[client_id] - lr_embed * g_embed
    phi = state.phi
    if lr_phi != 0.0:
        phi = {k: w - lr_phi * g_phi[k] for k, w in state.phi.items()}
    return replace(state, embeddings=embeddings, phi=phi)


def apply_server_update(state: HypernetState, client_id: int, delta: ParamSet,
                        lr_phi: float = 0.1, lr_embed: float = 0.1) -> HypernetState:
    """Descend along the pull-back of ``-delta`` through the generator.

    ``delta`` must already be expressed at the generator output (that is,
    pulled back through any recalibration stage by the caller).
    """
    for name, d in delta.items():
        if not np.all(np.isfinite(d)):
            raise FloatingPointError(f"non-finite delta in tensor {name!r}")
    cot = {k: -np.asarray(v, dtype=np.float64) for k, v in delta.items()}
    g_embed, g_phi = hypernet_vjp(state, client_id, cot)
    return apply_gradients(state, client_id, g_embed, g_phi, lr_phi, lr_embed)
