"""Server checkpoints as a single ``.npz`` document.

Arrays are stored as raw float64, so save/load round-trips bit-exactly.
Layout: ``meta`` (JSON text), ``hypernet/embeddings``, ``hypernet/phi/<key>``,
``attention/<layer>/<key>``.
"""
from __future__ import annotations

import json

import numpy as np

from .hypernet import HypernetState
from .param_space import ModelSpec, TensorSpec
from .server import ServerState
from .tfa import AttentionState, LayerAttentionParams


def _spec_doc(spec: ModelSpec) -> dict:
    return {"input_shape": list(spec.input_shape), "n_classes": spec.n_classes,
            "tensors": [{"name": t.name, "role": t.role, "shape": list(t.shape)} for t in spec.tensors]}


def _spec_from_doc(doc: dict) -> ModelSpec:
    return ModelSpec(tuple(TensorSpec(t["name"], t["role"], tuple(t["shape"])) for t in doc["tensors"]),
                     tuple(doc["input_shape"]), doc["n_classes"])


def save_checkpoint(path, state: ServerState) -> None:
    h, a = state.hyper, state.attn
    meta = {
        "seed": h.seed,
        "n_hidden": h.n_hidden,
        "spec": _spec_doc(h.spec),
        "phi_keys": list(h.phi),
        "attention": {
            "w": a.w,
            "passthrough": list(a.passthrough),
            "layers": {name: {"n_filters": p.n_filters, "d_filter": p.d_filter,
                              "h_intra": p.h_intra, "h_inter": p.h_inter}
                       for name, p in a.layers.items()},
        },
    }
    arrays = {"meta": np.array(json.dumps(meta)), "hypernet/embeddings": h.embeddings}
    arrays.update({f"hypernet/phi/{k}": v for k, v in h.phi.items()})
    for name, p in a.layers.items():
        arrays.update({f"attention/{name}/{k}": v for k, v in p.values.items()})
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> ServerState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        spec = _spec_from_doc(meta["spec"])
        phi = {k: z[f"hypernet/phi/{k}"] for k in meta["phi_keys"]}
        hyper = HypernetState(spec, z["hypernet/embeddings"], phi, meta["n_hidden"], meta["seed"])
        att = meta["attention"]
        layers = {}
        for name, info in att["layers"].items():
            prefix = f"attention/{name}/"
            values = {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}
            layers[name] = LayerAttentionParams(info["n_filters"], info["d_filter"],
                                                info["h_intra"], info["h_inter"], values)
    return ServerState(hyper, AttentionState(layers, tuple(att["passthrough"]), att["w"]))
