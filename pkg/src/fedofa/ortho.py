"""Soft orthogonality penalty on weight tensors.

Each weight tensor is viewed as a matrix ``O`` of shape (u, m) (conv kernels as
(n_filters, S_in*k*k)); the Gram matrix is taken along the smaller dimension
so that the identity target is attainable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .param_space import ModelSpec, ParamSet


@dataclass(frozen=True)
class ORConfig:
    lam: float = 1e-4
    include_dense: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


def _weight_names(spec: ModelSpec, cfg: ORConfig):
    roles = ("conv-kernel", "dense-weight") if cfg.include_dense else ("conv-kernel",)
    return [t.name for t in spec.by_role(*roles)]


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def gram_defect(O: np.ndarray) -> np.ndarray:
    u, m = O.shape
    if u <= m:
        return O @ O.T - np.eye(u)
    return O.T @ O - np.eye(m)


def or_penalty(params: ParamSet, spec: ModelSpec, cfg: ORConfig = ORConfig()) -> float:
    names = _weight_names(spec, cfg)
    if not names:
        return 0.0
    total = sum(float(np.sum(gram_defect(_as_matrix(params[n])) ** 2)) for n in names)
    return cfg.lam / len(names) * total


def or_gradient(params: ParamSet, spec: ModelSpec, cfg: ORConfig = ORConfig()) -> ParamSet:
    names = _weight_names(spec, cfg)
    grad = {t.name: np.zeros(t.shape) for t in spec.tensors}
    if not names:
        return grad
    c = 4.0 * cfg.lam / len(names)
    for n in names:
        O = _as_matrix(params[n])
        D = gram_defect(O)
        g = D @ O if O.shape[0] <= O.shape[1] else O @ D
        grad[n] = (c * g).reshape(spec[n].shape)
    return grad
