"""Magnitude-ranked pruning masks over recalibrated parameters.

Ranking is per weight tensor. For pruning percentage ``p`` the threshold is
the value of rank ``floor(p/100 * size)`` (1-based, ascending) among the
absolute values; a position is kept iff its magnitude is strictly greater.
Biases are never masked.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .param_space import ModelSpec, ParamSet, SchemaError


@dataclass(frozen=True)
class Mask:
    bits: Dict[str, np.ndarray]
    p: float

    def kept_fraction(self, name: str) -> float:
        return float(self.bits[name].mean())


def threshold(values: np.ndarray, p: float) -> float:
    """Magnitude at rank floor(p/100 * size); -inf when nothing is pruned."""
    a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    rank = int(np.floor(p / 100.0 * a.size))
    if rank == 0:
        return -np.inf
    return float(np.partition(a, rank - 1)[rank - 1])


def compute_mask(params: ParamSet, spec: ModelSpec, p: float) -> Mask:
    if not 0.0 <= p < 100.0:
        raise ValueError(f"pruning percentage must be in [0, 100), got {p}")
    bits = {}
    for t in spec.tensors:
        if t.role == "bias":
            bits[t.name] = np.ones(t.shape, dtype=np.uint8)
            continue
        v = np.asarray(params[t.name], dtype=np.float64)
        bits[t.name] = (np.abs(v) > threshold(v, p)).astype(np.uint8)
    return Mask(bits, float(p))


def full_mask(spec: ModelSpec) -> Mask:
    return Mask({t.name: np.ones(t.shape, dtype=np.uint8) for t in spec.tensors}, 0.0)


def apply_mask(params: ParamSet, mask: Mask) -> ParamSet:
    out = {}
    for name, v in params.items():
        b = mask.bits[name]
        if np.shape(v) != b.shape:
            raise SchemaError(f"{name}: mask shape {b.shape} != param shape {np.shape(v)}")
        out[name] = np.where(b.astype(bool), v, 0.0)
    return out


def comm_cost(mask: Mask) -> dict:
    transmitted = int(sum(int(b.sum()) for b in mask.bits.values()))
    total = int(sum(b.size for b in mask.bits.values()))
    return {"transmitted": transmitted, "total": total,
            "ratio": transmitted / total if total else 1.0}


def pack_mask(mask: Mask) -> Dict[str, np.ndarray]:
    """Bit-packed per-tensor arrays for logging."""
    return {name: np.packbits(b.ravel()) for name, b in mask.bits.items()}


def unpack_mask(packed: Dict[str, np.ndarray], spec: ModelSpec, p: float) -> Mask:
    return Mask({t.name: np.unpackbits(packed[t.name], count=t.size).reshape(t.shape)
                 for t in spec.tensors}, p)
