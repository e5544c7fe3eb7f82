"""Tensor schema of client models and flat-vector conversion.

A :class:`ModelSpec` fixes the order of tensors; that order (row-major within
each tensor) is the single wire layout used for parameters, masks and deltas.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Tuple

import numpy as np

ROLES = ("conv-kernel", "dense-weight", "bias")

ParamSet = Dict[str, np.ndarray]


class SchemaError(ValueError):
    """Parameters do not match the model schema."""


@dataclass(frozen=True)
class TensorSpec:
    name: str
    role: str
    shape: Tuple[int, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown role {self.role!r} for {self.name}")
        if not self.shape or any(int(s) < 1 for s in self.shape):
            raise SchemaError(f"{self.name}: shape entries must be >= 1, got {self.shape}")
        if self.role == "conv-kernel":
            if len(self.shape) != 4 or self.shape[2] != self.shape[3]:
                raise SchemaError(f"{self.name}: conv kernels need shape (n_out, S_in, k, k)")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ModelSpec:
    tensors: Tuple[TensorSpec, ...]
    input_shape: Tuple[int, int, int]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate tensor names in {names}")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(t.name for t in self.tensors)

    def __getitem__(self, name: str) -> TensorSpec:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def by_role(self, *roles: str) -> Tuple[TensorSpec, ...]:
        return tuple(t for t in self.tensors if t.role in roles)

    @property
    def total_params(self) -> int:
        return sum(t.size for t in self.tensors)

    def offsets(self) -> Dict[str, slice]:
        """Slice of each tensor inside the flat vector."""
        out, start = {}, 0
        for t in self.tensors:
            out[t.name] = slice(start, start + t.size)
            start += t.size
        return out


def total_params(spec: ModelSpec) -> int:
    return spec.total_params


def _conv_pool(size: int, k: int = 5) -> int:
    return (size - k + 1) // 2


def lenet_spec(input_shape, n_classes: int) -> ModelSpec:
    """LeNet-5 style client model: two 5x5 convs (each followed by ReLU and
    2x2 max-pooling) and two dense layers.

    >>> [t.shape for t in lenet_spec((1, 28, 28), 10).tensors][::2]
    [(6, 1, 5, 5), (16, 6, 5, 5), (120, 256), (10, 120)]
    """
    c, h, w = (int(s) for s in input_shape)
    if c not in (1, 3):
        raise SchemaError(f"input channels must be 1 or 3, got {c}")
    fh, fw = _conv_pool(_conv_pool(h)), _conv_pool(_conv_pool(w))
    if min(h, w) < 12 or _conv_pool(h) < 5 or _conv_pool(w) < 5 or fh < 1 or fw < 1:
        raise SchemaError(f"input {input_shape} collapses after two conv/pool stages")
    if n_classes < 2:
        raise SchemaError("need at least two classes")
    tensors = [
        TensorSpec("conv1.weight", "conv-kernel", (6, c, 5, 5)),
        TensorSpec("conv1.bias", "bias", (6,)),
        TensorSpec("conv2.weight", "conv-kernel", (16, 6, 5, 5)),
        TensorSpec("conv2.bias", "bias", (16,)),
        TensorSpec("fc1.weight", "dense-weight", (120, 16 * fh * fw)),
        TensorSpec("fc1.bias", "bias", (120,)),
        TensorSpec("fc2.weight", "dense-weight", (n_classes, 120)),
        TensorSpec("fc2.bias", "bias", (n_classes,)),
    ]
    return ModelSpec(tuple(tensors), (c, h, w), n_classes)


def mlp_spec(n_features: int, n_classes: int, hidden: Iterable[int] = ()) -> ModelSpec:
    """Dense-only model on flat inputs of shape (n_features, 1, 1)."""
    widths = [int(n_features), *[int(x) for x in hidden], int(n_classes)]
    tensors = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        tensors.append(TensorSpec(f"fc{i + 1}.weight", "dense-weight", (b, a)))
        tensors.append(TensorSpec(f"fc{i + 1}.bias", "bias", (b,)))
    return ModelSpec(tuple(tensors), (int(n_features), 1, 1), int(n_classes))


def validate(params: ParamSet, spec: ModelSpec) -> None:
    missing = set(spec.names) - set(params)
    extra = set(params) - set(spec.names)
    if missing or extra:
        raise SchemaError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for t in spec.tensors:
        shape = np.shape(params[t.name])
        if tuple(shape) != t.shape:
            raise SchemaError(f"{t.name}: expected shape {t.shape}, got {tuple(shape)}")


def flatten(params: ParamSet, spec: ModelSpec) -> np.ndarray:
    validate(params, spec)
    if not spec.tensors:
        return np.zeros(0)
    return np.concatenate([np.asarray(params[t.name], dtype=np.float64).ravel() for t in spec.tensors])


def unflatten(vector, spec: ModelSpec) -> ParamSet:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != spec.total_params:
        raise SchemaError(f"vector length {vector.size} != total_params {spec.total_params}")
    return {name: vector[sl].reshape(spec[name].shape).copy() for name, sl in spec.offsets().items()}


def zeros(spec: ModelSpec) -> ParamSet:
    return {t.name: np.zeros(t.shape) for t in spec.tensors}


def ones(spec: ModelSpec) -> ParamSet:
    return {t.name: np.ones(t.shape) for t in spec.tensors}


def random_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 1.0) -> ParamSet:
    return {t.name: scale * rng.standard_normal(t.shape) for t in spec.tensors}


def check_finite(params: ParamSet, where: str = "") -> None:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values in tensor {name!r}{' during ' + where if where else ''}")
