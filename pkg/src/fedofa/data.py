"""Dataset readers (MNIST IDX, CIFAR binary, synthetic blobs) and the
heterogeneous label partition across clients."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .client import ClientDataset

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32
# 5000-sample MNIST subset (500 per digit) shipped with the package
BUNDLED_MNIST = Path(__file__).parent / "_data" / "mnist5k"


class FormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class ArraySource:
    """A whole dataset before partitioning: images in [0, 1] and int labels."""
    features: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    n_classes: int

    def __len__(self):
        return len(self.labels)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string of unsigned bytes (MNIST layout)."""
    if len(raw) < 8:
        raise FormatError("IDX file shorter than its header")
    magic, = struct.unpack(">I", raw[:4])
    if magic == IDX_LABELS:
        ndim = 1
    elif magic == IDX_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"truncated IDX payload: expected {count} bytes, got {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Raw IDX array: labels as int64, images scaled to [0, 1] with shape (N, 1, H, W)."""
    arr = parse_idx(_read_bytes(path))
    if arr.ndim == 1:
        return arr.astype(np.int64)
    return (arr.astype(np.float64) / 255.0)[:, None, :, :]


def _find(root: Path, stem: str):
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    return None


def load_mnist(root) -> ArraySource:
    """Pool the train (and, if present, t10k) IDX files found under ``root``."""
    root = Path(root)
    feats, labels = [], []
    for prefix in ("train", "t10k"):
        img = _find(root, f"{prefix}-images-idx3-ubyte")
        lab = _find(root, f"{prefix}-labels-idx1-ubyte")
        if img is None or lab is None:
            continue
        x, y = load_idx(img), load_idx(lab)
        if len(x) != len(y):
            raise FormatError(f"{img.name} and {lab.name} disagree on sample count")
        feats.append(x)
        labels.append(y)
    if not feats:
        raise FileNotFoundError(f"no MNIST IDX files under {root}")
    return ArraySource(np.concatenate(feats), np.concatenate(labels), 10)


def parse_cifar(raw: bytes, variant: str = "cifar10"):
    label_bytes = {"cifar10": 1, "cifar100": 2}[variant]
    record = label_bytes + CIFAR_PIXELS
    if len(raw) % record:
        raise FormatError(f"file size {len(raw)} is not a multiple of the {record}-byte record")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = table[:, label_bytes - 1].astype(np.int64)  # fine label for CIFAR-100
    images = table[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar_binary(path, variant: str = "cifar10") -> ArraySource:
    images, labels = parse_cifar(_read_bytes(path), variant)
    return ArraySource(images, labels, 10 if variant == "cifar10" else 100)


def load_cifar(root, variant: str = "cifar10") -> ArraySource:
    root = Path(root)
    if variant == "cifar10":
        files = sorted(root.glob("data_batch_*.bin")) + sorted(root.glob("test_batch.bin"))
    else:
        files = [f for f in (root / "train.bin", root / "test.bin") if f.exists()]
    if not files:
        raise FileNotFoundError(f"no {variant} binary files under {root}")
    parts = [load_cifar_binary(f, variant) for f in files]
    return ArraySource(np.concatenate([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]), parts[0].n_classes)


def synth_dataset(n_classes: int, shape=(1, 28, 28), per_class: int = 100,
                  separation: float = 3.0, seed: int = 0) -> ArraySource:
    """Gaussian class blobs squashed into [0, 1] images.

    Class ``c`` has pre-activation mean ``separation * mu_c`` (unit-norm random
    direction) plus unit Gaussian noise per pixel; a logistic squash maps the
    result into [0, 1].
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    mu = rng.standard_normal((n_classes, dim))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), per_class)
    z = separation * mu[labels] + rng.standard_normal((len(labels), dim))
    x = 1.0 / (1.0 + np.exp(-z))
    return ArraySource(x.reshape(len(labels), *shape), labels.astype(np.int64), n_classes)


# ---------------------------------------------------------------------------
# partition

@dataclass
class PartitionPlan:
    classes: List[np.ndarray]  # per client, assigned classes (sorted)
    weights: np.ndarray  # (n_clients, n_classes), a_{i,c}; zero where not held
    ratios: np.ndarray  # (n_clients, n_classes), a_{i,c} / sum_j a_{j,c}
    train_idx: List[np.ndarray]
    test_idx: List[np.ndarray]

    @property
    def n_clients(self) -> int:
        return len(self.classes)


def assign_classes(n_clients: int, n_classes: int, classes_per_client: int,
                   rng: np.random.Generator, max_tries: int = 10_000) -> List[np.ndarray]:
    if classes_per_client > n_classes or classes_per_client < 1:
        raise ValueError(f"cannot give {classes_per_client} classes per client out of {n_classes}")
    if n_clients * classes_per_client < n_classes:
        raise ValueError(f"{n_clients} clients x {classes_per_client} classes cannot cover {n_classes} classes")
    for _ in range(max_tries):
        classes = [np.sort(rng.choice(n_classes, classes_per_client, replace=False))
                   for _ in range(n_clients)]
        if np.unique(np.concatenate(classes)).size == n_classes:
            return classes
    raise RuntimeError("could not cover every class; raise n_clients or classes_per_client")


def split_counts(n: int, ratios: Sequence[float]) -> np.ndarray:
    """Contiguous chunk sizes of ``n`` items by cumulative ratio (floored boundaries)."""
    edges = np.floor(np.cumsum(ratios) * n + 1e-9).astype(np.int64)
    edges[-1] = n
    return np.diff(np.concatenate([[0], edges]))


def make_partition(labels, n_clients: int, classes_per_client: int, rng: np.random.Generator,
                   n_classes: int | None = None, test_fraction: float = 1 / 6,
                   low: float = 0.4, high: float = 0.6) -> PartitionPlan:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    classes = assign_classes(n_clients, n_classes, classes_per_client, rng)
    weights = np.zeros((n_clients, n_classes))
    for i, cls in enumerate(classes):
        weights[i, cls] = rng.uniform(low, high, size=len(cls))
    ratios = weights / weights.sum(axis=0, keepdims=True)

    train = [[] for _ in range(n_clients)]
    test = [[] for _ in range(n_clients)]
    for c in range(n_classes):
        holders = np.flatnonzero(weights[:, c] > 0)
        idx = rng.permutation(np.flatnonzero(labels == c))
        counts = split_counts(len(idx), ratios[holders, c])
        start = 0
        for i, cnt in zip(holders, counts):
            chunk = idx[start:start + cnt]
            start += cnt
            n_test = max(1, int(cnt * test_fraction)) if cnt >= 2 else 0
            test[i].append(chunk[:n_test])
            train[i].append(chunk[n_test:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return PartitionPlan(classes, weights, ratios, [cat(t) for t in train], [cat(t) for t in test])


def client_datasets(source: ArraySource, plan: PartitionPlan) -> List[ClientDataset]:
    """Per-client views; each keeps its own copy of the samples it holds."""
    out = []
    for tr, te in zip(plan.train_idx, plan.test_idx):
        idx = np.concatenate([tr, te])
        out.append(ClientDataset(source.features[idx], source.labels[idx],
                                 np.arange(len(tr)), np.arange(len(tr), len(idx))))
    return out
