"""Experiment configuration and its TOML file form."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("baseline", "fedofa")
DATASETS = ("mnist", "cifar10", "cifar100", "synth")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "fedofa"
    n_clients: int = 10
    rounds: int = 300
    eval_interval: int = 25
    # client
    K: int = 50
    batch: int = 64
    lr: float = 0.01
    # hypernetwork
    embed_dim: int = 100
    hidden_width: int = 100
    n_hidden: int = 3
    lr_phi: float = 0.1
    lr_embed: float = 0.1
    # attention
    h_intra: int = 2
    h_inter: int = 8
    w: float = 0.5
    lr_attn: float = 0.1
    # orthogonal regularisation
    or_lambda: float = 1e-4
    or_include_dense: bool = True
    lr_or: float = 0.01
    # pruning
    p: float = 0.0
    # data
    data_name: str = "mnist"
    data_root: Optional[str] = None
    classes_per_client: Optional[int] = None
    synth_per_class: int = 300
    synth_separation: float = 3.0
    synth_shape: tuple = (1, 28, 28)
    synth_classes: int = 10
    # seeds
    seed_partition: int = 0
    seed_init: int = 0
    seed_train: int = 0
    dump_masks: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.data_name not in DATASETS:
            raise ValueError(f"data.name must be one of {DATASETS}, got {self.data_name!r}")
        if self.n_clients < 1 or self.rounds < 0 or self.eval_interval < 1:
            raise ValueError("n_clients >= 1, rounds >= 0 and eval_interval >= 1 required")
        if self.K < 1 or self.batch < 1 or self.lr < 0:
            raise ValueError("K >= 1, batch >= 1 and lr >= 0 required")
        if min(self.embed_dim, self.hidden_width) < 1 or self.n_hidden < 0:
            raise ValueError("hypernetwork sizes must be positive")
        if self.h_intra < 1 or self.h_inter < 1:
            raise ValueError("head counts must be >= 1")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must be in [0, 1]")
        if self.or_lambda < 0:
            raise ValueError("or.lambda must be non-negative")
        if not 0.0 <= self.p < 100.0:
            raise ValueError("agps.p must be in [0, 100)")
        if min(self.lr_phi, self.lr_embed, self.lr_attn, self.lr_or) < 0:
            raise ValueError("server learning rates must be non-negative")
        object.__setattr__(self, "synth_shape", tuple(self.synth_shape))

    @property
    def cpc(self) -> int:
        if self.classes_per_client is not None:
            return self.classes_per_client
        return 10 if self.data_name == "cifar100" else 2

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed_partition=seed, seed_init=seed, seed_train=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth_shape"] = list(self.synth_shape)
        return d


# (section, key) in the TOML file -> field name
KEYS = {
    ("experiment", "mode"): "mode",
    ("experiment", "n_clients"): "n_clients",
    ("experiment", "rounds"): "rounds",
    ("experiment", "eval_interval"): "eval_interval",
    ("client", "K"): "K",
    ("client", "batch"): "batch",
    ("client", "lr"): "lr",
    ("hypernet", "embed_dim"): "embed_dim",
    ("hypernet", "hidden_width"): "hidden_width",
    ("hypernet", "n_hidden"): "n_hidden",
    ("hypernet", "lr_phi"): "lr_phi",
    ("hypernet", "lr_embed"): "lr_embed",
    ("tfa", "h_intra"): "h_intra",
    ("tfa", "h_inter"): "h_inter",
    ("tfa", "w"): "w",
    ("tfa", "lr"): "lr_attn",
    ("or", "lambda"): "or_lambda",
    ("or", "include_dense"): "or_include_dense",
    ("or", "lr"): "lr_or",
    ("agps", "p"): "p",
    ("data", "name"): "data_name",
    ("data", "root"): "data_root",
    ("data", "classes_per_client"): "classes_per_client",
    ("data", "synth_per_class"): "synth_per_class",
    ("data", "synth_separation"): "synth_separation",
    ("data", "synth_shape"): "synth_shape",
    ("data", "synth_classes"): "synth_classes",
    ("seeds", "partition"): "seed_partition",
    ("seeds", "init"): "seed_init",
    ("seeds", "train"): "seed_train",
}


def config_from_mapping(doc: dict, base: ExperimentConfig = ExperimentConfig()) -> ExperimentConfig:
    updates = {}
    for section, table in doc.items():
        if not isinstance(table, dict):
            raise ValueError(f"top-level key {section!r} must be a [section]")
        for key, value in table.items():
            try:
                updates[KEYS[(section, key)]] = value
            except KeyError:
                raise ValueError(f"unknown config key {section}.{key}") from None
    return replace(base, **updates)


def load_config(path) -> ExperimentConfig:
    with open(Path(path), "rb") as f:
        return config_from_mapping(tomllib.load(f))


def field_names():
    return [f.name for f in fields(ExperimentConfig)]
