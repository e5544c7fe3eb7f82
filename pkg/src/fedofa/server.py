"""Server loop: one sampled client per round.

Per round the server generates the client's parameters with the
hypernetwork, recalibrates them with TFA, takes one descent step on the
orthogonality penalty, masks them with AGPS, lets the client train locally,
and pulls the returned delta back through TFA and the hypernetwork. In
``baseline`` mode recalibration is the identity and the penalty step and
masking are skipped.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import agps, data as data_mod, hypernet as hn, ortho, tfa
from .client import ClientDataset, LocalTrainConfig, evaluate, local_train
from .config import ExperimentConfig
from .param_space import ModelSpec, ParamSet, check_finite, lenet_spec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerState:
    hyper: hn.HypernetState
    attn: tfa.AttentionState

    @property
    def spec(self) -> ModelSpec:
        return self.hyper.spec


@dataclass
class RoundMetrics:
    round: int
    client: int
    loss_pre: float
    loss_post: float
    or_penalty: float
    comm_ratio: float
    transmitted: int
    wall_time: float = 0.0


@dataclass
class MetricsLog:
    rounds: List[RoundMetrics] = field(default_factory=list)
    evals: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    masks: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    config: Optional[dict] = None
    final_state: Optional[ServerState] = field(default=None, repr=False)

    def append(self, m: RoundMetrics) -> None:
        if self.rounds and m.round <= self.rounds[-1].round:
            raise ValueError("round indices must strictly increase")
        self.rounds.append(m)

    @property
    def final_accuracies(self) -> np.ndarray:
        return self.evals[-1][1] if self.evals else np.zeros(0)

    def summary(self) -> dict:
        acc = self.final_accuracies
        return {
            "mean": float(np.mean(acc)) if acc.size else float("nan"),
            "std": float(np.std(acc)) if acc.size else float("nan"),
            "per_client": [float(a) for a in acc],
            "rounds": len(self.rounds),
        }


def init_server(cfg: ExperimentConfig, spec: ModelSpec) -> ServerState:
    hyper = hn.init_hypernet(spec, cfg.n_clients, cfg.embed_dim, cfg.hidden_width,
                             seed=cfg.seed_init, n_hidden=cfg.n_hidden)
    attn = tfa.init_attention(spec, cfg.h_intra, cfg.h_inter, cfg.w, seed=cfg.seed_init + 1)
    return ServerState(hyper, attn)


def personalized_params(state: ServerState, cfg: ExperimentConfig, client_id: int):
    """What the server would transmit to ``client_id``: ``(theta_M, mask, theta_prime, cache)``."""
    theta = hn.generate_params(state.hyper, client_id)
    check_finite(theta, "generation")
    if cfg.mode == "baseline":
        return theta, agps.full_mask(state.spec), theta, None
    theta_p, cache = tfa.tfa_forward(theta, state.attn)
    check_finite(theta_p, "recalibration")
    mask = agps.compute_mask(theta_p, state.spec, cfg.p) if cfg.p > 0 else agps.full_mask(state.spec)
    return agps.apply_mask(theta_p, mask), mask, theta_p, cache


def _local_seed(cfg: ExperimentConfig, round_idx: int, client_id: int) -> int:
    return int(np.random.SeedSequence([cfg.seed_train, round_idx, client_id]).generate_state(1)[0])


def run_round(state: ServerState, cfg: ExperimentConfig, rng: np.random.Generator,
              clients: List[ClientDataset], round_idx: int = 0):
    """Execute one round; returns ``(new_state, RoundMetrics, mask)``."""
    t0 = time.perf_counter()
    spec = state.spec
    i = int(rng.integers(cfg.n_clients))
    or_cfg = ortho.ORConfig(cfg.or_lambda, cfg.or_include_dense)

    theta = hn.generate_params(state.hyper, i)
    check_finite(theta, "generation")
    hyper_at_gen = state.hyper
    if cfg.mode == "fedofa":
        theta_p, cache = tfa.tfa_forward(theta, state.attn)
        check_finite(theta_p, "recalibration")
    else:
        theta_p, cache = theta, None
    penalty = ortho.or_penalty(theta_p, spec, or_cfg)

    hyper, attn = state.hyper, state.attn
    if cfg.mode == "fedofa" and cfg.or_lambda > 0 and cfg.lr_or > 0:
        g_or = ortho.or_gradient(theta_p, spec, or_cfg)
        g_theta, g_attn = tfa.tfa_vjp(attn, cache, g_or)
        g_v, g_phi = hn.hypernet_vjp(hyper, i, g_theta)
        hyper = hn.apply_gradients(hyper, i, g_v, g_phi, cfg.lr_or, cfg.lr_or)
        attn = tfa.apply_attention_gradients(attn, g_attn, cfg.lr_or)

    if cfg.mode == "fedofa" and cfg.p > 0:
        mask = agps.compute_mask(theta_p, spec, cfg.p)
    else:
        mask = agps.full_mask(spec)
    theta_m = agps.apply_mask(theta_p, mask)

    local_cfg = LocalTrainConfig(cfg.K, cfg.batch, cfg.lr, _local_seed(cfg, round_idx, i))
    delta, curve = local_train(theta_m, mask, clients[i], local_cfg, spec)
    check_finite(delta, "local training")

    # masked positions carry zero delta, so the mask's Jacobian is already applied
    if cfg.mode == "fedofa":
        delta_gen, d_attn = tfa.tfa_vjp(state.attn, cache, delta)
        attn = tfa.apply_attention_gradients(attn, _negate(d_attn), cfg.lr_attn)
    else:
        delta_gen = delta
    g_v, g_phi = hn.hypernet_vjp(hyper_at_gen, i, _negate(delta_gen))
    hyper = hn.apply_gradients(hyper, i, g_v, g_phi, cfg.lr_phi, cfg.lr_embed)

    cost = agps.comm_cost(mask)
    metrics = RoundMetrics(round_idx, i, curve[0], curve[-1], penalty, cost["ratio"],
                           cost["transmitted"], time.perf_counter() - t0)
    return ServerState(hyper, attn), metrics, mask


def _negate(tree):
    if isinstance(tree, dict):
        return {k: _negate(v) for k, v in tree.items()}
    return -tree


def load_source(cfg: ExperimentConfig) -> data_mod.ArraySource:
    if cfg.data_name == "mnist":
        return data_mod.load_mnist(cfg.data_root or data_mod.BUNDLED_MNIST)
    if cfg.data_name in ("cifar10", "cifar100"):
        if cfg.data_root is None:
            raise ValueError("data.root is required for CIFAR")
        return data_mod.load_cifar(cfg.data_root, cfg.data_name)
    return data_mod.synth_dataset(cfg.synth_classes, cfg.synth_shape, cfg.synth_per_class,
                                  cfg.synth_separation, seed=cfg.seed_partition)


def setup(cfg: ExperimentConfig, source: Optional[data_mod.ArraySource] = None):
    """Load data, partition it and initialise the server; returns ``(state, clients)``."""
    if source is None:
        source = load_source(cfg)
    plan = data_mod.make_partition(source.labels, cfg.n_clients, cfg.cpc,
                                   np.random.default_rng(cfg.seed_partition), n_classes=source.n_classes)
    clients = data_mod.client_datasets(source, plan)
    spec = lenet_spec(source.features.shape[1:], source.n_classes)
    return init_server(cfg, spec), clients


def evaluate_all(state: ServerState, cfg: ExperimentConfig, clients: List[ClientDataset]) -> np.ndarray:
    accs = []
    for c, ds in enumerate(clients):
        theta_m = personalized_params(state, cfg, c)[0]
        accs.append(evaluate(theta_m, state.spec, ds))
    return np.array(accs)


def run_experiment(cfg: ExperimentConfig, source: Optional[data_mod.ArraySource] = None,
                   progress: bool = False) -> MetricsLog:
    state, clients = setup(cfg, source)
    mlog = MetricsLog(config=cfg.to_dict())
    mlog.evals.append((0, evaluate_all(state, cfg, clients)))
    rng = np.random.default_rng(cfg.seed_train)
    for r in range(1, cfg.rounds + 1):
        state, metrics, mask = run_round(state, cfg, rng, clients, r)
        mlog.append(metrics)
        if cfg.dump_masks:
            mlog.masks[r] = agps.pack_mask(mask)
        if r % cfg.eval_interval == 0 or r == cfg.rounds:
            acc = evaluate_all(state, cfg, clients)
            mlog.evals.append((r, acc))
            if progress:
                log.info("round %d  mean acc %.4f  loss %.4f", r, acc.mean(), metrics.loss_post)
    mlog.final_state = state
    return mlog
