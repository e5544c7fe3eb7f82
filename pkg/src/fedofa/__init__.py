"""Personalized federated learning with a hypernetwork that generates client
models, server-side filter-aware attention over convolution kernels, an
orthogonality penalty on the recalibrated filters and magnitude-guided pruning
of what gets transmitted.

Everything is float64 numpy with hand-written backward passes.
"""
from .agps import Mask, apply_mask, comm_cost, compute_mask
from .analysis import emit_report, grad_audit, linear_equivalence_check
from .client import ClientDataset, LocalTrainConfig, local_train
from .config import ExperimentConfig, load_config
from .data import load_cifar_binary, load_idx, make_partition, synth_dataset
from .hypernet import HypernetState, apply_server_update, generate_params, hypernet_vjp, init_hypernet
from .ortho import ORConfig, or_gradient, or_penalty
from .param_space import ModelSpec, TensorSpec, lenet_spec, mlp_spec
from .server import MetricsLog, RoundMetrics, ServerState, run_experiment, run_round
from .tfa import AttentionState, init_attention, tfa_recalibrate, tfa_vjp

__version__ = "0.1.0"
