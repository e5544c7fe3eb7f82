"""Verification and reporting.

* :func:`linear_equivalence_check`: with a linear generator and linear
  attention, recalibrating parameters (``X A theta``) and recalibrating
  features (``A X theta``) both lead to least-squares problems whose closed
  forms are checked for stationarity and strict local minimality.
* :func:`grad_audit`: central finite differences against every hand-written
  backward pass.
* :func:`emit_report`: CSV/JSON/PNG output of a :class:`MetricsLog`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from . import agps, client, hypernet as hn, ortho, tfa
from .param_space import ModelSpec, TensorSpec, flatten, mlp_spec, unflatten
from .server import MetricsLog, RoundMetrics

CSV_COLUMNS = ("round", "client", "loss_pre", "loss_post", "or_penalty", "comm_ratio")


# ---------------------------------------------------------------------------
# linear equivalence

@dataclass
class EquivalenceReport:
    stationarity_feature: float
    stationarity_filter: float
    min_increase_feature: float
    min_increase_filter: float
    objective_feature: float
    objective_filter: float
    quadratic_defect_feature: float
    quadratic_defect_filter: float
    orthonormality_defect: float
    whitening_defect: float
    theta_feature: np.ndarray = field(repr=False)
    theta_filter: np.ndarray = field(repr=False)

    def passed(self, tol: float = 1e-8) -> bool:
        return (self.stationarity_feature < tol and self.stationarity_filter < tol
                and self.min_increase_feature > 0 and self.min_increase_filter > 0)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def whiten(X: np.ndarray) -> np.ndarray:
    """Orthonormalise the columns of ``X`` (so that ``X^T X = I``)."""
    q, r = np.linalg.qr(X)
    return q * np.sign(np.diag(r))


def equivalence_instance(X, y, A_feature, A_filter, rng: np.random.Generator,
                         n_perturb: int = 100, radius: float = 1e-2) -> EquivalenceReport:
    """Check both closed forms on given data.

    ``A_feature`` (n x n) acts on the sample axis, ``A_filter`` (d x d) on the
    parameter axis.
    """
    def loss_feat(t):
        r = A_feature @ (X @ t) - y
        return float(r @ r)

    def loss_filt(t):
        r = X @ (A_filter @ t) - y
        return float(r @ r)

    theta_feat = X.T @ (A_feature.T @ y)
    theta_filt = A_filter.T @ (X.T @ y)
    grad_feat = 2 * X.T @ (A_feature.T @ (A_feature @ (X @ theta_feat) - y))
    grad_filt = 2 * A_filter.T @ (X.T @ (X @ (A_filter @ theta_filt) - y))

    d = X.shape[1]
    base_feat, base_filt = loss_feat(theta_feat), loss_filt(theta_filt)
    inc_feat, inc_filt, quad_feat, quad_filt = np.inf, np.inf, 0.0, 0.0
    scale = radius * max(1.0, float(np.linalg.norm(theta_feat)))
    for _ in range(n_perturb):
        delta = rng.standard_normal(d)
        delta *= scale / np.linalg.norm(delta)
        df = loss_feat(theta_feat + delta) - base_feat
        dg = loss_filt(theta_filt + delta) - base_filt
        inc_feat, inc_filt = min(inc_feat, df), min(inc_filt, dg)
        # both objectives reduce to ||theta - theta_bar||^2 + const
        sq = float(delta @ delta)
        quad_feat = max(quad_feat, abs(df - sq) / sq)
        quad_filt = max(quad_filt, abs(dg - sq) / sq)

    eye_d = np.eye(d)
    return EquivalenceReport(
        stationarity_feature=float(np.linalg.norm(grad_feat)),
        stationarity_filter=float(np.linalg.norm(grad_filt)),
        min_increase_feature=float(inc_feat),
        min_increase_filter=float(inc_filt),
        objective_feature=base_feat,
        objective_filter=base_filt,
        quadratic_defect_feature=quad_feat,
        quadratic_defect_filter=quad_filt,
        orthonormality_defect=float(max(
            np.linalg.norm(A_feature.T @ A_feature - np.eye(len(A_feature))),
            np.linalg.norm(A_filter.T @ A_filter - eye_d))),
        whitening_defect=float(np.linalg.norm(X.T @ X - eye_d)),
        theta_feature=theta_feat,
        theta_filter=theta_filt,
    )


def linear_equivalence_check(n_features: int, n_samples: int, seed: int = 0,
                             identity: bool = False) -> EquivalenceReport:
    if n_samples < n_features:
        raise ValueError("need n_samples >= n_features for whitened data")
    rng = np.random.default_rng(seed)
    X = whiten(rng.standard_normal((n_samples, n_features)))
    y = rng.standard_normal(n_samples)
    if identity:
        A_feat, A_filt = np.eye(n_samples), np.eye(n_features)
    else:
        A_feat, A_filt = random_orthogonal(n_samples, rng), random_orthogonal(n_features, rng)
    return equivalence_instance(X, y, A_feat, A_filt, rng)


# ---------------------------------------------------------------------------
# finite-difference audits

STEP = 1e-5


@dataclass
class AuditEntry:
    name: str
    max_rel_error: float
    step: float
    shapes: Dict[str, tuple]


@dataclass
class GradReport:
    entries: List[AuditEntry] = field(default_factory=list)

    def __getitem__(self, name: str) -> AuditEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps analytically zero
    gradient groups from turning finite-difference noise into error 1."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def _max_group_error(pairs, rel_floor: float = 1e-6) -> float:
    """Max relative error over (analytic, numeric) groups; the floor is
    ``rel_floor`` times the norm of all analytic gradients together."""
    scale = float(np.sqrt(sum(np.sum(np.square(a)) for a, _ in pairs)))
    return max(rel_error(a, n, rel_floor * scale) for a, n in pairs)


def _pooled_error(pairs) -> float:
    """Relative error of all groups concatenated into one gradient vector."""
    a = np.concatenate([np.ravel(x) for x, _ in pairs])
    n = np.concatenate([np.ravel(y) for _, y in pairs])
    return rel_error(a, n)


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f(x)
        flat[i] = old - step
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def _pairing(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> float:
    return float(sum(np.sum(a[k] * b[k]) for k in a))


def audit_hypernet(rng: np.random.Generator, n_hidden: int = 3, name: str = "hypernet") -> AuditEntry:
    spec = ModelSpec((TensorSpec("w", "dense-weight", (3, 2)), TensorSpec("b", "bias", (3,))), (2, 1, 1), 3)
    state = hn.init_hypernet(spec, n_clients=3, D=4, W_h=5, seed=int(rng.integers(1 << 31)), n_hidden=n_hidden)
    cid = 1
    cot = {t.name: rng.standard_normal(t.shape) for t in spec.tensors}
    g_v, g_phi = hn.hypernet_vjp(state, cid, cot)

    def f_embed(v):
        emb = state.embeddings.copy()
        emb[cid] = v
        return _pairing(hn.generate_params(hn.HypernetState(spec, emb, state.phi, n_hidden), cid), cot)

    pairs = [(g_v, central_diff(f_embed, state.embeddings[cid]))]
    for key, w in state.phi.items():
        def f_w(x, key=key):
            phi = dict(state.phi)
            phi[key] = x
            return _pairing(hn.generate_params(hn.HypernetState(spec, state.embeddings, phi, n_hidden), cid), cot)
        pairs.append((g_phi[key], central_diff(f_w, w)))
    # a linear map has one Jacobian; per-group ratios on tiny groups only measure rounding
    err = _pooled_error(pairs) if n_hidden == 0 else _max_group_error(pairs)
    return AuditEntry(name, err, STEP, {k: v.shape for k, v in state.phi.items()})


def random_attention_layer(n: int, d: int, h_intra: int, h_inter: int,
                           rng: np.random.Generator) -> tfa.LayerAttentionParams:
    """Attention parameters with every entry randomised (including the
    output projection), so every gradient path is exercised."""
    values = {}
    for key, shape in tfa.param_shapes(n, d, h_intra, h_inter).items():
        base = 1.0 if key.endswith("_gamma") or key.startswith("emb_") and key.endswith("scale") else 0.0
        values[key] = base + 0.5 * rng.standard_normal(shape)
    return tfa.LayerAttentionParams(n, d, h_intra, h_inter, values)


def audit_tfa(rng: np.random.Generator, n: int = 2, s_in: int = 1, k: int = 3,
              h_intra: int = 2, h_inter: int = 2, w: float = 0.5) -> AuditEntry:
    d = s_in * k * k
    layer = random_attention_layer(n, d, h_intra, h_inter, rng)
    state = tfa.AttentionState({"conv": layer}, ("bias",), w)
    L = rng.standard_normal((n, s_in, k, k))
    bias = rng.standard_normal(n)
    cot = {"conv": rng.standard_normal(L.shape), "bias": rng.standard_normal(n)}
    out, cache = tfa.tfa_forward({"conv": L, "bias": bias}, state)
    g_in, g_attn = tfa.tfa_vjp(state, cache, cot)

    def f_L(x):
        return _pairing(tfa.tfa_recalibrate({"conv": x, "bias": bias}, state), cot)

    pairs = [(g_in["conv"], central_diff(f_L, L)), (g_in["bias"], cot["bias"])]
    for key, val in layer.values.items():
        def f_p(x, key=key):
            vals = dict(layer.values)
            vals[key] = x
            st = tfa.AttentionState({"conv": tfa.LayerAttentionParams(n, d, h_intra, h_inter, vals)}, ("bias",), w)
            return _pairing(tfa.tfa_recalibrate({"conv": L, "bias": bias}, st), cot)
        pairs.append((g_attn["conv"][key], central_diff(f_p, val)))
    return AuditEntry("tfa", _max_group_error(pairs), STEP, {"conv": L.shape, **layer.shapes()})


def audit_or(rng: np.random.Generator, shape=(3, 8), lam: float = 1e-4) -> AuditEntry:
    spec = ModelSpec((TensorSpec("w", "dense-weight", shape), TensorSpec("b", "bias", (shape[0],))),
                     (shape[1], 1, 1), shape[0])
    params = {"w": rng.standard_normal(shape), "b": rng.standard_normal(shape[0])}
    cfg = ortho.ORConfig(lam)
    g = ortho.or_gradient(params, spec, cfg)
    fd = central_diff(lambda x: ortho.or_penalty({"w": x, "b": params["b"]}, spec, cfg), params["w"])
    return AuditEntry("or", max(rel_error(g["w"], fd), float(np.abs(g["b"]).max())), STEP, {"w": shape})


def small_conv_spec() -> ModelSpec:
    return ModelSpec((
        TensorSpec("conv1.weight", "conv-kernel", (2, 1, 3, 3)),
        TensorSpec("conv1.bias", "bias", (2,)),
        TensorSpec("fc1.weight", "dense-weight", (3, 2 * 3 * 3)),
        TensorSpec("fc1.bias", "bias", (3,)),
    ), (1, 8, 8), 3)


def audit_local_sgd(rng: np.random.Generator, conv: bool = False, lr: float = 0.1) -> AuditEntry:
    """One full-batch SGD step equals ``-lr`` times the finite-difference gradient."""
    spec = small_conv_spec() if conv else mlp_spec(4, 2)
    n = 12
    x = rng.random((n, *spec.input_shape))
    y = rng.integers(0, spec.n_classes, n)
    y[: spec.n_classes] = np.arange(spec.n_classes)
    data = client.ClientDataset(x, y, np.arange(n), np.zeros(0, dtype=np.int64))
    params = {t.name: 0.5 * rng.standard_normal(t.shape) for t in spec.tensors}
    cfg = client.LocalTrainConfig(K=1, batch=n, lr=lr, seed=0)
    delta, _ = client.local_train(params, agps.full_mask(spec), data, cfg, spec)
    v0 = flatten(params, spec)
    fd = central_diff(lambda v: client.task_loss(unflatten(v, spec), spec, x, y), v0)
    return AuditEntry("local_sgd_conv" if conv else "local_sgd", rel_error(-flatten(delta, spec) / lr, fd),
                      STEP, {t.name: t.shape for t in spec.tensors})


AUDITS = {
    "linear": lambda rng: audit_hypernet(rng, n_hidden=0, name="linear"),
    "hypernet": audit_hypernet,
    "tfa": audit_tfa,
    "or": audit_or,
    "local_sgd": audit_local_sgd,
    "local_sgd_conv": lambda rng: audit_local_sgd(rng, conv=True),
}

THRESHOLDS = {"linear": 1e-10, "hypernet": 1e-4, "tfa": 1e-4, "or": 1e-6,
              "local_sgd": 1e-4, "local_sgd_conv": 1e-4}


def grad_audit(targets: Optional[Iterable[str]] = None, seed: int = 0) -> GradReport:
    report = GradReport()
    for name in (targets or AUDITS):
        report.entries.append(AUDITS[name](np.random.default_rng([seed, sorted(AUDITS).index(name)])))
    return report


# ---------------------------------------------------------------------------
# reporting

def population_std(values) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64)))


def summarize(accuracies) -> dict:
    acc = np.asarray(accuracies, dtype=np.float64)
    return {"mean": float(acc.mean()), "std": population_std(acc), "n": int(acc.size)}


def aggregate(logs: Iterable[MetricsLog]) -> dict:
    """Mean and population STD of final per-client accuracy pooled over runs."""
    logs = list(logs)
    pooled = np.concatenate([l.final_accuracies for l in logs])
    out = summarize(pooled)
    out["per_run_mean"] = [float(l.final_accuracies.mean()) for l in logs]
    return out


def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))


def write_metrics_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in log.rounds:
            w.writerow([m.round, m.client, _fmt(m.loss_pre), _fmt(m.loss_post),
                        _fmt(m.or_penalty), _fmt(m.comm_ratio)])


def read_metrics_csv(path) -> MetricsLog:
    log = MetricsLog()
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            log.append(RoundMetrics(int(row["round"]), int(row["client"]), float(row["loss_pre"]),
                                    float(row["loss_post"]), float(row["or_penalty"]),
                                    float(row["comm_ratio"]), 0))
    acc_path = Path(path).with_name("accuracy.csv")
    if acc_path.exists():
        by_round: Dict[int, list] = {}
        with open(acc_path, newline="") as f:
            for row in csv.DictReader(f):
                by_round.setdefault(int(row["round"]), []).append((int(row["client"]), float(row["accuracy"])))
        for r in sorted(by_round):
            log.evals.append((r, np.array([a for _, a in sorted(by_round[r])])))
    return log


def _plot(path, xs, ys, ylabel, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, ys, lw=1)
    ax.set_xlabel("round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(log: MetricsLog, out_dir, plots: bool = True) -> List[Path]:
    """Write metrics.csv, accuracy.csv, summary.json, optional masks.npz and curves."""
    if not log.rounds and not log.evals:
        raise ValueError("empty metrics log")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "metrics.csv", out / "summary.json"]
    write_metrics_csv(log, written[0])

    summary = log.summary() if log.evals else {"rounds": len(log.rounds)}
    if log.config is not None:
        summary["config"] = log.config
    written[1].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    if log.evals:
        acc_path = out / "accuracy.csv"
        with open(acc_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("round", "client", "accuracy"))
            for r, accs in log.evals:
                for c, a in enumerate(accs):
                    w.writerow((r, c, _fmt(a)))
        written.append(acc_path)

    if log.masks:
        arrays = {f"round{r}/{name}": bits for r, packed in log.masks.items() for name, bits in packed.items()}
        np.savez_compressed(out / "masks.npz", **arrays)
        written.append(out / "masks.npz")

    if plots:
        rounds = [m.round for m in log.rounds]
        if rounds:
            for attr, label in (("loss_post", "local loss"), ("or_penalty", "OR penalty"),
                                ("comm_ratio", "transmitted fraction")):
                p = out / f"{attr}.png"
                _plot(p, rounds, [getattr(m, attr) for m in log.rounds], label, label)
                written.append(p)
        if log.evals:
            p = out / "accuracy.png"
            _plot(p, [r for r, _ in log.evals], [float(a.mean()) for _, a in log.evals],
                  "mean test accuracy", "personalized accuracy")
            written.append(p)
    return written


def report_dict(report: GradReport) -> list:
    return [asdict(e) | {"threshold": THRESHOLDS.get(e.name)} for e in report.entries]
