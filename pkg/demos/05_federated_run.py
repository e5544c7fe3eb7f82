"""A short federated run on MNIST in both modes, then a report on disk.

Sixty rounds take about half a minute per mode on one core; the shipped config
in configs/ runs the full 300 rounds.
"""
import sys
from dataclasses import replace
from pathlib import Path

from fedofa import ExperimentConfig, emit_report, run_experiment
from fedofa.server import load_source

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
base = ExperimentConfig(rounds=60, K=20, eval_interval=20)
source = load_source(base)
for mode, p in (("baseline", 0.0), ("fedofa", 0.0), ("fedofa", 70.0)):
    cfg = replace(base, mode=mode, p=p)
    log = run_experiment(cfg, source=source)
    curve = "  ".join(f"r{r}:{a.mean():.3f}" for r, a in log.evals)
    s = log.summary()
    print(f"{mode:<8} p={p:<4}  {curve}  final {s['mean']:.3f} +- {s['std']:.3f}  "
          f"sent {log.rounds[-1].comm_ratio:.2f} of the model per round")
    emit_report(log, out / f"{mode}_p{int(p)}")
print(f"reports written under {out}/")
