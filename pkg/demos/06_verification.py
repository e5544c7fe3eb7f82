"""Numerical checks shipped with the library: finite-difference audits of every
backward pass, and the closed-form check that attention on samples and
attention on parameters each yield a least-squares minimiser."""
from fedofa import grad_audit, linear_equivalence_check
from fedofa.analysis import THRESHOLDS

for e in grad_audit(seed=0).entries:
    print(f"{e.name:<16} rel error {e.max_rel_error:.2e}  (limit {THRESHOLDS[e.name]:.0e})")

rep = linear_equivalence_check(n_features=5, n_samples=12, seed=0)
print(f"\nsample-side attention: gradient norm at closed form {rep.stationarity_feature:.1e}, "
      f"smallest loss increase under perturbation {rep.min_increase_feature:.2e}")
print(f"parameter-side attention: gradient norm at closed form {rep.stationarity_filter:.1e}, "
      f"smallest loss increase under perturbation {rep.min_increase_filter:.2e}")
print(f"optimal losses {rep.objective_feature:.4f} vs {rep.objective_filter:.4f} (not equal in general)")
