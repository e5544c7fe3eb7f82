"""Magnitude-guided pruning: each weight tensor keeps its largest entries, and
only those are transmitted. Biases always travel."""
import numpy as np

from fedofa import comm_cost, compute_mask, lenet_spec
from fedofa.agps import pack_mask
from fedofa.param_space import random_params

spec = lenet_spec((1, 28, 28), 10)
params = random_params(spec, np.random.default_rng(0))
print(f"{'p':>4}  {'sent':>7}  {'ratio':>6}  {'packed bytes':>12}")
for p in (0, 70, 80, 90, 95, 99):
    mask = compute_mask(params, spec, p)
    cost = comm_cost(mask)
    packed = sum(a.nbytes for a in pack_mask(mask).values())
    print(f"{p:>4}  {cost['transmitted']:>7}  {cost['ratio']:>6.3f}  {packed:>12}")

m70, m90 = compute_mask(params, spec, 70), compute_mask(params, spec, 90)
nested = all((m90.bits[k] <= m70.bits[k]).all() for k in spec.names)
print(f"\nevery entry kept at p=90 is also kept at p=70: {nested}")
