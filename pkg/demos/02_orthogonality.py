"""The orthogonality penalty measures how far a layer's filters are from an
orthonormal set. Descending on it alone drives a random matrix to zero penalty.
"""
import numpy as np

from fedofa import ORConfig, or_gradient, or_penalty
from fedofa.param_space import ModelSpec, TensorSpec

spec = ModelSpec((TensorSpec("w", "dense-weight", (4, 6)), TensorSpec("b", "bias", (4,))), (6, 1, 1), 4)
cfg = ORConfig(lam=1.0)
rng = np.random.default_rng(0)

q, _ = np.linalg.qr(rng.standard_normal((6, 4)))
print(f"orthonormal rows: penalty {or_penalty({'w': q.T, 'b': np.zeros(4)}, spec, cfg):.2e}")

params = {"w": 0.5 * rng.standard_normal((4, 6)), "b": np.zeros(4)}
for step in range(200):
    pen = or_penalty(params, spec, cfg)
    if step % 5 == 0 or pen < 1e-12:
        print(f"step {step:3d}  penalty {pen:.3e}")
    if pen < 1e-12:
        break
    params["w"] = params["w"] - 0.1 * or_gradient(params, spec, cfg)["w"]
print("final Gram matrix:\n", np.round(params["w"] @ params["w"].T, 6))
