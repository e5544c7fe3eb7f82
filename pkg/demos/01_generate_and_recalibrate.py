"""A hypernetwork turns a client embedding into a full LeNet, and the attention
module then re-weights each convolution kernel.

At initialisation the attention output projections are zero, so the
recalibrated kernels equal the generated ones exactly. Once the projections
move away from zero, the kernels change.
"""
import numpy as np

from fedofa import generate_params, init_attention, init_hypernet, lenet_spec, tfa_recalibrate
from fedofa.tfa import AttentionState, LayerAttentionParams

spec = lenet_spec((1, 28, 28), 10)
print("client model:")
for t in spec.tensors:
    print(f"  {t.name:<14} {t.role:<13} {t.shape}")

hyper = init_hypernet(spec, n_clients=4, seed=0)
theta = generate_params(hyper, client_id=2)
print(f"\n{spec.total_params} parameters generated for client 2")

attn = init_attention(spec, h_intra=2, h_inter=8, w=0.5, seed=1)
out = tfa_recalibrate(theta, attn)
same = all(np.array_equal(out[k], theta[k]) for k in theta)
print(f"recalibrated == generated at init: {same}")

# nudge the output projections of conv1 away from zero
rng = np.random.default_rng(0)
layer = attn.layers["conv1.weight"]
values = dict(layer.values)
for key in ("intra_scale", "inter_scale"):
    values[key] = 0.1 * rng.standard_normal(values[key].shape)
moved = AttentionState({**attn.layers, "conv1.weight": LayerAttentionParams(
    layer.n_filters, layer.d_filter, layer.h_intra, layer.h_inter, values)}, attn.passthrough, attn.w)
out = tfa_recalibrate(theta, moved)
change = np.abs(out["conv1.weight"] - theta["conv1.weight"]).max()
print(f"after perturbing conv1 projections, max kernel change {change:.3e}; conv2 untouched: "
      f"{np.array_equal(out['conv2.weight'], theta['conv2.weight'])}")
