"""Heterogeneous split of the bundled MNIST subset: each client holds two
classes, with uniform(0.4, 0.6) weights deciding how a class is shared."""
import numpy as np

from fedofa.data import BUNDLED_MNIST, load_mnist, make_partition

src = load_mnist(BUNDLED_MNIST)
plan = make_partition(src.labels, n_clients=10, classes_per_client=2, rng=np.random.default_rng(0))
print(f"{len(src)} images, {src.n_classes} classes\n")
print("client  classes  train  test  share of each class")
for i in range(plan.n_clients):
    shares = ", ".join(f"{c}:{plan.ratios[i, c]:.2f}" for c in plan.classes[i])
    print(f"{i:>6}  {str(plan.classes[i].tolist()):>7}  {len(plan.train_idx[i]):>5}  {len(plan.test_idx[i]):>4}  {shares}")
print("\nshares sum to one per class:", np.allclose(plan.ratios.sum(0), 1.0))
