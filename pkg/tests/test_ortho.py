import numpy as np
import pytest

from fedofa.analysis import audit_or
from fedofa.ortho import ORConfig, or_gradient, or_penalty
from fedofa.param_space import ModelSpec, TensorSpec, lenet_spec


def _single(shape, role="dense-weight"):
    return ModelSpec((TensorSpec("w", role, shape), TensorSpec("b", "bias", (shape[0],))), (1, 1, 1), 2)


def test_identity_has_zero_penalty():
    spec = _single((2, 2))
    assert or_penalty({"w": np.eye(2), "b": np.ones(2)}, spec) == 0.0


def test_hand_evaluated_penalty():
    # O O^T - I = [[1, 0], [0, -1]] -> squared Frobenius norm 2
    spec = _single((2, 2))
    assert or_penalty({"w": np.array([[1.0, 1.0], [0.0, 0.0]]), "b": np.zeros(2)}, spec) == pytest.approx(2e-4, rel=1e-15)


def test_orthonormal_rows_zero_penalty_and_gradient():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    O = q[:4]  # 4 x 6 with orthonormal rows
    spec = _single((4, 6))
    params = {"w": O, "b": rng.standard_normal(4)}
    assert or_penalty(params, spec) < 1e-12 * 1e-4
    assert np.abs(or_gradient(params, spec)["w"]).max() < 1e-15


def test_scaled_identity_gradient():
    lam = 1e-4
    spec = _single((3, 3))
    g = or_gradient({"w": 2 * np.eye(3), "b": np.zeros(3)}, spec, ORConfig(lam))["w"]
    np.testing.assert_allclose(g, 24 * lam * np.eye(3), rtol=1e-14)


def test_biases_excluded_and_normalised_by_tensor_count():
    spec = lenet_spec((1, 28, 28), 10)
    rng = np.random.default_rng(1)
    params = {t.name: rng.standard_normal(t.shape) for t in spec.tensors}
    g = or_gradient(params, spec)
    assert all(not g[t.name].any() for t in spec.tensors if t.role == "bias")
    per_tensor = []
    for t in spec.by_role("conv-kernel", "dense-weight"):
        O = params[t.name].reshape(t.shape[0], -1)
        G = O @ O.T - np.eye(O.shape[0]) if O.shape[0] <= O.shape[1] else O.T @ O - np.eye(O.shape[1])
        per_tensor.append(np.sum(G ** 2))
    assert or_penalty(params, spec) == pytest.approx(1e-4 * sum(per_tensor) / 4, rel=1e-12)
    conv_only = ORConfig(1e-4, include_dense=False)
    assert or_penalty(params, spec, conv_only) == pytest.approx(1e-4 * sum(per_tensor[:2]) / 2, rel=1e-12)


def test_tall_matrices_use_column_gram():
    spec = _single((5, 2))
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    assert or_penalty({"w": q, "b": np.zeros(5)}, spec) < 1e-20


def test_column_permutation_invariance():
    rng = np.random.default_rng(3)
    spec = _single((3, 7))
    O = rng.standard_normal((3, 7))
    base = or_penalty({"w": O, "b": np.zeros(3)}, spec)
    for _ in range(10):
        perm = rng.permutation(7)
        assert or_penalty({"w": O[:, perm], "b": np.zeros(3)}, spec) == pytest.approx(base, rel=1e-13)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    assert audit_or(np.random.default_rng(seed), (3, 8)).max_rel_error < 1e-6


def test_gradient_descent_reaches_orthogonality():
    rng = np.random.default_rng(0)
    spec = _single((4, 6))
    cfg = ORConfig(1.0)
    params = {"w": 0.5 * rng.standard_normal((4, 6)), "b": np.zeros(4)}
    for step in range(5000):
        if or_penalty(params, spec, cfg) < 1e-6:
            break
        params["w"] = params["w"] - 0.1 * or_gradient(params, spec, cfg)["w"]
    assert or_penalty(params, spec, cfg) < 1e-6


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        ORConfig(-1.0)
