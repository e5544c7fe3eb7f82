import numpy as np
import pytest

from fedofa.agps import compute_mask, full_mask, apply_mask
from fedofa.analysis import audit_local_sgd
from fedofa.client import (ClientDataset, LocalTrainConfig, evaluate, forward, local_train, loss_and_grad,
                           task_loss)
from fedofa.param_space import lenet_spec, mlp_spec, random_params, zeros

from oracles import lenet_forward


@pytest.fixture(scope="module")
def spec():
    return lenet_spec((1, 28, 28), 10)


def _dataset(rng, spec, n=40, n_test=10):
    x = rng.random((n + n_test, *spec.input_shape))
    y = rng.integers(0, spec.n_classes, n + n_test)
    return ClientDataset(x, y, np.arange(n), np.arange(n, n + n_test))


def test_zero_params_give_zero_logits(spec):
    x = np.random.default_rng(0).random((3, 1, 28, 28))
    assert not forward(zeros(spec), spec, x).any()


def test_batch_equivariance(spec):
    rng = np.random.default_rng(1)
    params = random_params(spec, rng, 0.1)
    x = rng.random((6, 1, 28, 28))
    perm = rng.permutation(6)
    np.testing.assert_allclose(forward(params, spec, x)[perm], forward(params, spec, x[perm]), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("shape", [(1, 28, 28), (3, 32, 32)])
def test_forward_matches_loop_oracle(shape):
    spec = lenet_spec(shape, 10)
    rng = np.random.default_rng(2)
    params = random_params(spec, rng, 0.2)
    x = rng.random(shape)
    np.testing.assert_allclose(forward(params, spec, x[None])[0], lenet_forward(params, x), rtol=1e-11, atol=1e-12)


def test_forward_rejects_wrong_shape(spec):
    with pytest.raises(ValueError):
        forward(zeros(spec), spec, np.zeros((1, 3, 28, 28)))


def test_lr_zero_gives_zero_delta(spec):
    rng = np.random.default_rng(3)
    data = _dataset(rng, spec)
    delta, curve = local_train(random_params(spec, rng, 0.1), None, data, LocalTrainConfig(K=3, batch=8, lr=0.0), spec)
    assert all(not d.any() for d in delta.values())
    assert len(curve) == 3


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("conv", [False, True])
def test_one_step_matches_finite_differences(seed, conv):
    assert audit_local_sgd(np.random.default_rng(seed), conv=conv).max_rel_error < 1e-4


def test_lenet_gradient_spot_check(spec):
    # central differences on a random subset of LeNet coordinates
    rng = np.random.default_rng(4)
    params = random_params(spec, rng, 0.1)
    x, y = rng.random((4, 1, 28, 28)), rng.integers(0, 10, 4)
    _, grads = loss_and_grad(params, spec, x, y)
    for name in spec.names:
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in spec[name].shape)
            old = params[name][idx]
            params[name][idx] = old + 1e-5
            hi = task_loss(params, spec, x, y)
            params[name][idx] = old - 1e-5
            lo = task_loss(params, spec, x, y)
            params[name][idx] = old
            fd = (hi - lo) / 2e-5
            assert abs(fd - grads[name][idx]) <= 1e-6 + 1e-4 * abs(fd)


def test_masked_positions_stay_frozen(spec):
    rng = np.random.default_rng(5)
    params = random_params(spec, rng, 0.1)
    mask = compute_mask(params, spec, 70)
    theta_m = apply_mask(params, mask)
    delta, _ = local_train(theta_m, mask, _dataset(rng, spec), LocalTrainConfig(K=5, batch=16, lr=0.05), spec)
    for k in spec.names:
        frozen = mask.bits[k] == 0
        assert not delta[k][frozen].any()
        assert not (theta_m[k] + delta[k])[frozen].any()
    assert any(delta[k].any() for k in spec.names)


def test_determinism(spec):
    rng = np.random.default_rng(6)
    params = random_params(spec, rng, 0.1)
    data = _dataset(rng, spec)
    cfg = LocalTrainConfig(K=4, batch=16, lr=0.05, seed=11)
    a, _ = local_train(params, full_mask(spec), data, cfg, spec)
    b, _ = local_train(params, full_mask(spec), data, cfg, spec)
    assert all(np.array_equal(a[k], b[k]) for k in spec.names)


def test_loss_non_increasing_on_separable_toy():
    spec = mlp_spec(4, 2)
    rng = np.random.default_rng(7)
    y = np.repeat([0, 1], 20)
    x = rng.standard_normal((40, 4, 1, 1)) * 0.3
    x[:, 0, 0, 0] += np.where(y == 1, 2.0, -2.0)
    data = ClientDataset(x, y, np.arange(40), np.zeros(0, dtype=np.int64))
    params = random_params(spec, rng, 0.1)
    delta, curve = local_train(params, None, data, LocalTrainConfig(K=30, batch=40, lr=0.05), spec)
    after = {k: params[k] + delta[k] for k in params}
    assert task_loss(after, spec, x, y) <= curve[0]
    assert all(b <= a + 1e-15 for a, b in zip(curve, curve[1:]))


def test_evaluate_constant_predictor():
    spec = mlp_spec(4, 3)
    rng = np.random.default_rng(8)
    labels = np.array([0] * 3 + [1] * 4 + [2] * 3)
    x = rng.random((10, 4, 1, 1))
    data = ClientDataset(x, labels, np.zeros(0, dtype=np.int64), np.arange(10))
    # all-zero logits tie; ties resolve to class 0
    assert evaluate(zeros(spec), spec, data) == pytest.approx(0.3)
    shuffled = ClientDataset(x, labels, np.zeros(0, dtype=np.int64), rng.permutation(10))
    assert evaluate(zeros(spec), spec, shuffled) == evaluate(zeros(spec), spec, data)


def test_evaluate_memorised_toy():
    spec = mlp_spec(3, 3)
    x = np.eye(3).reshape(3, 3, 1, 1)
    data = ClientDataset(x, np.arange(3), np.arange(3), np.arange(0))
    data.test_idx = np.arange(3)
    params = {"fc1.weight": 5 * np.eye(3), "fc1.bias": np.zeros(3)}
    assert evaluate(params, spec, data) == 1.0


def test_empty_splits_rejected(spec):
    rng = np.random.default_rng(9)
    data = ClientDataset(rng.random((2, 1, 28, 28)), [0, 1], [], [0, 1])
    with pytest.raises(ValueError):
        local_train(zeros(spec), None, data, LocalTrainConfig(K=1), spec)
    data = ClientDataset(rng.random((2, 1, 28, 28)), [0, 1], [0, 1], [])
    with pytest.raises(ValueError):
        evaluate(zeros(spec), spec, data)


def test_overlapping_split_rejected():
    with pytest.raises(ValueError):
        ClientDataset(np.zeros((2, 1, 1, 1)), [0, 1], [0], [0, 1])
