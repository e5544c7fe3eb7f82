import numpy as np
import pytest

from fedofa import tfa
from fedofa.analysis import audit_tfa, random_attention_layer
from fedofa.param_space import lenet_spec, random_params

from oracles import tfa_layer


def _layer(rng, n=2, s_in=1, k=3, h_intra=2, h_inter=2):
    p = random_attention_layer(n, s_in * k * k, h_intra, h_inter, rng)
    return rng.standard_normal((n, s_in, k, k)), p


def _with(p, **values):
    v = dict(p.values)
    v.update(values)
    return tfa.LayerAttentionParams(p.n_filters, p.d_filter, p.h_intra, p.h_inter, v)


def test_embed_layer_affine():
    rng = np.random.default_rng(0)
    L, p = _layer(rng)
    N = L.size
    ident = _with(p, **{f"emb_{x}_scale": np.ones(N) for x in "qkv"}, **{f"emb_{x}_shift": np.zeros(N) for x in "qkv"})
    for e in tfa.embed_layer(L, ident):
        np.testing.assert_array_equal(e, L.ravel())
    for e in tfa.embed_layer(np.zeros_like(L), ident):
        assert not e.any()
    L1 = np.where(np.arange(N) % 2 == 0, 1.0, -1.0).reshape(L.shape)
    two = _with(p, **{f"emb_{x}_scale": np.full(N, 2.0) for x in "qkv"}, **{f"emb_{x}_shift": np.ones(N) for x in "qkv"})
    e_q = tfa.embed_layer(L1, two)[0]
    np.testing.assert_array_equal(e_q[:4], [3.0, -1.0, 3.0, -1.0])
    with pytest.raises(ValueError):
        tfa.embed_layer(L[:1], p)


def test_multi_head():
    e = np.array([3.0, 4.0])
    out = tfa.multi_head(e, np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([[0.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(out[0], [6.0, 1.0])
    np.testing.assert_array_equal(tfa.multi_head(e, np.ones((3, 2)), np.zeros((3, 2))), np.tile(e, (3, 1)))
    beta = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(tfa.multi_head(np.zeros(2), np.ones((3, 2)), beta), beta)
    with pytest.raises(ValueError):
        tfa.multi_head(e, np.ones((3, 3)), np.zeros((3, 3)))


def test_attention_map_cases():
    rng = np.random.default_rng(0)
    V1 = rng.standard_normal((1, 5))
    out, A = tfa.attention_map(rng.standard_normal((1, 5)), rng.standard_normal((1, 5)), V1)
    np.testing.assert_array_equal(out, V1)
    assert A[0, 0] == 1.0

    V = np.array([[1.0, 2.0], [3.0, 6.0]])
    out, A = tfa.attention_map(np.zeros((2, 2)), rng.standard_normal((2, 2)), V)
    np.testing.assert_array_equal(A, 0.5)
    np.testing.assert_allclose(out, [[2.0, 4.0], [2.0, 4.0]], rtol=0, atol=0)

    q = rng.standard_normal(4)
    out, _ = tfa.attention_map(np.tile(q, (3, 1)), np.tile(q, (3, 1)), rng.standard_normal((3, 4)))
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h = int(rng.integers(1, 9))
        _, A = tfa.attention_map(*(10 * rng.standard_normal((3, h, 7))))
        assert np.all(np.abs(A.sum(axis=1) - 1.0) < 1e-12)


def test_identity_at_init():
    spec = lenet_spec((3, 32, 32), 10)
    rng = np.random.default_rng(0)
    for w in (0.0, 0.5, 1.0):
        state = tfa.init_attention(spec, 2, 8, w, seed=1)
        params = random_params(spec, rng, 0.1)
        out = tfa.tfa_recalibrate(params, state)
        assert all(np.array_equal(out[k], params[k]) for k in spec.names)


def test_streams_at_zero_projection_are_identity():
    rng = np.random.default_rng(2)
    L, p = _layer(rng)
    zero = _with(p, intra_scale=np.zeros_like(p["intra_scale"]), intra_shift=np.zeros_like(p["intra_shift"]),
                 inter_scale=np.zeros_like(p["inter_scale"]), inter_shift=np.zeros_like(p["inter_shift"]))
    np.testing.assert_array_equal(tfa.intra_fa(L, zero), L)
    np.testing.assert_array_equal(tfa.inter_fa(L, zero), L)


def test_fusion_weight_boundaries():
    rng = np.random.default_rng(3)
    L, p = _layer(rng, n=3, s_in=2)
    intra, inter = tfa.intra_fa(L, p), tfa.inter_fa(L, p)
    for w, expected in ((1.0, intra), (0.0, inter)):
        out = tfa.tfa_recalibrate({"c": L}, tfa.AttentionState({"c": p}, (), w))["c"]
        np.testing.assert_array_equal(out, expected)


def test_equal_streams_make_w_irrelevant():
    # with only the shifts active and equal, both streams give L + b
    rng = np.random.default_rng(4)
    L, p = _layer(rng)
    b = rng.standard_normal(p.size)
    q = _with(p, intra_scale=np.zeros_like(p["intra_scale"]), inter_scale=np.zeros(p.size),
              intra_shift=b.reshape(p.n_filters, p.d_filter), inter_shift=b)
    outs = [tfa.tfa_recalibrate({"c": L}, tfa.AttentionState({"c": q}, (), w))["c"] for w in (0.1, 0.5, 0.9)]
    for o in outs:
        np.testing.assert_allclose(o, L + b.reshape(L.shape), rtol=1e-15, atol=1e-15)


def test_single_filter_structure():
    rng = np.random.default_rng(5)
    L, p = _layer(rng, n=1, s_in=2)
    flat = L.ravel()
    e_q, e_k, e_v = tfa.embed_layer(L, p)
    V = tfa.multi_head(e_v, p["inter_v_gamma"], p["inter_v_beta"])
    Q = tfa.multi_head(e_q, p["intra_q_gamma"], p["intra_q_beta"])
    K = tfa.multi_head(e_k, p["intra_k_gamma"], p["intra_k_beta"])
    out, _ = tfa.attention_map(Q, K, V[np.arange(p.h_intra) % p.h_inter])
    proj = p["intra_scale"][0] * tfa.combine_rows(p["intra_alpha"], out) + p["intra_shift"][0]
    np.testing.assert_allclose(tfa.intra_fa(L, p).ravel() - flat, proj, rtol=1e-12, atol=1e-14)


def test_single_head_inter_collapses_to_values():
    rng = np.random.default_rng(6)
    L, p = _layer(rng, h_inter=1)
    e_v = tfa.embed_layer(L, p)[2]
    V = p["inter_v_gamma"][0] * e_v + p["inter_v_beta"][0]
    expected = L.ravel() + p["inter_scale"] * (p["inter_alpha"][0] * V) + p["inter_shift"]
    np.testing.assert_allclose(tfa.inter_fa(L, p).ravel(), expected, rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_oracle_bit_equivalence(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    s_in = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    L, p = _layer(rng, n, s_in, k, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    w = float(rng.choice([0.5, 0.3, 1.0]))
    expected, intra, inter = tfa_layer(L, p.values, w)
    out = tfa.tfa_recalibrate({"c": L}, tfa.AttentionState({"c": p}, (), w))["c"]
    assert np.array_equal(out, expected)
    assert np.array_equal(tfa.intra_fa(L, p), intra)
    assert np.array_equal(tfa.inter_fa(L, p), inter)


@pytest.mark.parametrize("seed", range(20))
def test_vjp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, s_in = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    entry = audit_tfa(rng, n=n, s_in=s_in, k=3, h_intra=int(rng.integers(1, 4)),
                      h_inter=int(rng.integers(1, 4)), w=float(rng.uniform()))
    assert entry.max_rel_error < 1e-4


def test_shapes_and_passthrough():
    spec = lenet_spec((1, 28, 28), 10)
    state = tfa.init_attention(spec, 2, 8)
    assert set(state.layers) == {"conv1.weight", "conv2.weight"}
    assert set(state.passthrough) == {t.name for t in spec.tensors if t.role != "conv-kernel"}
    rng = np.random.default_rng(0)
    layers = {k: _with(p, inter_scale=rng.standard_normal(p.size)) for k, p in state.layers.items()}
    state = tfa.AttentionState(layers, state.passthrough, 0.5)
    params = random_params(spec, rng, 0.1)
    out = tfa.tfa_recalibrate(params, state)
    for k in spec.names:
        assert out[k].shape == params[k].shape
    assert not np.array_equal(out["conv2.weight"], params["conv2.weight"])
    for k in state.passthrough:
        assert np.array_equal(out[k], params[k])


def test_invalid_fusion_weight():
    with pytest.raises(ValueError):
        tfa.AttentionState({}, (), 1.5)
