import numpy as np

from fedofa.checkpoint import load_checkpoint, save_checkpoint
from fedofa.config import ExperimentConfig
from fedofa.param_space import lenet_spec
from fedofa.server import init_server


def test_roundtrip_bit_exact(tmp_path):
    spec = lenet_spec((1, 16, 16), 4)
    state = init_server(ExperimentConfig(embed_dim=5, hidden_width=7, n_clients=3, seed_init=9), spec)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert back.spec == spec
    assert back.hyper.seed == state.hyper.seed and back.hyper.n_hidden == state.hyper.n_hidden
    assert np.array_equal(back.hyper.embeddings, state.hyper.embeddings)
    assert list(back.hyper.phi) == list(state.hyper.phi)
    assert all(np.array_equal(back.hyper.phi[k], v) for k, v in state.hyper.phi.items())
    assert back.attn.w == state.attn.w and back.attn.passthrough == state.attn.passthrough
    for name, layer in state.attn.layers.items():
        other = back.attn.layers[name]
        assert (other.n_filters, other.h_intra, other.h_inter) == (layer.n_filters, layer.h_intra, layer.h_inter)
        assert all(np.array_equal(other.values[k], v) for k, v in layer.values.items())
