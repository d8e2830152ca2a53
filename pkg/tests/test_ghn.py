import math

import pytest
import torch

from ghnq.graphs import ArchGraph, GraphError, OpNode, instantiate, param_shapes, sample_graphs, split_config
from ghnq.ghn import (
    GhnConfig,
    GhnModel,
    decode_params,
    embed_graph,
    load_checkpoint,
    message_pass,
    normalize_rms,
    predict_all,
    save_checkpoint,
    tile_to_shape,
)
from ghnq.network import forward


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return GhnModel()


def chain(n):
    nodes = [OpNode("stem", 1, 3)] + [OpNode("conv", 3, 8) for _ in range(n - 2)] + [OpNode("head", 1, 10)]
    return ArchGraph(nodes, [(i, i + 1) for i in range(n - 1)])


def test_config_validation():
    with pytest.raises(ValueError):
        GhnConfig(rounds=0)
    with pytest.raises(ValueError):
        GhnConfig(tile_kernel=5)


def test_embeddings(model):
    g = chain(4)
    h = embed_graph(g, model)
    assert h.shape == (4, model.config.embed_dim)
    assert not torch.equal(h[1], h[2])  # same op, different input width
    g2 = ArchGraph([OpNode("stem", 1, 3), OpNode("conv", 5, 8), OpNode("conv", 3, 8), OpNode("head", 1, 10)],
                   g.edges)
    assert not torch.equal(embed_graph(g2, model)[1], embed_graph(g, model)[1])
    twins = ArchGraph([OpNode("stem", 1, 3), OpNode("conv", 3, 8), OpNode("conv", 3, 8), OpNode("head", 1, 10)],
                      [(0, 1), (0, 2), (1, 3), (2, 3)])
    he = embed_graph(twins, model)
    assert torch.equal(he[1], he[2])


def test_message_pass_single_node_self_update(model):
    g = ArchGraph([OpNode("stem", 1, 3)], [])
    h0 = embed_graph(g, model)
    h1 = message_pass(h0, g, model)
    expect = model.gru(torch.zeros_like(h0), h0)
    expect = model.gru(torch.zeros_like(h0), expect)
    torch.testing.assert_close(h1, expect)


def test_virtual_edges_change_states():
    torch.manual_seed(1)
    on = GhnModel(GhnConfig(virtual_edges=True))
    off = GhnModel(GhnConfig(virtual_edges=False))
    off.load_state_dict(on.state_dict())
    g = chain(3)
    h = embed_graph(g, on)
    assert not torch.allclose(message_pass(h, g, on), message_pass(h, g, off))


def test_message_pass_rejects_non_dag(model):
    g = ArchGraph([OpNode("stem", 1, 3), OpNode("relu", 1, 3)], [(1, 0)])
    with pytest.raises(GraphError):
        message_pass(torch.zeros(2, model.config.embed_dim), g, model)


def test_tile_construction():
    tile = torch.arange(16 * 16 * 49, dtype=torch.float64).view(16, 16, 7, 7)
    w = tile_to_shape(tile, (32, 16, 3, 3))
    assert w.shape == (32, 16, 3, 3)
    assert torch.equal(w[:16], tile[:, :, 2:5, 2:5])
    assert torch.equal(w[16:], w[:16])
    small = tile_to_shape(tile, (8, 4, 7, 7))
    assert torch.equal(small, tile[:8, :4])
    dense = tile_to_shape(tile, (12, 10))
    assert torch.equal(dense, tile[:10, :12, 3, 3].t())
    wide_in = tile_to_shape(tile, (16, 32, 1, 1))
    assert torch.equal(wide_in[:, 16:], torch.roll(wide_in[:, :16], 1, dims=0))
    with pytest.raises(ValueError):
        tile_to_shape(tile, (8, 8, 9, 9))


def test_rms_normalization(model):
    h = torch.randn(model.config.embed_dim)
    w = decode_params(h, (4, 8, 1, 1), model)
    assert abs(float(torch.sqrt(torch.mean(w.double() ** 2))) - 0.5) < 1e-5
    assert abs(float(torch.sqrt(torch.mean(normalize_rms(torch.randn(5, 7), 7) ** 2))) - math.sqrt(2 / 7)) < 1e-6
    with pytest.raises(ValueError):
        decode_params(h, (4, 8, 9, 9), model)


def test_predict_all_covers_and_is_deterministic(model):
    g = sample_graphs(split_config("TestID", 0, channels=(8, 24)), 1)[0]
    p1, p2 = predict_all(g, model), predict_all(g, model)
    shapes = param_shapes(g)
    assert set(p1) == set(shapes)
    for v, d in shapes.items():
        for name, shape in d.items():
            assert tuple(p1[v][name].shape) == shape
            assert torch.equal(p1[v][name], p2[v][name])
    y = forward(instantiate(g, p1), torch.randn(2, 3, 32, 32))
    assert y.shape == (2, 10) and torch.isfinite(y).all()


def test_gradient_finite_difference_d8():
    torch.manual_seed(0)
    m = GhnModel(GhnConfig(embed_dim=8, hidden_dim=8)).double()
    g = sample_graphs(split_config("Train", 2, cells=(2, 2), channels=(8, 8), bn_prob=0.0), 1)[0]
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64)

    def loss():
        net = instantiate(g, predict_all(g, m), dtype=torch.float64)
        return forward(net, x).pow(2).mean()

    p = m.feat_proj.weight
    m.zero_grad()
    loss().backward()
    analytic = p.grad.clone()
    for idx in [(0, 0), (3, 1), (7, 5)]:
        eps = 1e-6
        with torch.no_grad():
            p[idx] += eps
            up = float(loss())
            p[idx] -= 2 * eps
            down = float(loss())
            p[idx] += eps
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - float(analytic[idx])) <= 1e-4 * max(1e-3, abs(numeric))


def test_checkpoint_roundtrip(tmp_path, model):
    g = sample_graphs(split_config("TestID", 0, channels=(8, 16)), 1)[0]
    save_checkpoint(model, tmp_path / "m.pt", extra={"mode": "fp32"})
    loaded, extra = load_checkpoint(tmp_path / "m.pt")
    assert extra == {"mode": "fp32"}
    assert loaded.config == model.config
    a, b = predict_all(g, model), predict_all(g, loaded)
    for v in a:
        for k in a[v]:
            assert torch.equal(a[v][k], b[v][k])
