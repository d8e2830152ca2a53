"""A small graph hypernetwork that predicts every parameter of a sampled CNN.

Pipeline for one graph:

1. ``embed_graph``: op-kind embedding plus a linear projection of scalar node
   features (kernel, channels, stride, BN flag).
2. ``message_pass``: per round, a forward sweep over the DAG in topological
   order and a backward sweep in reverse order. A node's new state is
   ``GRU(m, h)`` where ``m`` is the weighted mean of neighbour messages; real
   edges weigh 1 and virtual edges (shortest path ``d <= s_max``) weigh 1/d.
3. ``decode_params``: a 2-layer MLP emits one ``(t_out, t_in, 7, 7)`` tile per
   node, which is centre-cropped to the kernel size, repeated over the channel
   axes (input-axis copies rolled along the output axis), sliced to shape
   and rescaled to RMS ``sqrt(2 / fan_in)``. Biases, gamma and beta come
   from a separate 1-D head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .graphs import CONV_OPS, OP_KINDS, ArchGraph, GraphError, add_virtual_edges, param_shapes
from .init import compute_fan

CHECKPOINT_VERSION = 1
MAX_KERNEL = 7
N_FEATURES = 6


@dataclass(frozen=True)
class GhnConfig:
    embed_dim: int = 64
    rounds: int = 1
    s_max: int = 10
    tile_out: int = 16
    tile_in: int = 16
    tile_kernel: int = MAX_KERNEL
    hidden_dim: int = 64
    normalization: str = "fan_in_rms"
    virtual_edges: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("message passing needs at least one round")
        if self.tile_kernel < MAX_KERNEL:
            raise ValueError(f"tile kernel must cover the largest sampled kernel ({MAX_KERNEL})")
        if self.normalization not in ("fan_in_rms", "off"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


class _Structure:
    """Graph-dependent index tensors, computed once per graph and cached."""

    def __init__(self, g: ArchGraph, s_max: int, virtual: bool):
        n = g.n
        depth = [0] * n
        for u, v in sorted(g.edges, key=lambda e: e[1]):
            depth[v] = max(depth[v], depth[u] + 1)
        height = [0] * n
        for u, v in sorted(g.edges, key=lambda e: -e[0]):
            height[u] = max(height[u], height[v] + 1)
        fwd = [(u, v, 1.0) for u, v in g.edges]
        if virtual:
            fwd += [(u, v, 1.0 / d) for u, v, d in add_virtual_edges(g, s_max).pairs]
        bwd = [(v, u, w) for u, v, w in fwd]
        self.forward_levels = self._levels(depth, fwd)
        self.backward_levels = self._levels(height, bwd)

    @staticmethod
    def _levels(level, edges):
        by_level = {}
        for v, lv in enumerate(level):
            by_level.setdefault(lv, []).append(v)
        incoming = {}
        for src, dst, w in edges:
            incoming.setdefault(dst, []).append((src, w))
        out = []
        for lv in sorted(by_level):
            nodes = by_level[lv]
            local = {v: i for i, v in enumerate(nodes)}
            src, dst, wts = [], [], []
            for v in nodes:
                for u, w in incoming.get(v, []):
                    src.append(u)
                    dst.append(local[v])
                    wts.append(w)
            out.append((
                torch.tensor(nodes, dtype=torch.long),
                torch.tensor(src, dtype=torch.long),
                torch.tensor(dst, dtype=torch.long),
                torch.tensor(wts),
            ))
        return out


def node_features(g: ArchGraph) -> torch.Tensor:
    rows = []
    for v, nd in enumerate(g.nodes):
        c_in = g.in_channels(v)
        rows.append([
            nd.kernel / MAX_KERNEL,
            math.log2(nd.channels + 1) / 10.0,
            math.log2(c_in + 1) / 10.0,
            float(nd.stride == 2),
            float(nd.has_bn),
            float(nd.op in CONV_OPS and nd.kernel == 1),
        ])
    return torch.tensor(rows)


class GhnModel(nn.Module):
    def __init__(self, config: GhnConfig = GhnConfig()):
        super().__init__()
        self.config = config
        d, hdim = config.embed_dim, config.hidden_dim
        self.op_embed = nn.Embedding(len(OP_KINDS), d)
        self.feat_proj = nn.Linear(N_FEATURES, d)
        self.msg_fwd = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.msg_bwd = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.gru = nn.GRUCell(d, d)
        tile = config.tile_out * config.tile_in * config.tile_kernel ** 2
        self.decoder = nn.Sequential(nn.Linear(d, hdim), nn.ReLU(), nn.Linear(hdim, tile))
        self.head_1d = nn.Sequential(nn.Linear(d, hdim), nn.ReLU(), nn.Linear(hdim, 2 * config.tile_out))
        self._structures = {}

    def structure(self, g: ArchGraph) -> _Structure:
        key = id(g)
        hit = self._structures.get(key)
        if hit is None or hit[0] is not g:
            if len(self._structures) > 4096:
                self._structures.clear()
            hit = (g, _Structure(g, self.config.s_max, self.config.virtual_edges))
            self._structures[key] = hit
        return hit[1]

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, g: ArchGraph) -> dict:
        return predict_all(g, self)


def embed_graph(g: ArchGraph, model: GhnModel) -> torch.Tensor:
    """``[n_nodes, embed_dim]`` initial node states."""
    try:
        kinds = torch.tensor([OP_KINDS.index(nd.op) for nd in g.nodes], dtype=torch.long)
    except ValueError as exc:
        raise GraphError(str(exc)) from None
    feats = node_features(g).to(model.feat_proj.weight.dtype)
    return model.op_embed(kinds) + model.feat_proj(feats)


def _sweep(h, levels, msg_net, gru):
    for nodes, src, dst, wts in levels:
        m = torch.zeros(len(nodes), h.shape[1], dtype=h.dtype)
        if len(src):
            w = wts.to(h.dtype)
            m = m.index_add(0, dst, w.unsqueeze(1) * msg_net(h[src]))
            norm = torch.zeros(len(nodes), dtype=h.dtype).index_add(0, dst, w)
            m = m / norm.clamp_min(1e-12).unsqueeze(1)
        h = h.index_copy(0, nodes, gru(m, h[nodes]))
    return h


def message_pass(h: torch.Tensor, g: ArchGraph, model: GhnModel, rounds: Optional[int] = None) -> torch.Tensor:
    """Gated forward/backward propagation over the DAG plus its virtual edges."""
    if any(u >= v for u, v in g.edges):
        raise GraphError("message passing needs a DAG stored in topological order")
    st = model.structure(g)
    for _ in range(rounds or model.config.rounds):
        h = _sweep(h, st.forward_levels, model.msg_fwd, model.gru)
        h = _sweep(h, st.backward_levels, model.msg_bwd, model.gru)
    return h


def tile_to_shape(tile: torch.Tensor, shape: tuple) -> torch.Tensor:
    """Crop/repeat/slice an ``(t_out, t_in, K, K)`` tile to ``shape``.

    4-D targets take the centre ``k x k`` window; 2-D ``[in, out]`` targets
    take the centre tap of the tile, transposed. When the input axis needs
    more than one copy of the tile, copy ``b`` is rolled by ``b`` along the
    output axis. Plain repetition would make duplicated output channels meet
    identical weights in the next layer and grow activations by roughly
    ``c_in / t_in`` per layer.
    """
    t_out, t_in, kt, _ = tile.shape
    if len(shape) == 4:
        c_out, c_in, k, _ = shape
        if k > kt:
            raise ValueError(f"kernel {k} exceeds the {kt}x{kt} tile")
        off = (kt - k) // 2
        w = tile[:, :, off:off + k, off:off + k]
    elif len(shape) == 2:
        c_in, c_out = shape
        w = tile[:, :, kt // 2, kt // 2]
    else:
        raise ValueError(f"cannot tile to shape {shape}")
    reps_in = math.ceil(c_in / t_in)
    if reps_in > 1:
        w = torch.cat([torch.roll(w, b, dims=0) for b in range(reps_in)], dim=1)
    reps_out = math.ceil(c_out / t_out)
    if reps_out > 1:
        w = w.repeat(reps_out, *([1] * (w.dim() - 1)))
    w = w[:c_out, :c_in]
    return w if len(shape) == 4 else w.t()


def normalize_rms(w: torch.Tensor, fan_in: int) -> torch.Tensor:
    rms = torch.sqrt(torch.mean(w * w) + 1e-20)
    return w * (math.sqrt(2.0 / fan_in) / rms)


def decode_params(h: torch.Tensor, shape: tuple, model: GhnModel) -> torch.Tensor:
    """Decode one weight tensor of ``shape`` from a single node state ``h``."""
    cfg = model.config
    if len(shape) == 4 and shape[2] > cfg.tile_kernel:
        raise ValueError(f"kernel {shape[2]} exceeds the {cfg.tile_kernel}x{cfg.tile_kernel} tile")
    tile = model.decoder(h).view(cfg.tile_out, cfg.tile_in, cfg.tile_kernel, cfg.tile_kernel)
    w = tile_to_shape(tile, tuple(shape))
    if cfg.normalization == "fan_in_rms":
        w = normalize_rms(w, compute_fan(shape).fan_in)
    return w


def _decode_vectors(h: torch.Tensor, channels: int, model: GhnModel) -> tuple[torch.Tensor, torch.Tensor]:
    t = model.config.tile_out
    out = model.head_1d(h).view(2, t)
    reps = math.ceil(channels / t)
    if reps > 1:
        out = out.repeat(1, reps)
    return out[0, :channels], out[1, :channels]


def predict_all(g: ArchGraph, model: GhnModel) -> dict:
    """Embed, propagate and decode every parameterized node of ``g``."""
    h = message_pass(embed_graph(g, model), g, model)
    preds = {}
    for v, shapes in param_shapes(g).items():
        if "weight" in shapes:
            preds[v] = {
                "weight": decode_params(h[v], shapes["weight"], model),
                "bias": _decode_vectors(h[v], shapes["bias"][0], model)[0],
            }
        else:
            shift, scale = _decode_vectors(h[v], shapes["gamma"][0], model)
            preds[v] = {"gamma": scale + 1.0, "beta": shift}
    return preds


def save_checkpoint(model: GhnModel, path, extra: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path) -> tuple[GhnModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = GhnModel(GhnConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
