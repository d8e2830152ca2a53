"""Architecture graphs and the random mobile-friendly CNN sampler.

A sampled network is ``stem -> stem conv -> cells -> head``. Each cell follows
the DARTS template: two inputs (outputs of the previous two cells), each
preprocessed by relu/1x1 conv/[BN]; four intermediate nodes, each the sum of
two sampled ops applied to earlier states; and a channel concat of the four
intermediate nodes. Every weight tensor is its own node so the hypernetwork
sees one node per parameter tensor.

Ops per edge: regular conv, depthwise-separable conv (depthwise kxk + 1x1),
dilated depthwise conv (+ 1x1), 3x3 max/avg pooling, and skip, with
k in {3, 5, 7}.
"""

from __future__ import annotations

import json
import math
from collections import Counter, deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .autodiff import BatchNormState, ShapeError
from .init import InitializerSpec, initialize
from .network import Layer, NetworkInstance

SCHEMA_VERSION = 1

OP_KINDS = (
    "stem", "conv", "separable_conv", "dilated_conv", "max_pool", "avg_pool", "skip",
    "batch_norm", "relu", "dense", "sum", "concat", "head",
)
CONV_OPS = ("conv", "separable_conv", "dilated_conv")
EDGE_OPS = ("conv", "separable_conv", "dilated_conv", "max_pool", "avg_pool", "skip")
KERNELS = (3, 5, 7)
PARAM_CAP = 10 ** 7
SPLITS = ("Train", "TestID", "Deep", "Wide", "BNFree")
_SPLIT_IDS = {s: i for i, s in enumerate(SPLITS)}


class GraphError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OpNode:
    op: str
    kernel: int = 1
    channels: int = 0
    stride: int = 1
    has_bn: bool = False

    def __post_init__(self):
        if self.op not in OP_KINDS:
            raise GraphError(f"unknown op kind {self.op!r}")

    @property
    def groups_is_depthwise(self) -> bool:
        return self.op in ("separable_conv", "dilated_conv")

    @property
    def dilation(self) -> int:
        return 2 if self.op == "dilated_conv" else 1


@dataclass
class ArchGraph:
    """DAG of typed op nodes, stored in topological order."""

    nodes: list
    edges: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = [tuple(e) for e in self.edges]
        self._preds = None
        self._succs = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    def predecessors(self, v: int) -> list:
        if self._preds is None:
            self._index()
        return self._preds[v]

    def successors(self, v: int) -> list:
        if self._succs is None:
            self._index()
        return self._succs[v]

    def _index(self) -> None:
        self._preds = [[] for _ in self.nodes]
        self._succs = [[] for _ in self.nodes]
        for u, v in self.edges:
            self._preds[v].append(u)
            self._succs[u].append(v)

    def in_channels(self, v: int) -> int:
        preds = self.predecessors(v)
        return self.nodes[preds[0]].channels if preds else 0

    def validate(self) -> None:
        """Check acyclicity, single stem/head, reachability and channel bookkeeping."""
        n = self.n
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge ({u}, {v}) references a missing node")
            if u >= v:
                raise GraphError(f"edge ({u}, {v}) breaks topological order (cycle or misordered node)")
        stems = [i for i, nd in enumerate(self.nodes) if nd.op == "stem"]
        heads = [i for i, nd in enumerate(self.nodes) if nd.op == "head"]
        if stems != [0]:
            raise GraphError("graph needs exactly one stem, stored first")
        if heads != [n - 1]:
            raise GraphError("graph needs exactly one head, stored last")
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in self.successors(u):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        if len(seen) != n:
            raise GraphError(f"{n - len(seen)} node(s) unreachable from the stem")
        for v, nd in enumerate(self.nodes[1:], start=1):
            preds = self.predecessors(v)
            if not preds:
                raise GraphError(f"node {v} has no inputs")
            if nd.op == "concat":
                if nd.channels != sum(self.nodes[u].channels for u in preds):
                    raise GraphError(f"concat node {v} channel count mismatch")
            elif nd.op == "sum":
                if any(self.nodes[u].channels != nd.channels for u in preds):
                    raise GraphError(f"sum node {v} mixes channel counts")
            elif len(preds) != 1:
                raise GraphError(f"{nd.op} node {v} must have exactly one input")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "nodes": [asdict(nd) for nd in self.nodes],
            "edges": [list(e) for e in self.edges],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchGraph":
        if d.get("version") != SCHEMA_VERSION:
            raise GraphError(f"unsupported graph schema version {d.get('version')!r}")
        nodes = [OpNode(**nd) for nd in d["nodes"]]
        return cls(nodes, [tuple(e) for e in d["edges"]], dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "ArchGraph":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Parameter shapes and counts
# ---------------------------------------------------------------------------


def param_shapes(g: ArchGraph) -> dict:
    """``{node: {name: shape}}`` for every node that owns trainable tensors."""
    shapes = {}
    for v, nd in enumerate(g.nodes):
        if nd.op in CONV_OPS:
            c_in = g.in_channels(v)
            per_group = 1 if nd.groups_is_depthwise else c_in
            shapes[v] = {"weight": (nd.channels, per_group, nd.kernel, nd.kernel), "bias": (nd.channels,)}
        elif nd.op == "batch_norm":
            shapes[v] = {"gamma": (nd.channels,), "beta": (nd.channels,)}
        elif nd.op in ("head", "dense"):
            shapes[v] = {"weight": (g.in_channels(v), nd.channels), "bias": (nd.channels,)}
    return shapes


def count_params(g: ArchGraph) -> int:
    return sum(math.prod(s) for d in param_shapes(g).values() for s in d.values())


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    cells: tuple = (2, 6)
    channels: tuple = (8, 64)
    param_cap: int = PARAM_CAP
    bn_prob: float = 0.5
    split: str = "Train"
    seed: int = 0
    num_classes: int = 10
    intermediate_nodes: int = 4
    stem_stride: int = 2
    max_tries: int = 2000

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.cells[0] < 1 or self.cells[0] > self.cells[1]:
            raise ConfigError(f"invalid cell range {self.cells}")
        if self.channels[0] < 1 or self.channels[0] > self.channels[1]:
            raise ConfigError(f"invalid channel range {self.channels}")
        if not 0.0 <= self.bn_prob <= 1.0:
            raise ConfigError(f"bn_prob must be a probability, got {self.bn_prob}")
        if self.split == "BNFree" and self.bn_prob != 0.0:
            raise ConfigError("the BNFree split forbids BatchNorm (bn_prob must be 0)")


TRAIN_CELLS = (2, 6)
TRAIN_CHANNELS = (8, 64)
DEEP_CELLS = (10, 16)
WIDE_CHANNELS = (128, 256)


def split_config(split: str, seed: int = 0, num_classes: int = 10, cells: tuple = TRAIN_CELLS,
                 channels: tuple = TRAIN_CHANNELS, **overrides) -> SamplerConfig:
    """Default sampler settings for a named split.

    ``cells`` and ``channels`` are the in-distribution ranges. Deep replaces
    the cell range with one above it, Wide the channel range, and BNFree
    forbids BatchNorm.
    """
    cells, channels = tuple(cells), tuple(channels)
    if split == "Deep":
        cells = DEEP_CELLS
    elif split == "Wide":
        channels = WIDE_CHANNELS
    bn_prob = 0.0 if split == "BNFree" else 0.5
    kw = dict(split=split, seed=seed, num_classes=num_classes, cells=cells, channels=channels, bn_prob=bn_prob)
    kw.update(overrides)
    return SamplerConfig(**kw)


class _GraphBuilder:
    def __init__(self):
        self.nodes = []
        self.edges = []

    def add(self, node: OpNode, *inputs: int) -> int:
        self.nodes.append(node)
        v = len(self.nodes) - 1
        self.edges += [(u, v) for u in inputs]
        return v

    def ch(self, v: int) -> int:
        return self.nodes[v].channels

    def conv(self, src, op, k, c_out, stride, bn) -> int:
        v = self.add(OpNode(op, k, c_out, stride, bn), src)
        if bn:
            v = self.add(OpNode("batch_norm", 1, c_out), v)
        return v

    def relu(self, src) -> int:
        return self.add(OpNode("relu", 1, self.ch(src)), src)

    def relu_conv_bn(self, src, c_out, k, stride, bn) -> int:
        return self.conv(self.relu(src), "conv", k, c_out, stride, bn)

    def edge_op(self, src, op, k, stride, bn) -> int:
        c = self.ch(src)
        if op == "skip":
            return self.add(OpNode("skip", 1, c, stride), src)
        if op in ("max_pool", "avg_pool"):
            return self.add(OpNode(op, 3, c, stride), src)
        x = self.relu(src)
        if op == "conv":
            return self.conv(x, "conv", k, c, stride, bn)
        x = self.add(OpNode(op, k, c, stride), x)
        return self.conv(x, "conv", 1, c, 1, bn)


def _reduction_cells(n: int) -> set:
    # short graphs get a single reduction at the end so wide ones can meet the cap
    return {n // 3, 2 * n // 3} if n >= 3 else {n - 1}


def _build(rng: np.random.Generator, n_cells: int, base: int, cfg: SamplerConfig, ops_fixed: Optional[str] = None):
    b = _GraphBuilder()
    stem = b.add(OpNode("stem", 1, 3))
    stem_bn = bool(rng.random() < cfg.bn_prob)
    s = b.conv(stem, "conv", 3, base, cfg.stem_stride, stem_bn)
    s0 = s1 = s
    c = base
    reductions = _reduction_cells(n_cells)
    prev_reduction = False
    n_bn_cells = 0
    for i in range(n_cells):
        reduction = i in reductions
        if reduction:
            c *= 2
        bn = bool(rng.random() < cfg.bn_prob)
        n_bn_cells += bn
        p0 = b.relu_conv_bn(s0, c, 1, 2 if prev_reduction else 1, bn)
        p1 = b.relu_conv_bn(s1, c, 1, 1, bn)
        states = [p0, p1]
        for _ in range(cfg.intermediate_nodes):
            picks = rng.choice(len(states), size=2, replace=False)
            branches = []
            for idx in sorted(int(p) for p in picks):
                op = ops_fixed or EDGE_OPS[int(rng.integers(len(EDGE_OPS)))]
                k = int(KERNELS[int(rng.integers(len(KERNELS)))])
                stride = 2 if (reduction and idx < 2) else 1
                branches.append(b.edge_op(states[idx], op, k, stride, bn))
            states.append(b.add(OpNode("sum", 1, c), *branches))
        inner = states[2:]
        out = b.add(OpNode("concat", 1, c * len(inner)), *inner)
        s0, s1 = s1, out
        prev_reduction = reduction
    x = b.relu(s1)
    b.add(OpNode("head", 1, cfg.num_classes), x)
    meta = {
        "cells": n_cells,
        "base_channels": base,
        "reduction_cells": sorted(reductions),
        "bn_cells": n_bn_cells,
        "split": cfg.split,
    }
    return ArchGraph(b.nodes, b.edges, meta)


def _minimal_graph(cfg: SamplerConfig) -> ArchGraph:
    rng = np.random.default_rng(0)
    return _build(rng, cfg.cells[0], cfg.channels[0], replace(cfg, bn_prob=0.0), ops_fixed="skip")


def sample_graph(cfg: SamplerConfig, rng: np.random.Generator) -> ArchGraph:
    """Draw one graph, resampling the whole graph while it exceeds the parameter cap."""
    for attempt in range(cfg.max_tries):
        n_cells = int(rng.integers(cfg.cells[0], cfg.cells[1] + 1))
        base = int(rng.integers(cfg.channels[0], cfg.channels[1] + 1))
        g = _build(rng, n_cells, base, cfg)
        params = count_params(g)
        if params <= cfg.param_cap:
            g.meta["params"] = params
            g.meta["attempts"] = attempt + 1
            return g
        if attempt == 0 and count_params(_minimal_graph(cfg)) > cfg.param_cap:
            raise ConfigError(f"parameter cap {cfg.param_cap} is below the smallest graph this config can produce")
    raise ConfigError(f"no graph under the {cfg.param_cap}-parameter cap after {cfg.max_tries} tries")


def graph_rng(cfg: SamplerConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _SPLIT_IDS[cfg.split], index])


def sample_graphs(cfg: SamplerConfig, count: int, start: int = 0) -> list:
    """``count`` graphs with independent streams derived from (seed, split, index)."""
    out = []
    for i in range(start, start + count):
        g = sample_graph(cfg, graph_rng(cfg, i))
        g.meta["index"] = i
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Virtual edges
# ---------------------------------------------------------------------------


@dataclass
class VirtualEdgeSet:
    """Directed pairs ``(u, v, d)`` where ``v`` is ``d`` hops downstream of ``u``."""

    pairs: list
    s_max: int

    def weights(self) -> dict:
        return {(u, v): 1.0 / d for u, v, d in self.pairs}


def add_virtual_edges(g: ArchGraph, s_max: int = 10) -> VirtualEdgeSet:
    """Pairs at shortest directed distance ``2 <= d <= s_max`` (BFS from every node)."""
    pairs = []
    for src in range(g.n):
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            if dist[u] == s_max:
                continue
            for v in g.successors(u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        pairs += [(src, v, d) for v, d in sorted(dist.items()) if d >= 2]
    return VirtualEdgeSet(pairs, s_max)


# ---------------------------------------------------------------------------
# Instantiation
# ---------------------------------------------------------------------------

HE_NORMAL = InitializerSpec("HeNorm")


def _check_shape(node: int, name: str, t: torch.Tensor, shape: tuple) -> None:
    if tuple(t.shape) != tuple(shape):
        raise ShapeError(f"node {node} {name}: expected shape {tuple(shape)}, got {tuple(t.shape)}")


def instantiate(
    g: ArchGraph,
    params: Optional[dict] = None,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    bn_mode: str = "batch",
) -> NetworkInstance:
    """Turn a graph into an executable network.

    ``params`` maps node ids to ``{name: tensor}``; missing conv/dense weights
    are drawn He-normal, biases and beta start at 0 and gamma at 1. Provided
    tensors are used as-is so gradients flow back to whatever produced them.
    """
    params = params or {}
    generator = generator or torch.Generator().manual_seed(0)
    shapes = param_shapes(g)
    layers = []
    layer_of = {}

    def get(v, name, default):
        t = params.get(v, {}).get(name)
        if t is None:
            return default()
        _check_shape(v, name, t, shapes[v][name])
        return t

    for v, nd in enumerate(g.nodes):
        inputs = [layer_of[u] for u in g.predecessors(v)]
        name = f"n{v}.{nd.op}"
        if nd.op == "stem":
            layer = Layer(name, "input", node=v)
        elif nd.op in CONV_OPS:
            wshape = shapes[v]["weight"]
            w = get(v, "weight", lambda: initialize(wshape, HE_NORMAL, generator, dtype).requires_grad_())
            b = get(v, "bias", lambda: torch.zeros(nd.channels, dtype=dtype, requires_grad=True))
            layer = Layer(name, "conv", inputs, kernel=nd.kernel, stride=nd.stride,
                          padding=nd.dilation * (nd.kernel - 1) // 2, dilation=nd.dilation,
                          groups=g.in_channels(v) if nd.groups_is_depthwise else 1,
                          weight=w, bias=b, node=v)
        elif nd.op == "batch_norm":
            gamma = get(v, "gamma", lambda: torch.ones(nd.channels, dtype=dtype, requires_grad=True))
            beta = get(v, "beta", lambda: torch.zeros(nd.channels, dtype=dtype, requires_grad=True))
            state = BatchNormState(gamma, beta, torch.zeros(nd.channels, dtype=dtype),
                                   torch.ones(nd.channels, dtype=dtype))
            src = g.predecessors(v)[0]
            if g.nodes[src].op in CONV_OPS and g.nodes[src].has_bn and layers[layer_of[src]].bn is None:
                layers[layer_of[src]].bn = state
                layer = Layer(name, "identity", inputs, node=v)
            else:
                layer = Layer(name, "bn", inputs, bn=state, node=v)
        elif nd.op in ("head", "dense"):
            wshape = shapes[v]["weight"]
            w = get(v, "weight", lambda: initialize(wshape, HE_NORMAL, generator, dtype).requires_grad_())
            b = get(v, "bias", lambda: torch.zeros(nd.channels, dtype=dtype, requires_grad=True))
            layer = Layer(name, nd.op, inputs, weight=w, bias=b, node=v)
        elif nd.op == "relu":
            layer = Layer(name, "relu", inputs, quant_output=True, node=v)
        elif nd.op in ("max_pool", "avg_pool"):
            layer = Layer(name, nd.op, inputs, kernel=nd.kernel, stride=nd.stride, padding=nd.kernel // 2, node=v)
        elif nd.op == "skip":
            layer = Layer(name, "identity" if nd.stride == 1 else "subsample", inputs, stride=nd.stride, node=v)
        elif nd.op == "sum":
            layer = Layer(name, "add", inputs, node=v)
        elif nd.op == "concat":
            layer = Layer(name, "concat", inputs, node=v)
        else:
            raise GraphError(f"cannot instantiate op {nd.op!r}")
        layer_of[v] = len(layers)
        layers.append(layer)
    return NetworkInstance(layers, g.nodes[-1].channels, name=f"graph{g.meta.get('index', '')}",
                           bn_mode=bn_mode, meta=dict(g.meta))


# ---------------------------------------------------------------------------
# Datasets of graphs
# ---------------------------------------------------------------------------


def write_graphs(path: Path, graphs: list) -> None:
    with open(path, "w") as f:
        for g in graphs:
            f.write(g.to_json() + "\n")


def read_graphs(path: Path) -> list:
    with open(path) as f:
        return [ArchGraph.from_json(line) for line in f if line.strip()]


def split_stats(graphs: list) -> dict:
    params = [count_params(g) for g in graphs]
    cells = [g.meta["cells"] for g in graphs]
    widths = [g.meta["base_channels"] for g in graphs]
    bn_nodes = [sum(nd.op == "batch_norm" for nd in g.nodes) for g in graphs]
    edges = [0] + [10 ** k for k in range(3, 8)]
    hist, _ = np.histogram(params, bins=edges)
    return {
        "count": len(graphs),
        "params": {"min": min(params), "max": max(params), "mean": float(np.mean(params))},
        "param_histogram": {"edges": edges, "counts": hist.tolist()},
        "cells": {"min": min(cells), "max": max(cells), "mean": float(np.mean(cells))},
        "base_channels": {"min": min(widths), "max": max(widths), "mean": float(np.mean(widths))},
        "bn_nodes": {"total": int(sum(bn_nodes)), "graphs_without_bn": int(sum(b == 0 for b in bn_nodes))},
        "op_counts": dict(sorted(Counter(nd.op for g in graphs for nd in g.nodes).items())),
    }


def generate_dataset(out_dir, configs: dict, sizes: dict) -> dict:
    """Sample and write one JSON-lines file per split plus ``manifest.json``.

    Args:
        configs: split name -> :class:`SamplerConfig`.
        sizes: split name -> number of graphs.

    Returns:
        The manifest dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "name": f"ConvNets-{_size_label(sizes)}", "splits": {}}
    for split, cfg in configs.items():
        graphs = sample_graphs(cfg, sizes[split])
        fname = f"{split}.jsonl"
        write_graphs(out / fname, graphs)
        manifest["splits"][split] = {"file": fname, "config": _cfg_dict(cfg), **split_stats(graphs)}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _cfg_dict(cfg: SamplerConfig) -> dict:
    d = asdict(cfg)
    d["cells"] = list(cfg.cells)
    d["channels"] = list(cfg.channels)
    return d


def _size_label(sizes: dict) -> str:
    n = sizes.get("Train", max(sizes.values()) if sizes else 0)
    return f"{n // 1000}K" if n >= 1000 and n % 1000 == 0 else str(n)


def default_dataset_configs(seed: int = 0, num_classes: int = 10, bn_free_only: bool = False, **ranges) -> dict:
    """Sampler configs for every split; ``ranges`` may set ``cells``/``channels``
    for the in-distribution splits."""
    if bn_free_only:
        return {"Train": split_config("Train", seed, num_classes, bn_prob=0.0, **ranges),
                "BNFree": split_config("BNFree", seed, num_classes, **ranges)}
    return {s: split_config(s, seed, num_classes, **ranges) for s in SPLITS}


DEFAULT_SIZES = {"Train": 1000, "TestID": 100, "Deep": 100, "Wide": 100, "BNFree": 100}


def load_dataset(root) -> dict:
    """Read every split listed in ``root/manifest.json``."""
    root = Path(root)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    order = sorted(manifest["splits"], key=lambda s: _SPLIT_IDS.get(s, len(SPLITS)))
    return {split: read_graphs(root / manifest["splits"][split]["file"]) for split in order}
