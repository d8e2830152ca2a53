"""Fixed macroarchitectures for the initializer study.

Every network has the same skeleton: a fixed 3x3 input convolution, a number
of stages of repeated conv blocks (the first block of each later stage halves
the resolution), a 2x2 max pool, and a two-layer dense classifier with 50%
dropout after the hidden layer. Only the block type and the BN switch vary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .autodiff import BatchNormState
from .init import GLOROT_UNIFORM, InitializerSpec, initialize
from .network import Layer, NetworkInstance

BLOCK_KINDS = ("RegularConv", "DWSConv", "BasicResidual", "MbNetV2InvertedBottleneck")

_DISPLAY = {
    "RegularConv": "Regular_Conv",
    "DWSConv": "DWS_Conv",
    "BasicResidual": "Basic_Residual",
    "MbNetV2InvertedBottleneck": "MbNetv2_Conv",
}

MBV2_EXPANSION = 6


@dataclass(frozen=True)
class BlockVariant:
    kind: str
    with_bn: bool = True

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")

    @property
    def name(self) -> str:
        return f"{_DISPLAY[self.kind]}_{'With' if self.with_bn else 'No'}_BN"

    @classmethod
    def parse(cls, text: str) -> "BlockVariant":
        """Inverse of :attr:`name`, e.g. ``DWS_Conv_No_BN``."""
        for kind, disp in _DISPLAY.items():
            for with_bn in (True, False):
                v = cls(kind, with_bn)
                if v.name == text:
                    return v
        raise ValueError(f"unknown architecture variant {text!r}")


ALL_VARIANTS = tuple(BlockVariant(k, bn) for k in BLOCK_KINDS for bn in (True, False))


class _Builder:
    def __init__(self, init: InitializerSpec, generator: torch.Generator, dtype: torch.dtype):
        self.init = init
        self.gen = generator
        self.dtype = dtype
        self.layers = [Layer("input", "input")]

    def add(self, layer: Layer) -> int:
        self.layers.append(layer)
        return len(self.layers) - 1

    def conv(self, src, c_in, c_out, k, name, stride=1, groups=1, bn=False, role="", spec=None):
        w = initialize((c_out, c_in // groups, k, k), spec or self.init, self.gen, self.dtype)
        return self.add(Layer(
            name, "conv", [src], kernel=k, stride=stride, padding=k // 2, groups=groups,
            weight=w.requires_grad_(), bias=torch.zeros(c_out, dtype=self.dtype, requires_grad=True),
            bn=BatchNormState.create(c_out, self.dtype) if bn else None, role=role,
        ))

    def relu(self, src, name, role=""):
        return self.add(Layer(name, "relu", [src], quant_output=True, role=role))

    def dense(self, src, f_in, f_out, name):
        w = initialize((f_in, f_out), GLOROT_UNIFORM, self.gen, self.dtype)
        return self.add(Layer(name, "dense", [src], weight=w.requires_grad_(),
                              bias=torch.zeros(f_out, dtype=self.dtype, requires_grad=True)))


def _block(b: _Builder, v: BlockVariant, x: int, c_in: int, c_out: int, stride: int, tag: str) -> int:
    bn = v.with_bn
    if v.kind == "RegularConv":
        y = b.conv(x, c_in, c_out, 3, f"{tag}.conv", stride, bn=bn)
        return b.relu(y, f"{tag}.relu")
    if v.kind == "DWSConv":
        y = b.conv(x, c_in, c_in, 3, f"{tag}.dw", stride, groups=c_in, bn=bn)
        y = b.relu(y, f"{tag}.relu1")
        y = b.conv(y, c_in, c_out, 1, f"{tag}.pw", bn=bn)
        return b.relu(y, f"{tag}.relu2")
    if v.kind == "BasicResidual":
        y = b.conv(x, c_in, c_out, 3, f"{tag}.conv1", stride, bn=bn, role="branch")
        y = b.relu(y, f"{tag}.relu1", role="branch")
        y = b.conv(y, c_out, c_out, 3, f"{tag}.conv2", bn=bn, role="branch")
        if stride != 1 or c_in != c_out:
            x = b.conv(x, c_in, c_out, 1, f"{tag}.proj", stride, bn=bn, role="skip")
        s = b.add(Layer(f"{tag}.add", "add", [y, x]))
        return b.relu(s, f"{tag}.relu2")
    hidden = c_in * MBV2_EXPANSION
    y = b.conv(x, c_in, hidden, 1, f"{tag}.expand", bn=bn, role="branch")
    y = b.relu(y, f"{tag}.relu1", role="branch")
    y = b.conv(y, hidden, hidden, 3, f"{tag}.dw", stride, groups=hidden, bn=bn, role="branch")
    y = b.relu(y, f"{tag}.relu2", role="branch")
    y = b.conv(y, hidden, c_out, 1, f"{tag}.project", bn=bn, role="branch")
    if stride == 1 and c_in == c_out:
        y = b.add(Layer(f"{tag}.add", "add", [y, x]))
    return y


def build_network(
    variant: BlockVariant,
    init: InitializerSpec,
    width: float = 1.0,
    depth: float = 1.0,
    generator: Optional[torch.Generator] = None,
    stages: int = 3,
    blocks_per_stage: int = 2,
    base_width: int = 16,
    num_classes: int = 10,
    hidden_units: int = 128,
    input_size: int = 32,
    dtype: torch.dtype = torch.float32,
) -> NetworkInstance:
    """Build one study network.

    The input convolution and both dense layers always use Glorot uniform;
    every other convolution draws from ``init``.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0 if init.seed is None else init.seed)
    b = _Builder(init, generator, dtype)
    c = max(1, round(base_width * width))
    x = b.conv(0, 3, c, 3, "conv1", bn=variant.with_bn, spec=GLOROT_UNIFORM)
    x = b.relu(x, "conv1.relu")
    n_blocks = max(1, round(blocks_per_stage * depth))
    size = input_size
    for s in range(stages):
        c_out = max(1, round(base_width * width * 2 ** s))
        for j in range(n_blocks):
            stride = 2 if (s > 0 and j == 0) else 1
            x = _block(b, variant, x, c, c_out, stride, f"s{s}b{j}")
            c = c_out
            size = (size + stride - 1) // stride
    x = b.add(Layer("pool", "max_pool", [x], kernel=2, stride=2))
    size //= 2
    x = b.add(Layer("flatten", "flatten", [x]))
    x = b.dense(x, c * size * size, hidden_units, "fc1")
    x = b.relu(x, "fc1.relu")
    x = b.add(Layer("fc1.dropout", "dropout", [x], p=0.5))
    b.dense(x, hidden_units, num_classes, "fc2")
    return NetworkInstance(b.layers, num_classes, name=f"{variant.name}_{init.name}",
                           meta={"variant": variant.name, "initializer": init.name})
