"""Executable networks shared by the CNN zoo and graph instantiation.

A :class:`NetworkInstance` is a flat list of layers in topological order; each
layer names the indices of the layers it reads. :func:`forward` runs it either
in float or with simulated quantization, in which case every convolution
followed by BatchNorm is folded first and the folded weights are quantized.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .init import compute_fan
from .quant import BitConfig, UncalibratedError, bn_fold, quantize_tensor

LAYER_KINDS = (
    "input", "conv", "dense", "bn", "relu", "max_pool", "avg_pool", "gap", "flatten",
    "dropout", "add", "concat", "identity", "subsample", "head",
)
WEIGHT_KINDS = ("conv", "dense", "head")


@dataclass
class Layer:
    name: str
    kind: str
    inputs: list = field(default_factory=list)
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    p: float = 0.0
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    bn: Optional[BatchNormState] = None
    quant_output: bool = False
    role: str = ""
    node: Optional[int] = None

    def tensors(self) -> list:
        out = [t for t in (self.weight, self.bias) if t is not None]
        if self.bn is not None:
            out += [self.bn.gamma, self.bn.beta]
        return out


@dataclass
class NetworkInstance:
    """Layers plus the state needed to run them.

    ``bn_mode`` selects where eval-mode BatchNorm gets its statistics: the
    stored EMA (``"ema"``) or the current batch (``"batch"``, used for
    predicted networks). ``act_ranges`` maps relu layer names to calibrated
    activation clipping ranges.
    """

    layers: list
    num_classes: int
    name: str = "net"
    bn_mode: str = "ema"
    act_ranges: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out += layer.tensors()
        return out

    def param_count(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def weight_layers(self) -> list:
        return [layer for layer in self.layers if layer.kind in WEIGHT_KINDS]

    def act_layers(self) -> list:
        return [layer for layer in self.layers if layer.quant_output]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.parameters():
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def summary(self) -> dict:
        rows = []
        for i, layer in enumerate(self.layers):
            row = {"index": i, "name": layer.name, "kind": layer.kind, "inputs": list(layer.inputs),
                   "params": sum(t.numel() for t in layer.tensors())}
            if layer.weight is not None:
                row["weight_shape"] = list(layer.weight.shape)
            if layer.bn is not None:
                row["bn"] = True
            rows.append(row)
        return {"name": self.name, "num_classes": self.num_classes,
                "param_count": self.param_count(), "layers": rows}


def _bn_batch_mode(net: NetworkInstance, train: bool) -> bool:
    return train or net.bn_mode == "batch"


def _conv(net, layer, x, mode, train, generator):
    w, b = layer.weight, layer.bias
    kw = dict(stride=layer.stride, padding=layer.padding, dilation=layer.dilation, groups=layer.groups)
    batch_mode = _bn_batch_mode(net, train)
    if mode is None:
        y = ad.conv2d(x, w, b, **kw)
        if layer.bn is not None:
            y = ad.batch_norm(y, layer.bn, train=train, use_batch_stats=batch_mode)
        return y
    if layer.bn is not None:
        if batch_mode:
            mean, var = ad.batch_stats(ad.conv2d(x, w, b, **kw))
            if train:
                ad.update_ema(layer.bn, mean, var)
            w, b = bn_fold(w, layer.bn, b, mean, var)
        else:
            w, b = bn_fold(w, layer.bn, b)
    w = quantize_tensor(w, mode.weight_bits, mode.mode, mode.weight_observer, generator)
    return ad.conv2d(x, w, b, **kw)


def _dense(layer, x, mode, generator):
    w = layer.weight
    if mode is not None:
        w = quantize_tensor(w, mode.weight_bits, mode.mode, mode.weight_observer, generator)
    return ad.dense(x, w, layer.bias)


def _quant_act(net, layer, y, mode, generator):
    if mode.act_bits is None:
        return y
    qrange = net.act_ranges.get(layer.name)
    if qrange is None and mode.act_observer.mode == "percentile":
        raise UncalibratedError(f"activation {layer.name!r} has no calibrated percentile range")
    return quantize_tensor(y, mode.act_bits, mode.mode, mode.act_observer, generator, qrange=qrange)


def forward(
    net: NetworkInstance,
    x: Tensor,
    mode: Optional[BitConfig] = None,
    train: bool = False,
    generator: Optional[torch.Generator] = None,
    observe: Optional[Callable[[str, Tensor], None]] = None,
) -> Tensor:
    """Run ``net`` on an NCHW batch and return logits.

    Args:
        mode: ``None`` for float execution, or a :class:`BitConfig` for
            simulated quantization (BN folded, weights quantized per tensor,
            every relu output quantized).
        train: training-mode BatchNorm (batch statistics + EMA update) and
            active dropout.
        observe: called with ``(layer_name, tensor)`` for every relu output
            before quantization; used for activation calibration.
    """
    outs: list = [None] * len(net.layers)
    for i, layer in enumerate(net.layers):
        ins = [outs[j] for j in layer.inputs]
        k = layer.kind
        if k == "input":
            y = x
        elif k == "conv":
            y = _conv(net, layer, ins[0], mode, train, generator)
        elif k == "dense":
            y = _dense(layer, ins[0], mode, generator)
        elif k == "head":
            y = _dense(layer, ad.global_avg_pool(ins[0]), mode, generator)
        elif k == "bn":
            y = ad.batch_norm(ins[0], layer.bn, train=train, use_batch_stats=_bn_batch_mode(net, train))
        elif k == "relu":
            y = ad.relu(ins[0])
            if observe is not None:
                observe(layer.name, y)
            if mode is not None and layer.quant_output:
                y = _quant_act(net, layer, y, mode, generator)
        elif k == "max_pool":
            y = ad.max_pool2d(ins[0], layer.kernel, layer.stride, layer.padding)
        elif k == "avg_pool":
            y = ad.avg_pool2d(ins[0], layer.kernel, layer.stride, layer.padding)
        elif k == "gap":
            y = ad.global_avg_pool(ins[0])
        elif k == "flatten":
            y = ins[0].reshape(ins[0].shape[0], -1)
        elif k == "dropout":
            y = ad.dropout(ins[0], layer.p, train, generator)
        elif k == "add":
            y = ins[0]
            for t in ins[1:]:
                y = y + t
        elif k == "concat":
            y = torch.cat(ins, dim=1)
        elif k == "identity":
            y = ins[0]
        elif k == "subsample":
            y = ins[0][:, :, :: layer.stride, :: layer.stride]
        else:
            raise ValueError(f"unknown layer kind {k!r}")
        outs[i] = y
    return outs[-1]


def folded_weights(layer: Layer) -> tuple[Tensor, Optional[Tensor]]:
    """Weights as deployed: BN folded with EMA statistics when present."""
    if layer.bn is None:
        return layer.weight.detach(), None if layer.bias is None else layer.bias.detach()
    w, b = bn_fold(layer.weight.detach(), layer.bn, None if layer.bias is None else layer.bias.detach())
    return w.detach(), b.detach()


def layer_fan(layer: Layer):
    return compute_fan(tuple(layer.weight.shape))
