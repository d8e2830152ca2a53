import math

import pytest
import torch

from ghnq.init import GLOROT_UNIFORM, InitializerSpec, compute_fan, distribution
from ghnq.network import Layer, NetworkInstance, folded_weights, forward
from ghnq.quant import BitConfig, ObserverConfig, UncalibratedError, compute_quant_params
from ghnq.zoo import ALL_VARIANTS, BlockVariant, build_network

HE = InitializerSpec("HeUni")


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_variant_names():
    assert len(ALL_VARIANTS) == 8
    assert BlockVariant("RegularConv", True).name == "Regular_Conv_With_BN"
    assert BlockVariant("MbNetV2InvertedBottleneck", False).name == "MbNetv2_Conv_No_BN"
    for v in ALL_VARIANTS:
        assert BlockVariant.parse(v.name) == v
    with pytest.raises(ValueError):
        BlockVariant("Inception")


def test_first_layer_param_count():
    net = build_network(BlockVariant("RegularConv", False), HE, generator=_gen())
    conv1 = net.layers[1]
    assert conv1.name == "conv1"
    assert conv1.weight.numel() + conv1.bias.numel() == 448


def test_dws_smaller_than_regular():
    reg = build_network(BlockVariant("RegularConv", False), HE, generator=_gen())
    dws = build_network(BlockVariant("DWSConv", False), HE, generator=_gen())
    assert dws.param_count() < reg.param_count()


def test_same_seed_same_hash():
    v = BlockVariant("BasicResidual", True)
    assert build_network(v, HE, generator=_gen(3)).param_hash() == build_network(v, HE, generator=_gen(3)).param_hash()
    assert build_network(v, HE, generator=_gen(3)).param_hash() != build_network(v, HE, generator=_gen(4)).param_hash()


def test_first_conv_and_dense_are_glorot():
    net = build_network(BlockVariant("RegularConv", False), InitializerSpec.parse("RandUni_Large"), generator=_gen())
    for layer in net.layers:
        if layer.name in ("conv1", "fc1", "fc2"):
            bound = distribution(GLOROT_UNIFORM, compute_fan(tuple(layer.weight.shape)))[1]
            assert float(layer.weight.abs().max()) <= bound * (1 + 1e-6)
        elif layer.kind == "conv":
            assert float(layer.weight.abs().max()) > 0.5


def test_dense_layers_followed_by_dropout():
    net = build_network(BlockVariant("DWSConv", True), HE, generator=_gen())
    kinds = [layer.kind for layer in net.layers]
    assert kinds[-5:] == ["flatten", "dense", "relu", "dropout", "dense"]


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.name)
def test_forward_shapes_float_and_quant(variant):
    net = build_network(variant, HE, width=0.5, generator=_gen())
    x = torch.randn(4, 3, 32, 32)
    assert forward(net, x).shape == (4, 10)
    assert forward(net, x, mode=BitConfig(8, 8)).shape == (4, 10)
    assert forward(net, x, train=True, generator=_gen()).shape == (4, 10)
    bn_layers = [layer for layer in net.layers if layer.bn is not None]
    assert bool(bn_layers) == variant.with_bn


def test_simquant_deterministic_and_32bit_is_float():
    net = build_network(BlockVariant("BasicResidual", True), HE, width=0.5, generator=_gen())
    x = torch.randn(4, 3, 32, 32, dtype=torch.float32)
    with torch.no_grad():
        a = forward(net, x, mode=BitConfig(4, 4))
        b = forward(net, x, mode=BitConfig(4, 4))
        assert torch.equal(a, b)
        f = forward(net, x)
        q32 = forward(net, x, mode=BitConfig(32, 32))
    assert float((q32 - f).abs().max()) <= 1e-5 * max(1.0, float(f.abs().max()))


def test_w8a8_exact_on_grid_toy_net():
    # weights {1, -2} and {0, 1} are endpoints of their 8-bit grids; integer
    # activations sit on the calibrated [0, 255] grid with stepsize 1
    conv = Layer("conv", "conv", [0], weight=torch.tensor([1.0, -2.0]).view(2, 1, 1, 1), bias=torch.zeros(2))
    relu = Layer("relu", "relu", [1], quant_output=True)
    head = Layer("fc", "dense", [3], weight=torch.eye(2), bias=torch.zeros(2))
    net = NetworkInstance([Layer("in", "input"), conv, relu, Layer("gap", "gap", [2]), head], 2)
    net.act_ranges = {"relu": (0.0, 255.0)}
    assert compute_quant_params(0.0, 255.0, 8).scale == 1.0
    x = torch.tensor([3.0, -5.0, 7.0]).view(3, 1, 1, 1)
    mode = BitConfig(8, 8, act_observer=ObserverConfig("percentile"))
    assert torch.equal(forward(net, x, mode=mode), forward(net, x))


def test_percentile_mode_requires_calibration():
    net = build_network(BlockVariant("RegularConv", False), HE, width=0.25, generator=_gen())
    mode = BitConfig(8, 8, act_observer=ObserverConfig("percentile"))
    with pytest.raises(UncalibratedError):
        forward(net, torch.randn(2, 3, 32, 32), mode=mode)


def test_folded_weights_without_bn_equal_raw():
    net = build_network(BlockVariant("RegularConv", False), HE, generator=_gen())
    for layer in net.weight_layers():
        w, _ = folded_weights(layer)
        assert torch.equal(w, layer.weight.detach())


def test_width_and_depth_scaling():
    v = BlockVariant("RegularConv", True)
    small = build_network(v, HE, width=0.5, generator=_gen())
    deep = build_network(v, HE, depth=2.0, generator=_gen())
    base = build_network(v, HE, generator=_gen())
    assert small.param_count() < base.param_count() < deep.param_count()
    assert len(deep.weight_layers()) > len(base.weight_layers())
    assert math.isfinite(float(forward(deep, torch.randn(2, 3, 32, 32)).sum()))
