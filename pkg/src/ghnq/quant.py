"""Simulated uniform affine quantization.

Per-tensor, asymmetric quantization to unsigned integers in ``[0, 2**N - 1]``:

    s = (max - min) / (2**N - 1)
    Z = round(-min / s)
    Q = round(clamp(R, min, max) / s) + Z

Rounding is half-away-from-zero everywhere. Real zero is always exactly
representable because the clipping range is extended to contain it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch

from .autodiff import BatchNormState, Tensor, custom_grad_region

DEGENERATE_EPS = 1e-8


class QuantError(ValueError):
    pass


class UncalibratedError(RuntimeError):
    """A percentile-mode activation quantizer was used before calibration."""


def round_half_away(x: Tensor) -> Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def _round_half_away_scalar(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class QuantParams:
    bitwidth: int
    min: float
    max: float
    scale: float
    zeropoint: int

    @property
    def qmax(self) -> int:
        return 2 ** self.bitwidth - 1

    @property
    def inv_scale(self) -> float:
        # exact for ties such as 0.5 * 255 / 1
        return self.qmax / (self.max - self.min)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(int(d["bitwidth"]), float(d["min"]), float(d["max"]), float(d["scale"]), int(d["zeropoint"]))


def compute_quant_params(min_val: float, max_val: float, bits: int) -> QuantParams:
    """Scale and zero-point for the clipping range ``[min_val, max_val]``.

    A degenerate range is widened by ``DEGENERATE_EPS`` on each side, and the
    range is extended to include 0 so the zero-point is an integer in range.
    """
    if bits < 2:
        raise QuantError(f"bitwidth must be >= 2, got {bits}")
    min_val, max_val = float(min_val), float(max_val)
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise QuantError(f"non-finite clipping range [{min_val}, {max_val}]")
    if min_val > max_val:
        raise QuantError(f"min {min_val} exceeds max {max_val}")
    if min_val == max_val:
        min_val -= DEGENERATE_EPS
        max_val += DEGENERATE_EPS
    min_val = min(min_val, 0.0)
    max_val = max(max_val, 0.0)
    qmax = 2 ** bits - 1
    scale = (max_val - min_val) / qmax
    z = _round_half_away_scalar(-min_val * qmax / (max_val - min_val))
    z = min(max(z, 0), qmax)
    return QuantParams(bits, min_val, max_val, scale, z)


def _work_dtype(dtype: torch.dtype, bits: int) -> torch.dtype:
    # float32 holds every integer code exactly up to 2**24
    if dtype == torch.float64 or bits > 16:
        return torch.float64
    return torch.float32


def quantize(r: Tensor, qp: QuantParams) -> Tensor:
    """Map reals to integer codes (int64) in ``[0, 2**N - 1]``."""
    r = torch.as_tensor(r).detach()
    if not r.is_floating_point():
        r = r.to(torch.float64)
    x = torch.clamp(r.to(_work_dtype(r.dtype, qp.bitwidth)), qp.min, qp.max)
    q = round_half_away(x * qp.inv_scale) + qp.zeropoint
    return torch.clamp(q, 0, qp.qmax).to(torch.int64)


def dequantize(q: Tensor, qp: QuantParams, dtype: torch.dtype = torch.float32) -> Tensor:
    work = _work_dtype(dtype, qp.bitwidth)
    return ((q.to(work) - qp.zeropoint) * qp.scale).to(dtype)


def _fake_quant_forward(qp: QuantParams):
    def fwd(r: Tensor) -> Tensor:
        return dequantize(quantize(r, qp), qp, dtype=r.dtype)
    return fwd


def _clipped_ste(qp: QuantParams):
    def rule(grad_out: Tensor, r: Tensor) -> Tensor:
        return grad_out * ((r >= qp.min) & (r <= qp.max)).to(grad_out.dtype)
    return rule


def fake_quant(r: Tensor, qp: QuantParams) -> Tensor:
    """Quantize-dequantize with a clipped straight-through gradient."""
    return custom_grad_region(_fake_quant_forward(qp), _clipped_ste(qp), r)


@dataclass(frozen=True)
class NoiseQuantConfig:
    bitwidth: int
    a: float
    b: float

    @property
    def delta(self) -> float:
        return (self.b - self.a) / (2 ** self.bitwidth - 1)


def noise_quant(x: Tensor, cfg: NoiseQuantConfig, generator: Optional[torch.Generator] = None) -> Tensor:
    """``clamp(x, a, b) + eps`` with ``eps ~ U[-delta/2, delta/2]`` drawn per element.

    The noise is a constant for differentiation; gradients pass through the clamp.
    """
    if not cfg.a < cfg.b:
        raise QuantError(f"noise_quant needs a < b, got a={cfg.a}, b={cfg.b}")
    noise = (torch.rand(x.shape, generator=generator, dtype=x.dtype) - 0.5) * cfg.delta
    return torch.clamp(x, cfg.a, cfg.b) + noise


def bn_fold(
    weight: Tensor,
    bn: BatchNormState,
    bias: Optional[Tensor] = None,
    mean: Optional[Tensor] = None,
    var: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Fold BatchNorm into the preceding convolution.

    Returns ``(w * gamma / sqrt(var + eps), folded_bias)`` with the scaling
    applied per output channel. EMA statistics are used unless ``mean``/``var``
    are supplied (batch statistics).
    """
    if weight.shape[0] != bn.channels:
        raise QuantError(f"BatchNorm has {bn.channels} channels, weight has {weight.shape[0]} outputs")
    mean = bn.running_mean if mean is None else mean
    var = bn.running_var if var is None else var
    scale = bn.gamma / torch.sqrt(var + bn.eps)
    w = weight * scale.view(-1, *([1] * (weight.dim() - 1)))
    b0 = -mean if bias is None else bias - mean
    return w, bn.beta + scale * b0


# ---------------------------------------------------------------------------
# Range observers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObserverConfig:
    mode: str = "absolute"
    fraction: float = 0.01
    sample_size: int = 1024

    def __post_init__(self):
        if self.mode not in ("absolute", "percentile"):
            raise QuantError(f"unknown observer mode {self.mode!r}")
        if not 0.0 < self.fraction < 0.5:
            raise QuantError(f"percentile fraction must lie in (0, 0.5), got {self.fraction}")


def percentile_range(values: Tensor, fraction: float) -> tuple[float, float]:
    """Linear-interpolated order statistics at ``fraction`` and ``1 - fraction``."""
    flat = values.detach().reshape(-1).to(torch.float64).cpu().numpy()
    lo, hi = np.quantile(flat, [fraction, 1.0 - fraction])
    return float(lo), float(hi)


def tensor_range(values: Tensor, cfg: ObserverConfig) -> tuple[float, float]:
    if values.numel() == 0:
        raise QuantError("cannot observe the range of an empty tensor")
    if cfg.mode == "absolute":
        v = values.detach()
        return float(v.min()), float(v.max())
    return percentile_range(values, cfg.fraction)


class RangeObserver:
    """Accumulates a clipping range over a stream of tensors."""

    def __init__(self, cfg: ObserverConfig = ObserverConfig()):
        self.cfg = cfg
        self._min = math.inf
        self._max = -math.inf
        self._chunks: list = []

    def update(self, t: Tensor) -> None:
        if t.numel() == 0:
            return
        if self.cfg.mode == "absolute":
            v = t.detach()
            self._min = min(self._min, float(v.min()))
            self._max = max(self._max, float(v.max()))
        else:
            self._chunks.append(t.detach().reshape(-1).to(torch.float64).cpu().numpy())

    @property
    def empty(self) -> bool:
        return not self._chunks and self._min == math.inf

    def compute(self) -> tuple[float, float]:
        if self.empty:
            raise QuantError("observer has seen no data")
        if self.cfg.mode == "absolute":
            return self._min, self._max
        lo, hi = np.quantile(np.concatenate(self._chunks), [self.cfg.fraction, 1.0 - self.cfg.fraction])
        return float(lo), float(hi)


def observe_range(samples: Iterable[Tensor], cfg: ObserverConfig = ObserverConfig()) -> tuple[float, float]:
    obs = RangeObserver(cfg)
    for s in samples:
        obs.update(torch.as_tensor(s))
    return obs.compute()


# ---------------------------------------------------------------------------
# Bit settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BitConfig:
    """Weight/activation bitwidths plus how each side is quantized.

    ``None`` for a bitwidth disables quantization of that side while keeping
    the BN-folding forward path. ``mode='noisequant'`` replaces rounding with
    additive uniform noise of the same stepsize on weights and activations.
    """

    weight_bits: Optional[int] = 8
    act_bits: Optional[int] = 8
    mode: str = "simquant"
    weight_observer: ObserverConfig = field(default_factory=ObserverConfig)
    act_observer: ObserverConfig = field(default_factory=ObserverConfig)

    def __post_init__(self):
        if self.mode not in ("simquant", "noisequant"):
            raise QuantError(f"unknown quantization mode {self.mode!r}")
        for b in (self.weight_bits, self.act_bits):
            if b is not None and b < 2:
                raise QuantError(f"bitwidth must be >= 2, got {b}")

    @property
    def name(self) -> str:
        return f"W{self.weight_bits}/A{self.act_bits}"

    @classmethod
    def parse(cls, text: str, **kwargs) -> "BitConfig":
        """Parse ``"4/8"`` or ``"W4/A8"``."""
        try:
            w, a = text.upper().replace("W", "").replace("A", "").split("/")
            return cls(int(w), int(a), **kwargs)
        except ValueError as exc:
            raise QuantError(f"cannot parse bit setting {text!r}; expected W/A such as 4/8") from exc


STANDARD_BITS = ("8/8", "4/8", "4/4", "2/2")


def quantize_tensor(
    t: Tensor,
    bits: Optional[int],
    mode: str,
    observer: ObserverConfig,
    generator: Optional[torch.Generator] = None,
    qrange: Optional[tuple[float, float]] = None,
) -> Tensor:
    """Fake-quantize (or noise-quantize) ``t`` with a per-tensor range.

    The range comes from ``qrange`` when given, otherwise from ``t`` itself
    (detached) under ``observer``.
    """
    if bits is None:
        return t
    lo, hi = qrange if qrange is not None else tensor_range(t, observer)
    qp = compute_quant_params(lo, hi, bits)
    if mode == "noisequant":
        return noise_quant(t, NoiseQuantConfig(bits, qp.min, qp.max), generator)
    return fake_quant(t, qp)
