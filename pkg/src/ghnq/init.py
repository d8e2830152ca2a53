"""Random weight initializers and fan computation.

Twelve named strategies are supported::

    RandUni_{Small,Med,Large}     U[-b, b], b in {0.25, 0.5, 1.0}
    RandNorm_{Small,Med,Large}    N(0, std^2), std in {0.1, 0.5, 1.0}
    GlorotUni, GlorotNorm         bound sqrt(6/(fan_in+fan_out)), std sqrt(2/(fan_in+fan_out))
    HeUni, HeNorm                 bound sqrt(6/fan_in), std sqrt(2/fan_in)
    ModGlorotUni_{Med,Large}      bound sqrt(C/(fan_in+fan_out)), C in {36, 1296}
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

FAMILIES = ("RandUni", "RandNorm", "GlorotUni", "GlorotNorm", "HeUni", "HeNorm", "ModGlorotUni")

_SIZE_SCALES = {
    "RandUni": {"Small": 0.25, "Med": 0.5, "Large": 1.0},
    "RandNorm": {"Small": 0.1, "Med": 0.5, "Large": 1.0},
    "ModGlorotUni": {"Med": 36.0, "Large": 1296.0},
}


class InitError(ValueError):
    pass


@dataclass(frozen=True)
class FanInfo:
    kernel: int
    channels_in: int
    channels_out: int
    fan_in: int
    fan_out: int


def compute_fan(shape: Sequence[int]) -> FanInfo:
    """Fans of an OIHW conv kernel (``K*K*channels``) or an [in, out] dense matrix.

    For grouped kernels ``channels_in`` is the per-group input count, so a
    depthwise 3x3 kernel has ``fan_in = 9``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        f_in, f_out = shape
        return FanInfo(1, f_in, f_out, f_in, f_out)
    if len(shape) != 4:
        raise InitError(f"expected a 2-D or 4-D weight shape, got {shape}")
    c_out, c_in, kh, kw = shape
    if kh != kw:
        raise InitError(f"non-square kernel {kh}x{kw}")
    return FanInfo(kh, c_in, c_out, kh * kh * c_in, kh * kh * c_out)


@dataclass(frozen=True)
class InitializerSpec:
    family: str
    scale: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InitError(f"unknown initializer family {self.family!r}")
        if self.family in _SIZE_SCALES and self.scale is None:
            raise InitError(f"{self.family} needs a scale parameter")

    @property
    def name(self) -> str:
        if self.family in _SIZE_SCALES:
            for size, value in _SIZE_SCALES[self.family].items():
                if value == self.scale:
                    return f"{self.family}_{size}"
            return f"{self.family}_{self.scale:g}"
        return self.family

    @classmethod
    def parse(cls, text: str, seed: Optional[int] = None) -> "InitializerSpec":
        """Build a spec from a name such as ``HeUni`` or ``ModGlorotUni_Med``."""
        family, _, size = text.partition("_")
        if family not in FAMILIES:
            raise InitError(f"unknown initializer {text!r}")
        if family == "ModGlorotUni" and not size:
            return cls(family, 6.0, seed)
        if family in _SIZE_SCALES:
            try:
                return cls(family, _SIZE_SCALES[family][size], seed)
            except KeyError:
                raise InitError(f"unknown size {size!r} for {family}") from None
        if size:
            raise InitError(f"{family} takes no size suffix")
        return cls(family, None, seed)


ALL_INITIALIZERS = (
    "RandUni_Small", "RandUni_Med", "RandUni_Large",
    "RandNorm_Small", "RandNorm_Med", "RandNorm_Large",
    "GlorotUni", "GlorotNorm", "HeUni", "HeNorm",
    "ModGlorotUni_Med", "ModGlorotUni_Large",
)

GLOROT_UNIFORM = InitializerSpec("GlorotUni")


def distribution(spec: InitializerSpec, fan: FanInfo) -> tuple[str, float]:
    """Return ``("uniform", bound)`` or ``("normal", std)`` for a layer."""
    fam = spec.family
    if fam == "RandUni":
        return "uniform", spec.scale
    if fam == "RandNorm":
        return "normal", spec.scale
    if fam == "GlorotUni":
        return "uniform", math.sqrt(6.0 / (fan.fan_in + fan.fan_out))
    if fam == "ModGlorotUni":
        return "uniform", math.sqrt(spec.scale / (fan.fan_in + fan.fan_out))
    if fam == "GlorotNorm":
        return "normal", math.sqrt(2.0 / (fan.fan_in + fan.fan_out))
    if fam == "HeUni":
        return "uniform", math.sqrt(6.0 / fan.fan_in)
    if fam == "HeNorm":
        return "normal", math.sqrt(2.0 / fan.fan_in)
    raise InitError(f"unknown initializer family {fam!r}")


def initialize(
    shape: Sequence[int],
    spec: InitializerSpec,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Sample an i.i.d. weight tensor of ``shape`` from ``spec``."""
    kind, value = distribution(spec, compute_fan(shape))
    if generator is None and spec.seed is not None:
        generator = torch.Generator().manual_seed(spec.seed)
    if kind == "uniform":
        u = torch.rand(tuple(shape), generator=generator, dtype=torch.float64)
        w = (2.0 * u - 1.0) * value
    else:
        w = torch.randn(tuple(shape), generator=generator, dtype=torch.float64) * value
    return w.to(dtype)
