"""Dense tensor ops with reverse-mode gradients.

Tensors are ``torch.Tensor`` objects and the gradient tape is torch's autograd
graph. This module pins down the op contracts the rest of the package relies
on (shape checks, BatchNorm EMA semantics, the custom-gradient hook used for
the straight-through estimator, and the two optimizers).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DEFAULT_DTYPE = torch.float32
BN_DECAY = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf where finite values are required."""


class NoTapeError(RuntimeError):
    """Raised when ``backward`` is called on a tensor that was not recorded."""


def tensor(data, dtype: torch.dtype = DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def is_finite(t: Tensor) -> bool:
    return bool(torch.isfinite(t).all())


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Return ``t`` unchanged, raising :class:`NonFiniteError` if it has NaN/Inf."""
    if not is_finite(t):
        raise NonFiniteError(f"{name} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over an NCHW input with an OIHW kernel."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    n, c_in, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_per_group * groups != c_in:
        raise ShapeError(
            f"weight expects {c_per_group * groups} input channels (groups={groups}), input has {c_in}"
        )
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    if h + 2 * padding < eff_h or w + 2 * padding < eff_w:
        raise ShapeError(
            f"kernel {kh}x{kw} (dilation {dilation}) does not fit padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {c_out} output channels")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, dilation=dilation, groups=groups)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight laid out as [in, out]."""
    if x.dim() != 2 or weight.dim() != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"inner dims differ: input has {x.shape[1]} features, weight expects {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[1]} units")
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def _check_window(x: Tensor, kernel: int, padding: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"pooling expects NCHW input, got {tuple(x.shape)}")
    if kernel < 1 or padding < 0 or 2 * padding > kernel:
        raise ShapeError(f"invalid pooling window kernel={kernel} padding={padding}")
    if x.shape[2] + 2 * padding < kernel or x.shape[3] + 2 * padding < kernel:
        raise ShapeError(f"pooling window {kernel} does not fit input {tuple(x.shape[2:])}")


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    _check_window(x, kernel, padding)
    return F.max_pool2d(x, kernel, stride or kernel, padding)


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    # padded cells are excluded from the average
    _check_window(x, kernel, padding)
    return F.avg_pool2d(x, kernel, stride or kernel, padding, count_include_pad=False)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.dim() != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {tuple(x.shape)}")
    return x.mean(dim=(2, 3))


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def dropout(x: Tensor, p: float = 0.5, train: bool = False, generator: Optional[torch.Generator] = None) -> Tensor:
    """Inverted dropout: identity in eval mode, scaled by 1/(1-p) in training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


@dataclass
class BatchNormState:
    """Per-channel BatchNorm parameters and EMA statistics.

    ``gamma`` and ``beta`` are trainable; ``running_mean``/``running_var`` are
    the EMA statistics folded into the preceding convolution at inference.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype: torch.dtype = DEFAULT_DTYPE, eps: float = BN_EPS) -> "BatchNormState":
        return cls(
            gamma=torch.ones(channels, dtype=dtype, requires_grad=True),
            beta=torch.zeros(channels, dtype=dtype, requires_grad=True),
            running_mean=torch.zeros(channels, dtype=dtype),
            running_var=torch.ones(channels, dtype=dtype),
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and biased variance over every axis except dim 1."""
    if x.shape[0] == 0:
        raise ShapeError("batch statistics need a non-empty batch")
    axes = [d for d in range(x.dim()) if d != 1]
    mean = x.mean(dim=axes)
    var = x.var(dim=axes, unbiased=False)
    return mean, var


def _channel_view(v: Tensor, ndim: int) -> Tensor:
    return v.view(1, -1, *([1] * (ndim - 2)))


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    train: bool = False,
    use_batch_stats: Optional[bool] = None,
    decay: float = BN_DECAY,
) -> Tensor:
    """Normalize ``x`` per channel.

    Training mode normalizes with batch statistics and updates the EMA as
    ``new = decay * old + (1 - decay) * batch_stat``. Eval mode uses the EMA.
    ``use_batch_stats=True`` normalizes with batch statistics without touching
    the EMA (used for predicted networks whose statistics are never stored).
    """
    if x.shape[1] != state.channels:
        raise ShapeError(f"BatchNorm has {state.channels} channels, input has {x.shape[1]}")
    if x.shape[0] == 0:
        raise ShapeError("batch_norm received a zero-size batch")
    batch_mode = train if use_batch_stats is None else use_batch_stats
    if batch_mode:
        mean, var = batch_stats(x)
        if train:
            update_ema(state, mean, var, decay)
    else:
        mean, var = state.running_mean, state.running_var
    inv = state.gamma / torch.sqrt(var + state.eps)
    return (x - _channel_view(mean, x.dim())) * _channel_view(inv, x.dim()) + _channel_view(state.beta, x.dim())


def update_ema(state: BatchNormState, mean: Tensor, var: Tensor, decay: float = BN_DECAY) -> None:
    with torch.no_grad():
        state.running_mean.mul_(decay).add_((1.0 - decay) * mean.detach())
        state.running_var.mul_(decay).add_((1.0 - decay) * var.detach())


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.dim() != 2:
        raise ShapeError(f"logits must be [B, C], got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {tuple(labels.shape)}")
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, labels.view(-1, 1)).squeeze(1)
    return (log_z - picked).mean()


# ---------------------------------------------------------------------------
# Custom gradients
# ---------------------------------------------------------------------------


class _Region(torch.autograd.Function):
    @staticmethod
    def forward(ctx, forward_fn, backward_rule, *inputs):
        with torch.no_grad():
            out = forward_fn(*inputs)
        ctx.backward_rule = backward_rule
        ctx.save_for_backward(*inputs)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        grads = ctx.backward_rule(grad_out, *ctx.saved_tensors)
        if not isinstance(grads, tuple):
            grads = (grads,)
        return (None, None, *grads)


def custom_grad_region(
    forward_fn: Callable[..., Tensor],
    backward_rule: Callable[..., Tensor | tuple],
    *inputs: Tensor,
) -> Tensor:
    """Evaluate ``forward_fn(*inputs)`` with a hand-written backward.

    ``backward_rule(grad_out, *inputs)`` returns the gradient for each input
    (a tuple when there are several). It is applied verbatim; nothing inside
    ``forward_fn`` is differentiated.
    """
    return _Region.apply(forward_fn, backward_rule, *inputs)


# ---------------------------------------------------------------------------
# Backward pass and optimizers
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise NoTapeError("loss was not produced by recorded operations")
    loss.backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class SGDMomentum:
    """Heavy-ball SGD: ``v = m * v + g``; ``p -= lr * v``."""

    params: list
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.velocity:
            self.velocity = [torch.zeros_like(p) for p in self.params]

    def step(self) -> None:
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.velocity,
                          self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[Tensor]],
    velocity: Sequence[Tensor],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("optimizer state does not match the parameter set")
    with torch.no_grad():
        for p, g, v in zip(params, grads, velocity):
            if g is None:
                continue
            if weight_decay:
                g = g + weight_decay * p
            v.mul_(momentum).add_(g)
            p.sub_(lr * v)


@dataclass
class Adam:
    """Adam with bias correction; weight decay enters as an L2 gradient term."""

    params: list
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.state:
            self.state = {
                "t": 0,
                "m": [torch.zeros_like(p) for p in self.params],
                "v": [torch.zeros_like(p) for p in self.params],
            }

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[Tensor]],
    state: dict,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    if not (len(params) == len(grads) == len(state["m"]) == len(state["v"])):
        raise ValueError("optimizer state does not match the parameter set")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            if weight_decay:
                g = g + weight_decay * p
            m.mul_(b1).add_((1.0 - b1) * g)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
