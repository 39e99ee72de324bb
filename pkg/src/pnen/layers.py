"""Parameterised layers and a minimal module container."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Container that discovers parameters and child modules from attributes.

    Attribute order is the registration order, which keeps parameter
    enumeration (and therefore checkpoints and optimiser state) stable.
    """

    training = True

    def _own_params(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_params():
            yield prefix + name, p
        for cname, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class ConvLayer(Module):
    """2-d convolution with weights (out, in, kh, kw) and a per-channel bias.

    ``init`` is ``"fan_in"`` (uniform in +-1/sqrt(fan_in)) or ``"zeros"``.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel=3,
        stride=1,
        dilation=1,
        padding=0,
        bias: bool = True,
        init: str = "fan_in",
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        if in_channels < 1 or out_channels < 1:
            raise ConfigError("conv channels must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.dilation = _pair(dilation)
        self.padding = _pair(padding)
        if min(self.kernel + self.stride + self.dilation) < 1 or min(self.padding) < 0:
            raise ConfigError("conv kernel/stride/dilation must be >= 1 and padding >= 0")
        kh, kw = self.kernel
        shape = (out_channels, in_channels, kh, kw)
        if init == "zeros":
            w = np.zeros(shape, dtype=dtype)
            b = np.zeros(out_channels, dtype=dtype)
        elif init == "fan_in":
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / np.sqrt(in_channels * kh * kw)
            w = rng.uniform(-bound, bound, size=shape).astype(dtype)
            b = rng.uniform(-bound, bound, size=out_channels).astype(dtype)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True) if bias else None

    def _own_params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    @property
    def weight_grad(self):
        return self.weight.grad

    @property
    def bias_grad(self):
        return None if self.bias is None else self.bias.grad

    def output_size(self, h: int, w: int, padding=None) -> tuple[int, int]:
        ph, pw = _pair(padding) if padding is not None else self.padding
        return (
            ops.conv_output_size(h, self.kernel[0], self.stride[0], self.dilation[0], ph),
            ops.conv_output_size(w, self.kernel[1], self.stride[1], self.dilation[1], pw),
        )

    def __call__(self, x: Tensor, padding=None) -> Tensor:
        return ops.conv2d(x, self, padding)


class BatchNormLayer(Module):
    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, dtype=np.float64):
        if not 0 < momentum < 1:
            raise ConfigError("batchnorm momentum must lie in (0, 1)")
        if epsilon < 0:
            raise ConfigError("batchnorm epsilon must be non-negative")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _own_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self)
