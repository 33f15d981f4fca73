"""Layer objects wrapping the functional ops, plus a minimal module tree."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .init import xavier_init
from .tensor import Parameter, Tensor


class Module:
    """Container with ordered parameters, buffers and submodules.

    Registration happens through attribute assignment, so the traversal
    order (and therefore checkpoint tensor order) follows construction order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers, e.g. to float64 for gradient checks."""
        for p in self.parameters():
            p.astype(dtype)
        for m in self.modules():
            for name in m._buffers:
                arr = getattr(m, name).astype(dtype)
                m._buffers[name] = arr
                object.__setattr__(m, name, arr)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self._modules.values():
            x = layer(x)
        return x


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 rng: np.random.Generator | int | None = None):
        super().__init__()
        self.stride = stride
        self.weight = Parameter(xavier_init((out_channels, in_channels, kernel_size, kernel_size), rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator | int | None = None):
        super().__init__()
        self.weight = Parameter(xavier_init((in_channels, out_channels, 3, 3), rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.tconv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum)


class InstanceNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.instancenorm2d(x, self.gamma, self.beta)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ("leaky_relu", "relu", "tanh"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return F.activation(x, self.kind)


class Upsample2x(Module):
    def forward(self, x: Tensor) -> Tensor:
        return F.upsample_nearest2x(x)


LAYER_KINDS = ("conv3x3", "tconv3x3", "conv1x1", "batchnorm", "instancenorm", "leaky_relu", "relu", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    slope: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == "leaky_relu" and self.slope != F.LEAKY_SLOPE:
            raise ValueError(f"leaky_relu slope must be {F.LEAKY_SLOPE}, got {self.slope}")

    def build(self, rng: np.random.Generator | None = None) -> Module:
        k = self.kind
        if k == "conv3x3":
            return Conv2d(self.in_channels, self.out_channels, 3, self.stride, rng)
        if k == "conv1x1":
            return Conv2d(self.in_channels, self.out_channels, 1, self.stride, rng)
        if k == "tconv3x3":
            return ConvTranspose2d(self.in_channels, self.out_channels, rng)
        if k == "batchnorm":
            return BatchNorm2d(self.out_channels)
        if k == "instancenorm":
            return InstanceNorm2d(self.out_channels)
        return Activation(k)


def conv_block(kind: str, cin: int, cout: int, norm: str, act: str, stride: int = 1) -> list[LayerSpec]:
    """conv -> norm -> activation, as a spec list."""
    slope = F.LEAKY_SLOPE if act == "leaky_relu" else None
    return [
        LayerSpec(kind, cin, cout, stride),
        LayerSpec(norm, cout, cout),
        LayerSpec(act, cout, cout, slope=slope),
    ]


def build_sequential(specs: list[LayerSpec], rng: np.random.Generator) -> Sequential:
    return Sequential(*(s.build(rng) for s in specs))
