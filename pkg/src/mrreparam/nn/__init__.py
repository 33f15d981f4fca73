"""Minimal numpy tensor library: tape-based autodiff, layers, Adam."""
from .functional import (
    activation,
    batchnorm2d,
    broadcast_plane,
    broadcast_planes,
    concat_channels,
    conv2d,
    instancenorm2d,
    leaky_relu,
    mse,
    relu,
    tanh,
    tconv2d,
    upsample_nearest2x,
)
from .init import xavier_init
from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm2d,
    LayerSpec,
    Module,
    Sequential,
    Upsample2x,
)
from .optim import Adam, adam_step
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "Activation",
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "InstanceNorm2d",
    "LayerSpec",
    "Module",
    "Parameter",
    "Sequential",
    "Tensor",
    "Upsample2x",
    "activation",
    "adam_step",
    "backward",
    "batchnorm2d",
    "broadcast_plane",
    "broadcast_planes",
    "concat_channels",
    "conv2d",
    "instancenorm2d",
    "leaky_relu",
    "mse",
    "no_grad",
    "relu",
    "tanh",
    "tconv2d",
    "upsample_nearest2x",
    "xavier_init",
]
