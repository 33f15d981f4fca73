"""Image-reconstruction autoencoder whose encoder outputs form the feature pyramid.

Encoder: ``depth`` x [conv3x3 stride 2 -> batchnorm -> leaky_relu(0.2)].
Decoder: ``depth - 1`` x [tconv3x3 stride 2 -> batchnorm -> relu], a 2x
nearest upsample, conv3x3, conv1x1 and tanh.  The upsample makes up the one
missing doubling so the reconstruction has the input's resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn.layers import LayerSpec, Module, Sequential, Upsample2x, build_sequential, conv_block
from .nn.tensor import Tensor


@dataclass(frozen=True)
class AutoencoderConfig:
    depth: int = 8
    base_width: int = 16
    width_cap: int | None = None
    resolution: int | None = None

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.width_cap is None:
            object.__setattr__(self, "width_cap", 8 * self.base_width)
        if self.resolution is None:
            object.__setattr__(self, "resolution", 2 ** self.depth)
        r = self.resolution
        if r < 2 or r & (r - 1):
            raise ConfigError(f"resolution {r} is not a power of two")
        if r != 2 ** self.depth:
            raise ConfigError(f"resolution {r} must equal 2**depth = {2 ** self.depth}")

    @property
    def channels(self) -> list[int]:
        """Channel count of encoder level i (1-based) at index i-1."""
        return [min(self.base_width * 2 ** (i - 1), self.width_cap) for i in range(1, self.depth + 1)]

    def level_size(self, i: int) -> int:
        return self.resolution >> i

    def to_dict(self) -> dict:
        return asdict(self)


FeaturePyramid = list  # level i (1-based) at index i-1, each [N, c_i, R/2^i, R/2^i]


class Autoencoder(Module):
    def __init__(self, config: AutoencoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.channels
        enc = []
        cin = 1
        for c in ch:
            enc.append(build_sequential(conv_block("conv3x3", cin, c, "batchnorm", "leaky_relu", stride=2), rng))
            cin = c
        self.encoder = Sequential(*enc)
        dec = []
        for i in range(config.depth - 1, 0, -1):
            # from level i+1 up to level i resolution
            dec.append(build_sequential(conv_block("tconv3x3", ch[i], ch[i - 1], "batchnorm", "relu"), rng))
        self.decoder = Sequential(*dec)
        self.upsample = Upsample2x()
        self.head = build_sequential([
            LayerSpec("conv3x3", ch[0], ch[0]),
            LayerSpec("conv1x1", ch[0], 1),
            LayerSpec("tanh", 1, 1),
        ], rng)

    def encode(self, image: Tensor) -> FeaturePyramid:
        r = self.config.resolution
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (r, r):
            raise ShapeError(f"autoencoder expects [N,1,{r},{r}] input, got {image.shape}")
        levels = []
        x = image
        for layer in self.encoder:
            x = layer(x)
            levels.append(x)
        return levels

    def decode(self, pyramid: FeaturePyramid) -> Tensor:
        cfg = self.config
        if len(pyramid) != cfg.depth:
            raise ShapeError(f"pyramid has {len(pyramid)} levels, expected {cfg.depth}")
        x = pyramid[-1]
        expected = (cfg.channels[-1], 1, 1)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"bottleneck level has shape {x.shape}, expected [N, {expected[0]}, 1, 1]")
        for layer in self.decoder:
            x = layer(x)
        x = self.upsample(x)
        return self.head(x)

    def forward(self, image: Tensor) -> Tensor:
        return self.decode(self.encode(image))


def ae_build(config: AutoencoderConfig, seed: int = 0) -> Autoencoder:
    return Autoencoder(config, seed)


def ae_encode(model: Autoencoder, image: Tensor) -> FeaturePyramid:
    return model.encode(image)


def ae_decode(model: Autoencoder, pyramid: FeaturePyramid) -> Tensor:
    return model.decode(pyramid)
