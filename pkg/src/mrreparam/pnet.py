"""Coarse-to-fine Param-Net.

Block i (1..D) doubles the spatial size with a transposed conv, concatenates
encoder level D-i (same size; the last block has no skip), then runs

    conv3x3 -> IN -> lrelu -> [stack parameter planes] -> conv3x3 -> IN -> lrelu
    -> conv3x3 -> IN -> lrelu

A conv3x3 -> conv3x3 -> tanh head follows the last block.  Acquisition
parameters enter as constant planes re-stacked in every block.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .ae import AutoencoderConfig, FeaturePyramid
from .errors import ConfigError, ParamRangeError, ShapeError
from .nn import functional as F
from .nn.layers import Activation, Conv2d, ConvTranspose2d, InstanceNorm2d, Module, Sequential
from .nn.tensor import Tensor
from .sim import TE_MAX, TE_MIN, TR_MAX, TR_MIN, ScanParams

MODES = ("d2p", "p2p")


def normalize_params(params: ScanParams, lenient: bool = False) -> tuple[float, float]:
    """Map (TE, TR) to [-1, 1]: log scale for TE, linear for TR."""
    te, tr = params.te_s, params.tr_s
    if not params.in_range():
        if not lenient:
            raise ParamRangeError(f"TE={te}, TR={tr} outside the sampling bounds")
        te = min(max(te, TE_MIN), TE_MAX)
        tr = min(max(tr, TR_MIN), TR_MAX)
    te_n = 2.0 * (math.log(te / TE_MIN) / math.log(TE_MAX / TE_MIN)) - 1.0
    tr_n = 2.0 * ((tr - TR_MIN) / (TR_MAX - TR_MIN)) - 1.0
    return te_n, tr_n


def param_channels(mode: str) -> int:
    return 2 if mode == "d2p" else 4


def condition_vector(mode: str, params_out: ScanParams, params_in: ScanParams | None = None,
                     lenient: bool = False) -> np.ndarray:
    """Normalized conditioning values: (te_out, tr_out) or (te_in, tr_in, te_out, tr_out)."""
    out = normalize_params(params_out, lenient)
    if mode == "d2p":
        return np.array(out, dtype=np.float32)
    if params_in is None:
        raise ConfigError("p2p conditioning needs the input image parameters")
    return np.array(normalize_params(params_in, lenient) + out, dtype=np.float32)


@dataclass(frozen=True)
class ParamNetConfig:
    mode: str = "d2p"
    depth: int = 8
    base_width: int = 16
    width_cap: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.width_cap is None:
            object.__setattr__(self, "width_cap", 8 * self.base_width)

    @classmethod
    def matching(cls, ae_config: AutoencoderConfig, mode: str) -> "ParamNetConfig":
        return cls(mode, ae_config.depth, ae_config.base_width, ae_config.width_cap)

    @property
    def ae_channels(self) -> list[int]:
        return [min(self.base_width * 2 ** (i - 1), self.width_cap) for i in range(1, self.depth + 1)]

    @property
    def block_widths(self) -> list[int]:
        """Width of block i at index i-1: the encoder width at the same resolution."""
        ch = self.ae_channels
        return [ch[self.depth - i - 1] if i < self.depth else ch[0] for i in range(1, self.depth + 1)]

    @property
    def n_param_channels(self) -> int:
        return param_channels(self.mode)

    def to_dict(self) -> dict:
        return asdict(self)


class ParamBlock(Module):
    def __init__(self, cin: int, width: int, skip: int, n_params: int, rng: np.random.Generator):
        super().__init__()
        self.skip_channels = skip
        self.up = ConvTranspose2d(cin, width, rng)
        self.conv1 = Conv2d(width + skip, width, 3, 1, rng)
        self.norm1 = InstanceNorm2d(width)
        self.conv2 = Conv2d(width + n_params, width, 3, 1, rng)
        self.norm2 = InstanceNorm2d(width)
        self.conv3 = Conv2d(width, width, 3, 1, rng)
        self.norm3 = InstanceNorm2d(width)

    def forward(self, x: Tensor, skip: Tensor | None, cond: np.ndarray, trace: list | None = None) -> Tensor:
        x = self.up(x)
        if trace is not None:
            trace.append(("tconv", x.shape))
        if skip is not None:
            if skip.shape[2:] != x.shape[2:]:
                raise ShapeError(f"skip features {skip.shape} do not match upsampled {x.shape}")
            if trace is not None:
                trace.append(("skip", skip.shape))
            x = F.concat_channels(x, skip)
        x = F.leaky_relu(self._norm(self.norm1, self.conv1(x), trace))
        h, w = x.shape[2:]
        planes = F.broadcast_planes(cond, h, w, dtype=x.dtype)
        if trace is not None:
            trace.append(("planes", planes))
        x = F.concat_channels(x, planes)
        x = F.leaky_relu(self._norm(self.norm2, self.conv2(x), trace))
        x = F.leaky_relu(self._norm(self.norm3, self.conv3(x), trace))
        return x

    @staticmethod
    def _norm(norm: InstanceNorm2d, x: Tensor, trace):
        if trace is not None:
            trace.append(("instancenorm", x.shape))
        return norm(x)


class ParamNet(Module):
    def __init__(self, config: ParamNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.depth
        ch = config.ae_channels
        widths = config.block_widths
        blocks = []
        cin = ch[-1]
        for i in range(1, d + 1):
            skip = ch[d - i - 1] if i < d else 0
            blocks.append(ParamBlock(cin, widths[i - 1], skip, config.n_param_channels, rng))
            cin = widths[i - 1]
        self.blocks = Sequential(*blocks)
        self.head1 = Conv2d(cin, cin, 3, 1, rng)
        self.head2 = Conv2d(cin, 1, 3, 1, rng)
        self.out_act = Activation("tanh")

    def forward(self, pyramid: FeaturePyramid, cond: np.ndarray, trace: list | None = None) -> Tensor:
        d = self.config.depth
        if len(pyramid) != d:
            raise ConfigError(f"pyramid depth {len(pyramid)} does not match Param-Net depth {d}")
        cond = np.asarray(cond, dtype=np.float32)
        n = pyramid[0].shape[0]
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0]))
        if cond.shape != (n, self.config.n_param_channels):
            raise ShapeError(f"conditioning must be [{n}, {self.config.n_param_channels}], got {cond.shape}")
        x = pyramid[-1]
        for i, block in enumerate(self.blocks, start=1):
            skip = pyramid[d - i - 1] if i < d else None
            x = block(x, skip, cond, trace)
        return self.out_act(self.head2(self.head1(x)))


def pnet_build(config: ParamNetConfig, seed: int = 0) -> ParamNet:
    return ParamNet(config, seed)


def pnet_forward(model: ParamNet, pyramid: FeaturePyramid, norm_params, trace: list | None = None) -> Tensor:
    return model(pyramid, norm_params, trace)
