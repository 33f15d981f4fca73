"""Convert models (weights, buffers, Adam state) to and from checkpoints."""
from __future__ import annotations

import numpy as np

from .ae import Autoencoder, AutoencoderConfig
from .errors import ConfigError, FormatError, ModelKindMismatchError
from .formats import Checkpoint, load_checkpoint
from .nn.layers import Module
from .pnet import ParamNet, ParamNetConfig


def model_to_checkpoint(model: Module, kind: str, config: dict, **meta) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    steps = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        tensors[f"buffer/{name}"] = b
    for name, p in model.named_parameters():
        tensors[f"adam_m/{name}"] = p.adam_m
        tensors[f"adam_v/{name}"] = p.adam_v
        steps[name] = p.step_count
    metadata = {"kind": kind, "config": config, "adam_steps": steps, **meta}
    return Checkpoint(metadata, tensors)


def load_into(model: Module, ckpt: Checkpoint) -> Module:
    t = ckpt.tensors
    steps = ckpt.metadata.get("adam_steps", {})
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in t:
            raise FormatError(f"checkpoint lacks tensor {key}")
        if t[key].shape != p.shape:
            raise FormatError(f"{key} has shape {t[key].shape}, model expects {p.shape}")
        p.data = t[key].astype(np.float32, copy=True)
        p.adam_m = t.get(f"adam_m/{name}", np.zeros_like(p.data)).astype(np.float32, copy=True)
        p.adam_v = t.get(f"adam_v/{name}", np.zeros_like(p.data)).astype(np.float32, copy=True)
        p.step_count = int(steps.get(name, 0))
        p.zero_grad()
    for name, _ in model.named_buffers():
        key = f"buffer/{name}"
        if key not in t:
            raise FormatError(f"checkpoint lacks tensor {key}")
        owner, attr = _owner(model, name)
        arr = t[key].astype(np.float32, copy=True)
        owner._buffers[attr] = arr
        object.__setattr__(owner, attr, arr)
    return model


def _owner(model: Module, dotted: str) -> tuple[Module, str]:
    parts = dotted.split(".")
    m = model
    for p in parts[:-1]:
        m = m._modules[p]
    return m, parts[-1]


def ae_to_checkpoint(model: Autoencoder, **meta) -> Checkpoint:
    return model_to_checkpoint(model, "ae", model.config.to_dict(), **meta)


def ae_from_checkpoint(ckpt: Checkpoint) -> Autoencoder:
    if ckpt.kind != "ae":
        raise ModelKindMismatchError(f"expected an autoencoder checkpoint, got kind {ckpt.kind!r}")
    cfg = AutoencoderConfig(**ckpt.metadata["config"])
    return load_into(Autoencoder(cfg, seed=0), ckpt)


def pnet_to_checkpoint(model: ParamNet, **meta) -> Checkpoint:
    return model_to_checkpoint(model, model.config.mode, model.config.to_dict(), **meta)


def pnet_from_checkpoint(ckpt: Checkpoint, expect_mode: str | None = None) -> ParamNet:
    if ckpt.kind not in ("d2p", "p2p"):
        raise ModelKindMismatchError(f"expected a Param-Net checkpoint, got kind {ckpt.kind!r}")
    if expect_mode is not None and ckpt.kind != expect_mode:
        raise ModelKindMismatchError(f"checkpoint holds a {ckpt.kind} Param-Net, expected {expect_mode}")
    cfg = ParamNetConfig(**ckpt.metadata["config"])
    return load_into(ParamNet(cfg, seed=0), ckpt)


def load_ae(path) -> Autoencoder:
    return ae_from_checkpoint(load_checkpoint(path))


def load_pnet(path, expect_mode: str | None = None) -> ParamNet:
    return pnet_from_checkpoint(load_checkpoint(path), expect_mode)


def check_pair(ae: Autoencoder, pn: ParamNet) -> None:
    a, p = ae.config, pn.config
    if (a.depth, a.base_width, a.width_cap) != (p.depth, p.base_width, p.width_cap):
        raise ConfigError(f"Param-Net config {p} does not pair with autoencoder config {a}")
