"""Two-phase training: autoencoder reconstruction, then Param-Net on frozen features."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .ae import Autoencoder, AutoencoderConfig
from .checkpointing import ae_to_checkpoint, check_pair, load_ae, load_into, pnet_to_checkpoint
from .errors import ConfigError, ModelKindMismatchError, NumericError
from .formats import DatasetManifest, atomic_write, load_checkpoint, read_manifest, read_slice, save_checkpoint
from .nn import functional as F
from .nn.optim import ADAM_LR, Adam
from .nn.tensor import Tensor, backward, no_grad
from .phantom import resize_bilinear
from .pnet import ParamNet, ParamNetConfig, condition_vector
from .sim import DEFAULT_PARAMS, ScanParams, derive_seed

log = logging.getLogger(__name__)

VAL_FRACTION = 0.1


def to_model_units(img):
    """[0, 1] signal -> [-1, 1] tanh range (clamped)."""
    return np.clip(2.0 * np.asarray(img, dtype=np.float32) - 1.0, -1.0, 1.0)


def from_model_units(img):
    return np.clip((np.asarray(img, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)


@dataclass
class TrainConfig:
    phase: str = "ae"
    dataset: str | None = None
    epochs: int = 10
    batch_size: int = 8
    lr: float = ADAM_LR
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    pretrain_dir: str | None = None
    pretrain_epochs: int | None = None
    mode: str = "d2p"
    depth: int = 6
    base_width: int = 8
    width_cap: int | None = None
    val_fraction: float = VAL_FRACTION
    max_steps: int | None = None
    stop_loss: float | None = None
    resume: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.phase not in ("ae", "pnet"):
            raise ConfigError(f"phase must be 'ae' or 'pnet', got {self.phase!r}")
        if self.mode not in ("d2p", "p2p"):
            raise ConfigError(f"mode must be 'd2p' or 'p2p', got {self.mode!r}")

    def ae_config(self, resolution: int) -> AutoencoderConfig:
        if resolution != 2 ** self.depth:
            raise ConfigError(f"dataset resolution {resolution} needs depth {int(math.log2(resolution))}, "
                              f"config has depth {self.depth}")
        return AutoencoderConfig(self.depth, self.base_width, self.width_cap, resolution)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def write(self, path) -> None:
        atomic_write(path, self.to_json().encode())

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["loss"] if self.steps else float("nan")


@dataclass
class PairedData:
    ids: list[int]
    x_in: np.ndarray  # [N, 1, R, R] in [0, 1]
    x_out: np.ndarray
    params_in: list[ScanParams]
    params_out: list[ScanParams]

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PairedData":
        idx = list(idx)
        return PairedData([self.ids[i] for i in idx], self.x_in[idx], self.x_out[idx],
                          [self.params_in[i] for i in idx], [self.params_out[i] for i in idx])


def load_pairs(manifest: DatasetManifest, split: str | None = "train") -> PairedData:
    rows = manifest.samples if split is None else manifest.split(split)
    rows = sorted(rows, key=lambda s: s["id"])
    cache: dict[str, np.ndarray] = {}

    def img(rel):
        if rel not in cache:
            cache[rel] = read_slice(manifest.resolve(rel))[0]
        return cache[rel]

    r = manifest.R
    x_in = np.empty((len(rows), 1, r, r), dtype=np.float32)
    x_out = np.empty_like(x_in)
    for i, s in enumerate(rows):
        x_in[i, 0] = img(s["file_in"])
        x_out[i, 0] = img(s["file_out"])
    return PairedData(
        [s["id"] for s in rows], x_in, x_out,
        [ScanParams(s["te_in"], s["tr_in"]) for s in rows],
        [ScanParams(s["te_out"], s["tr_out"]) for s in rows],
    )


def load_image_folder(folder, resolution: int) -> np.ndarray:
    """Grayscale images from a folder, resized to ``resolution``, in [0, 1]."""
    from PIL import Image

    paths = sorted(p for p in Path(folder).iterdir() if p.is_file())
    out = []
    for p in paths:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        except OSError:
            log.warning("skipping unreadable image %s", p)
            continue
        out.append(resize_bilinear(arr, resolution))
    if not out:
        raise ConfigError(f"no readable images in pretrain folder {folder}")
    return np.stack(out)[:, None]


def _split_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * fraction)) if n > 1 else 0
    perm = np.random.default_rng(derive_seed(seed, 7)).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # a single-sample tail would leave batchnorm's 1x1 bottleneck without variance
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


class _Loop:
    """Shared epoch/step driver with checkpointing and resumption."""

    def __init__(self, cfg: TrainConfig, model, params, n_train: int, stage: str,
                 save: Callable[[int], None] | None):
        self.cfg = cfg
        self.model = model
        self.opt = Adam(params, lr=cfg.lr)
        self.n = n_train
        self.stage = stage
        self.save = save
        self.log = TrainLog()
        self.step = 0

    def run(self, epochs: int, loss_fn: Callable[[np.ndarray], Tensor],
            val_fn: Callable[[], float] | None = None, start_step: int = 0) -> TrainLog:
        cfg = self.cfg
        self.step = start_step
        per_epoch = len(_batches(self.n, cfg.batch_size, np.random.default_rng(0)))
        first_epoch = start_step // per_epoch
        for epoch in range(first_epoch, epochs):
            rng = np.random.default_rng(derive_seed(cfg.seed, 11, epoch) if cfg.deterministic else None)
            t0 = time.perf_counter()
            losses = []
            for bi, idx in enumerate(_batches(self.n, cfg.batch_size, rng)):
                if epoch * per_epoch + bi < start_step:
                    continue
                self.model.train()
                self.opt.zero_grad()
                loss = loss_fn(idx)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at step {self.step} ({self.stage})")
                backward(loss)
                self.opt.step()
                self.step += 1
                losses.append(value)
                self.log.steps.append({"step": self.step, "loss": value})
                if cfg.checkpoint_every and self.save and self.step % cfg.checkpoint_every == 0:
                    self.save(self.step)
                if self._done(value):
                    break
            entry = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                     "seconds": time.perf_counter() - t0}
            if val_fn is not None:
                entry["val_loss"] = val_fn()
            self.log.epochs.append(entry)
            log.info("%s epoch %d: loss %.6f (%.1fs)", self.stage, epoch + 1, entry["mean_loss"], entry["seconds"])
            if losses and self._done(losses[-1]):
                break
        return self.log

    def _done(self, last_loss: float) -> bool:
        cfg = self.cfg
        if cfg.max_steps is not None and self.step >= cfg.max_steps:
            return True
        return cfg.stop_loss is not None and last_loss < cfg.stop_loss


def _ckpt_saver(cfg: TrainConfig, make_ckpt):
    if not cfg.checkpoint_every or not cfg.checkpoint_dir:
        return None

    def save(step: int) -> None:
        save_checkpoint(Path(cfg.checkpoint_dir) / f"step_{step:07d}.ckpt", make_ckpt(step))

    return save


def _eval_mse(model_fn, x: np.ndarray, target: np.ndarray, batch: int = 16) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(x), batch):
            pred = model_fn(i, i + batch)
            total += float(np.sum((pred.data.astype(np.float64) - target[i : i + batch]) ** 2))
    return total / target.size


def train_autoencoder(cfg: TrainConfig, images: np.ndarray | None = None,
                      out_path=None) -> tuple[Autoencoder, TrainLog]:
    """Phase 1. ``images`` ([N,1,R,R] in [0,1]) overrides loading the dataset's train split."""
    if images is None:
        if cfg.dataset is None:
            raise ConfigError("train_autoencoder needs a dataset manifest or an image array")
        manifest = read_manifest(cfg.dataset)
        pairs = load_pairs(manifest, "train")
        images = _unique_images(pairs)
    if len(images) == 0:
        raise ConfigError("autoencoder training set is empty")
    images = to_model_units(images)
    res = images.shape[-1]
    ae_cfg = cfg.ae_config(res)
    model = Autoencoder(ae_cfg, seed=cfg.seed)
    start = 0
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume, expect_kind="ae")
        load_into(model, ckpt)
        start = int(ckpt.metadata.get("step", 0))

    def make_ckpt(step):
        return ae_to_checkpoint(model, seed=cfg.seed, step=step, train=_cfg_meta(cfg))

    full_log = TrainLog()
    if cfg.pretrain_dir and not cfg.resume:
        pre = to_model_units(load_image_folder(cfg.pretrain_dir, res))
        loop = _Loop(cfg, model, model.parameters(), len(pre), "ae-pretrain", None)
        x_pre = pre

        def pre_loss(idx):
            xb = Tensor(x_pre[idx])
            return F.mse(model(xb), xb)

        plog = loop.run(cfg.pretrain_epochs or cfg.epochs, pre_loss)
        full_log.steps += plog.steps
        full_log.epochs += plog.epochs
        for p in model.parameters():
            p.adam_m[...] = 0
            p.adam_v[...] = 0
            p.step_count = 0

    train_idx, val_idx = _split_val(len(images), cfg.val_fraction, cfg.seed)
    x_train, x_val = images[train_idx], images[val_idx]
    loop = _Loop(cfg, model, model.parameters(), len(x_train), "ae", _ckpt_saver(cfg, make_ckpt))

    def loss_fn(idx):
        xb = Tensor(x_train[idx])
        return F.mse(model(xb), xb)

    def val_fn():
        model.eval()
        return _eval_mse(lambda a, b: model(Tensor(x_val[a:b])), x_val, x_val)

    tlog = loop.run(cfg.epochs, loss_fn, val_fn if len(x_val) else None, start_step=start)
    full_log.steps += tlog.steps
    full_log.epochs += tlog.epochs
    model.eval()
    if out_path is not None:
        save_checkpoint(out_path, make_ckpt(loop.step))
    return model, full_log


def encode_all(ae: Autoencoder, x: np.ndarray, batch: int = 32) -> list[np.ndarray]:
    """Feature pyramid of ``x`` (model units) from an eval-mode encoder, level by level."""
    chunks = []
    with no_grad():
        for i in range(0, len(x), batch):
            chunks.append([t.data for t in ae.encode(Tensor(x[i : i + batch]))])
    return [np.concatenate([c[k] for c in chunks]) for k in range(ae.config.depth)]


def _unique_images(pairs: PairedData) -> np.ndarray:
    seen = {}
    for arr in (pairs.x_in, pairs.x_out):
        for img in arr:
            seen.setdefault(img.tobytes(), img)
    return np.stack(list(seen.values())) if seen else np.empty((0, 1, 1, 1), np.float32)


def _cfg_meta(cfg: TrainConfig) -> dict:
    return {k: v for k, v in asdict(cfg).items() if k not in ("resume", "checkpoint_dir")}


def conditioning(mode: str, pairs: PairedData) -> np.ndarray:
    return np.stack([condition_vector(mode, po, pi) for pi, po in zip(pairs.params_in, pairs.params_out)])


def check_dataset_mode(mode: str, manifest_mode: str, pairs: PairedData | None = None) -> None:
    if manifest_mode != mode:
        raise ModelKindMismatchError(f"dataset was built for {manifest_mode}, cannot train/evaluate a {mode} model on it")
    if mode == "d2p" and pairs is not None:
        if any(p != DEFAULT_PARAMS for p in pairs.params_in):
            raise ModelKindMismatchError("d2p data must use the default input parameters in every sample")


def train_paramnet(cfg: TrainConfig, ae_checkpoint, pairs: PairedData | None = None,
                   out_path=None) -> tuple[ParamNet, TrainLog]:
    """Phase 2: Param-Net against simulated targets with the autoencoder frozen."""
    if ae_checkpoint is None:
        raise ConfigError("Param-Net training needs a trained autoencoder checkpoint")
    ae = ae_checkpoint if isinstance(ae_checkpoint, Autoencoder) else load_ae(ae_checkpoint)
    ae.eval().freeze()
    if pairs is None:
        if cfg.dataset is None:
            raise ConfigError("train_paramnet needs a dataset manifest or paired data")
        manifest = read_manifest(cfg.dataset)
        check_dataset_mode(cfg.mode, manifest.mode)
        pairs = load_pairs(manifest, "train")
    check_dataset_mode(cfg.mode, cfg.mode, pairs)
    if len(pairs) == 0:
        raise ConfigError("Param-Net training set is empty")
    res = pairs.x_in.shape[-1]
    if res != ae.config.resolution:
        raise ConfigError(f"data resolution {res} does not match autoencoder resolution {ae.config.resolution}")

    model = ParamNet(ParamNetConfig.matching(ae.config, cfg.mode), seed=cfg.seed)
    check_pair(ae, model)
    start = 0
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume, expect_kind=cfg.mode)
        load_into(model, ckpt)
        start = int(ckpt.metadata.get("step", 0))

    x_in = to_model_units(pairs.x_in)
    y = to_model_units(pairs.x_out)
    cond = conditioning(cfg.mode, pairs)
    train_idx, val_idx = _split_val(len(pairs), cfg.val_fraction, cfg.seed)

    def make_ckpt(step):
        return pnet_to_checkpoint(model, seed=cfg.seed, step=step, ae_config=ae.config.to_dict(),
                                  train=_cfg_meta(cfg))

    # the frozen encoder runs in eval mode, so features are per-sample and can be computed once
    levels = encode_all(ae, x_in)

    def predict(idx):
        return model([Tensor(lvl[idx]) for lvl in levels], cond[idx])

    def loss_fn(bidx):
        idx = train_idx[bidx]
        return F.mse(predict(idx), y[idx])

    def val_fn():
        with no_grad():
            return _eval_mse(lambda a, b: predict(val_idx[a:b]), y[val_idx], y[val_idx])

    loop = _Loop(cfg, model, model.parameters(), len(train_idx), f"pnet-{cfg.mode}", _ckpt_saver(cfg, make_ckpt))
    tlog = loop.run(cfg.epochs, loss_fn, val_fn if len(val_idx) else None, start_step=start)
    if out_path is not None:
        save_checkpoint(out_path, make_ckpt(loop.step))
    return model, tlog
