"""Spin-echo signal simulation and dataset construction.

Images follow the single-pool spin-echo law

    S = PD * (1 - exp(-TR / T1)) * exp(-TE / T2)

evaluated voxelwise at the phantom's native grid, then bilinearly resized to
R x R.  Stored pixels are physical signal in [0, 1].
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParamRangeError, ShapeError
from .formats import DatasetManifest, encode_slice, write_manifest, atomic_write
from .phantom import PhantomVolume, axial_slice_indices, resize_bilinear

log = logging.getLogger(__name__)

TE_MIN, TE_MAX = 0.02, 1.0
TR_MIN, TR_MAX = 1.2, 10.0
CANONICAL_SPLIT = (1500, 3300)


@dataclass(frozen=True)
class ScanParams:
    te_s: float
    tr_s: float

    def in_range(self) -> bool:
        return TE_MIN <= self.te_s <= TE_MAX and TR_MIN <= self.tr_s <= TR_MAX

    def check_range(self) -> "ScanParams":
        if not self.in_range():
            raise ParamRangeError(
                f"TE={self.te_s} s / TR={self.tr_s} s outside [{TE_MIN}, {TE_MAX}] x [{TR_MIN}, {TR_MAX}]")
        return self


DEFAULT_PARAMS = ScanParams(te_s=0.05, tr_s=4.5)


def spin_echo_signal(pd, t1_s, t2_s, te_s, tr_s):
    """Signal for scalars or broadcastable arrays; background (T1 or T2 == 0) gives 0."""
    pd, t1, t2 = (np.asarray(v, dtype=np.float64) for v in (pd, t1_s, t2_s))
    te, tr = float(te_s), float(tr_s)
    if te <= 0 or tr <= 0:
        raise ParamRangeError(f"TE and TR must be positive, got TE={te}, TR={tr}")
    if np.any(pd < 0) or np.any(t1 < 0) or np.any(t2 < 0):
        raise ParamRangeError("PD, T1 and T2 must be non-negative")
    tissue = (t1 > 0) & (t2 > 0)
    safe_t1 = np.where(tissue, t1, 1.0)
    safe_t2 = np.where(tissue, t2, 1.0)
    s = pd * -np.expm1(-tr / safe_t1) * np.exp(-te / safe_t2)
    out = np.where(tissue, s, 0.0)
    return float(out) if out.ndim == 0 else out


def simulate_image(slice_maps, params: ScanParams, noise_sigma: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Noise-free (by default) signal image for one slice's (t1, t2, pd) maps."""
    t1, t2, pd = slice_maps
    if not (np.shape(t1) == np.shape(t2) == np.shape(pd)) or np.ndim(t1) != 2:
        raise ShapeError(f"slice maps must be co-registered 2-D arrays, got {np.shape(t1)}, "
                         f"{np.shape(t2)}, {np.shape(pd)}")
    img = spin_echo_signal(pd, t1, t2, params.te_s, params.tr_s)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        img = np.clip(img + rng.normal(0.0, noise_sigma, img.shape), 0.0, 1.0)
    return img.astype(np.float32)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def sample_param_pairs(seed: int, n: int = 200) -> list[ScanParams]:
    """TR uniform on [1.2, 10] s; TE log-uniform on [0.02, 1] s so short echoes dominate."""
    if n < 1:
        raise ValueError(f"need at least one parameter pair, got n={n}")
    rng = np.random.default_rng(seed)
    te = np.exp(rng.uniform(math.log(TE_MIN), math.log(TE_MAX), n))
    tr = rng.uniform(TR_MIN, TR_MAX, n)
    te = np.clip(te, TE_MIN, TE_MAX)
    return [ScanParams(float(a), float(b)) for a, b in zip(te, tr)]


def split_sizes(total: int, ratio=CANONICAL_SPLIT) -> tuple[int, int]:
    n_train = int(round(total * ratio[0] / sum(ratio)))
    return n_train, total - n_train


# -- dataset building ------------------------------------------------------------

def _render(task) -> tuple[str, bytes]:
    rel, maps, te, tr, R, noise_sigma, noise_seed = task
    rng = np.random.default_rng(noise_seed) if noise_sigma > 0 else None
    img = simulate_image(maps, ScanParams(te, tr), noise_sigma, rng)
    img = np.clip(resize_bilinear(img, R), 0.0, 1.0).astype(np.float32)
    return rel, encode_slice(img, te, tr)


def build_dataset(phantoms: list[PhantomVolume], mode: str, n_pairs: int, slices_per_pair: int, R: int,
                  seed: int, out_dir, n_train: int | None = None, workers: int = 1,
                  noise_sigma: float = 0.0, manifest_name: str = "manifest.json") -> DatasetManifest:
    """Simulate a paired dataset and write slice files plus ``manifest.json``.

    Pair ``k`` uses phantom ``k % len(phantoms)`` and ``slices_per_pair``
    axial slices of it.  Pairs are assigned to the train split in a seeded
    random order until ``n_train`` samples are filled (default: the
    1500:3300 ratio), so at most one pair straddles the two splits.
    """
    mode = mode.lower()
    if mode not in ("d2p", "p2p"):
        raise ConfigError(f"mode must be d2p or p2p, got {mode!r}")
    if not phantoms:
        raise ConfigError("build_dataset needs at least one phantom")
    if n_pairs < 1 or slices_per_pair < 1 or R < 2:
        raise ConfigError("n_pairs, slices_per_pair must be >= 1 and R >= 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    total = n_pairs * slices_per_pair
    if n_train is None:
        n_train, _ = split_sizes(total)
    if not 0 <= n_train <= total:
        raise ConfigError(f"n_train={n_train} outside [0, {total}]")

    params_out = sample_param_pairs(derive_seed(seed, 1), n_pairs)
    params_in = (sample_param_pairs(derive_seed(seed, 2), n_pairs) if mode == "p2p"
                 else [DEFAULT_PARAMS] * n_pairs)
    pair_order = np.random.default_rng(derive_seed(seed, 3)).permutation(n_pairs)
    split_of_sample: dict[int, str] = {}
    filled = 0
    for k in pair_order:
        for j in range(slices_per_pair):
            split_of_sample[int(k) * slices_per_pair + j] = "train" if filled < n_train else "test"
            filled += 1

    slices = [axial_slice_indices(v.shape[0], slices_per_pair) for v in phantoms]
    tasks: dict[str, tuple] = {}
    samples = []
    for k in range(n_pairs):
        pid = k % len(phantoms)
        vol = phantoms[pid]
        p_in, p_out = params_in[k], params_out[k]
        for j, z in enumerate(slices[pid]):
            sid = k * slices_per_pair + j
            maps = (vol.t1[z], vol.t2[z], vol.pd[z])
            if mode == "d2p" and noise_sigma == 0:
                f_in = f"slices/p{pid:03d}_z{z:03d}_default.mrs"
            else:
                f_in = f"slices/{sid:05d}_in.mrs"
            f_out = f"slices/{sid:05d}_out.mrs"
            if f_in not in tasks:
                tasks[f_in] = (f_in, maps, p_in.te_s, p_in.tr_s, R, noise_sigma, derive_seed(seed, pid, z, sid, 0))
            tasks[f_out] = (f_out, maps, p_out.te_s, p_out.tr_s, R, noise_sigma, derive_seed(seed, pid, z, sid, 1))
            samples.append({
                "id": sid, "phantom_id": pid, "slice_index": z,
                "te_in": p_in.te_s, "tr_in": p_in.tr_s, "te_out": p_out.te_s, "tr_out": p_out.tr_s,
                "file_in": f_in, "file_out": f_out, "split": split_of_sample[sid],
            })

    jobs = list(tasks.values())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_render, jobs, chunksize=max(1, len(jobs) // (4 * workers)))
            for rel, payload in results:
                atomic_write(out_dir / rel, payload)
    else:
        for job in jobs:
            rel, payload = _render(job)
            atomic_write(out_dir / rel, payload)
    log.info("wrote %d slice files for %d samples to %s", len(jobs), len(samples), out_dir)

    manifest = DatasetManifest(
        mode=mode, R=R, seed=seed,
        default_params={"te_s": DEFAULT_PARAMS.te_s, "tr_s": DEFAULT_PARAMS.tr_s},
        samples=samples,
        extra={
            "n_pairs": n_pairs,
            "slices_per_pair": slices_per_pair,
            "phantoms": [{"id": i, "seed": v.seed, "family": v.family} for i, v in enumerate(phantoms)],
            "noise_sigma": noise_sigma,
            "split_policy": "by-parameter-pair, seeded order; at most one pair straddles",
            "n_train": n_train,
            "n_test": total - n_train,
        },
        root=out_dir,
    )
    write_manifest(out_dir / manifest_name, manifest)
    return manifest
