"""Procedural nested-ellipsoid head phantoms (T1, T2, PD volumes).

Volumes are indexed (axial, row, col).  Tissues are painted in order, later
ellipsoids overwriting earlier ones, with no partial-volume blending, so
every voxel carries exactly one palette entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError

T1_MAX_S = 4.5
T2_MAX_S = 2.2
DEFAULT_SHAPE = (108, 90, 90)
SHIFT_FACTOR = 1.15


@dataclass(frozen=True)
class TissueClass:
    label: str
    t1_s: float
    t2_s: float
    pd: float

    @property
    def is_background(self) -> bool:
        return self.t1_s == 0 and self.t2_s == 0 and self.pd == 0


def default_palette() -> list[TissueClass]:
    return [
        TissueClass("background", 0.0, 0.0, 0.0),
        TissueClass("csf", 4.2, 2.0, 1.0),
        TissueClass("gray_matter", 0.92, 0.10, 0.85),
        TissueClass("white_matter", 0.78, 0.09, 0.75),
        TissueClass("fat", 0.26, 0.08, 0.90),
        TissueClass("lesion", 1.2, 0.30, 0.95),
    ]


def shifted_palette(factor: float = SHIFT_FACTOR) -> list[TissueClass]:
    """Held-out tissue family: relaxation times scaled, clamped to the valid ranges."""
    out = []
    for t in default_palette():
        if t.is_background:
            out.append(t)
            continue
        out.append(replace(t, t1_s=min(t.t1_s * factor, T1_MAX_S), t2_s=min(t.t2_s * factor, T2_MAX_S)))
    return out


def palette_for(family: str) -> list[TissueClass]:
    if family == "default":
        return default_palette()
    if family == "shifted":
        return shifted_palette()
    raise ValueError(f"unknown phantom family {family!r}")


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    angle: float  # rotation in the axial plane, radians
    tissue: str

    def mask(self, shape: tuple[int, int, int]) -> np.ndarray:
        if min(self.semi_axes) <= 0:
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes}")
        z, y, x = np.ogrid[: shape[0], : shape[1], : shape[2]]
        cz, cy, cx = self.center
        az, ay, ax = self.semi_axes
        dy, dx = y - cy, x - cx
        c, s = np.cos(self.angle), np.sin(self.angle)
        ry = c * dy + s * dx
        rx = -s * dy + c * dx
        return ((z - cz) / az) ** 2 + (ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0


@dataclass
class PhantomVolume:
    t1: np.ndarray
    t2: np.ndarray
    pd: np.ndarray
    labels: np.ndarray = field(repr=False)
    palette: list[TissueClass] = field(repr=False)
    seed: int = 0
    family: str = "default"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t1.shape


def phantom_layout(seed: int, shape=DEFAULT_SHAPE) -> list[EllipsoidSpec]:
    """Painter's-order ellipsoid list for one subject, jittered by ``seed``."""
    rng = np.random.default_rng(seed)
    d, h, w = shape
    center = (
        (d - 1) / 2 + rng.uniform(-0.03, 0.03) * d,
        (h - 1) / 2 + rng.uniform(-0.03, 0.03) * h,
        (w - 1) / 2 + rng.uniform(-0.03, 0.03) * w,
    )
    head = (0.42 * d * rng.uniform(0.92, 1.0), 0.44 * h * rng.uniform(0.9, 1.0), 0.36 * w * rng.uniform(0.9, 1.0))
    angle = rng.uniform(-0.25, 0.25)

    def scaled(f: float) -> tuple[float, float, float]:
        return tuple(a * f for a in head)

    specs = [
        EllipsoidSpec(center, head, angle, "fat"),
        EllipsoidSpec(center, scaled(0.9), angle, "csf"),
        EllipsoidSpec(center, scaled(rng.uniform(0.84, 0.87)), angle, "gray_matter"),
        EllipsoidSpec(center, scaled(rng.uniform(0.66, 0.72)), angle, "white_matter"),
    ]
    # ventricles: a mirrored pair of CSF ellipsoids inside the white matter
    off = head[2] * rng.uniform(0.12, 0.2)
    vent = (head[0] * rng.uniform(0.25, 0.35), head[1] * rng.uniform(0.25, 0.35), head[2] * rng.uniform(0.06, 0.1))
    for sign in (-1, 1):
        c = (center[0], center[1], center[2] + sign * off)
        specs.append(EllipsoidSpec(c, vent, angle + sign * 0.15, "csf"))
    # deep gray nuclei
    for sign in (-1, 1):
        c = (center[0] - 0.05 * d, center[1] + 0.12 * h, center[2] + sign * head[2] * 0.38)
        r = head[2] * rng.uniform(0.1, 0.14)
        specs.append(EllipsoidSpec(c, (r * 1.4, r * 1.2, r), angle, "gray_matter"))
    for _ in range(int(rng.integers(0, 4))):
        r = rng.uniform(0.04, 0.09) * min(h, w)
        pos = [center[i] + rng.uniform(-0.45, 0.45) * head[i] for i in range(3)]
        axes = (r * rng.uniform(0.8, 1.6), r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3))
        specs.append(EllipsoidSpec(tuple(pos), axes, rng.uniform(0, np.pi), "lesion"))
    return specs


def generate_phantom(seed: int, shape=DEFAULT_SHAPE, family: str = "default") -> PhantomVolume:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ShapeError(f"phantom shape must be 3 dims each >= 16, got {shape}")
    palette = palette_for(family)
    index = {t.label: i for i, t in enumerate(palette)}
    labels = np.zeros(shape, dtype=np.uint8)
    for spec in phantom_layout(seed, shape):
        labels[spec.mask(shape)] = index[spec.tissue]
    t1 = np.array([t.t1_s for t in palette], dtype=np.float32)[labels]
    t2 = np.array([t.t2_s for t in palette], dtype=np.float32)[labels]
    pd = np.array([t.pd for t in palette], dtype=np.float32)[labels]
    return PhantomVolume(t1, t2, pd, labels, palette, seed, family)


def axial_slice_indices(depth: int, count: int = 24) -> list[int]:
    """``count`` distinct indices evenly spread over the central 60% of the axis."""
    if count < 1 or count > depth:
        raise ShapeError(f"cannot take {count} slices from an axis of length {depth}")
    lo, hi = 0.2 * (depth - 1), 0.8 * (depth - 1)
    pos = lo + (hi - lo) * (np.arange(count) + 0.5) / count
    idx = np.round(pos).astype(int)
    if len(np.unique(idx)) < count:
        # band too narrow for this many slices; spread over the whole axis
        idx = np.round((depth - 1) * (np.arange(count) + 0.5) / count).astype(int)
        if len(np.unique(idx)) < count:
            idx = np.arange(count) + (depth - count) // 2
    return [int(i) for i in idx]


def extract_axial_slices(vol: PhantomVolume, count: int = 24) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    return [(vol.t1[i], vol.t2[i], vol.pd[i]) for i in axial_slice_indices(vol.shape[0], count)]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D map to ``size`` x ``size``."""
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < 2 or size < 2:
        raise ShapeError(f"resize needs a 2-D map with dims >= 2 and size >= 2, got {img.shape} -> {size}")
    src = img.astype(np.float64)

    def axis_weights(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = np.linspace(0.0, n_in - 1, size)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
        frac = pos - i0
        return i0, i0 + 1, frac

    r0, r1, fr = axis_weights(src.shape[0])
    c0, c1, fc = axis_weights(src.shape[1])
    rows = src[r0] * (1 - fr)[:, None] + src[r1] * fr[:, None]
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    # interpolation weights sum to 1; clip away last-ulp excursions
    out = np.clip(out, src.min(), src.max())
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)
