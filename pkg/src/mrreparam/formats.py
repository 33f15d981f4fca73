"""On-disk formats: slice files, dataset manifests, checkpoints, image export.

All multi-byte integers and floats are little-endian.  Writers go through a
temporary file and ``os.replace`` so an interrupted run never leaves a
half-written file under the final name.
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ModelKindMismatchError

SLICE_MAGIC = b"MRS1"
SLICE_HEADER = struct.Struct("<4sIIdd")
CKPT_MAGIC = b"MRPT"
CKPT_VERSION = 1
MANIFEST_VERSION = 1


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- slice files ---------------------------------------------------------------

def encode_slice(image: np.ndarray, te_s: float, tr_s: float) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"slice image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    header = SLICE_HEADER.pack(SLICE_MAGIC, w, h, float(te_s), float(tr_s))
    return header + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_slice(buf: bytes) -> tuple[np.ndarray, float, float]:
    if len(buf) < SLICE_HEADER.size:
        raise CorruptionError("slice header truncated", offset=len(buf))
    magic, w, h, te, tr = SLICE_HEADER.unpack_from(buf)
    if magic != SLICE_MAGIC:
        raise FormatError(f"bad slice magic {magic!r}")
    expected = SLICE_HEADER.size + 4 * w * h
    if len(buf) < expected:
        raise CorruptionError(f"slice payload truncated: need {expected} bytes", offset=len(buf))
    if len(buf) > expected:
        raise CorruptionError("trailing bytes after slice payload", offset=expected)
    img = np.frombuffer(buf, dtype="<f4", count=w * h, offset=SLICE_HEADER.size).reshape(h, w)
    return img.astype(np.float32), te, tr


def write_slice(path, image: np.ndarray, te_s: float, tr_s: float) -> None:
    atomic_write(path, encode_slice(image, te_s, tr_s))


def read_slice(path) -> tuple[np.ndarray, float, float]:
    return decode_slice(Path(path).read_bytes())


# -- manifests ---------------------------------------------------------------

SAMPLE_KEYS = ("id", "phantom_id", "slice_index", "te_in", "tr_in", "te_out", "tr_out", "file_in", "file_out", "split")


@dataclass
class DatasetManifest:
    mode: str
    R: int
    seed: int
    default_params: dict
    samples: list[dict]
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "mode": self.mode,
            "R": self.R,
            "seed": self.seed,
            "default_params": self.default_params,
            **self.extra,
            "samples": self.samples,
        }
        return json.dumps(doc, indent=1) + "\n"

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def validate(self) -> None:
        ids = [s["id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest sample ids are not unique")
        for s in self.samples:
            missing = [k for k in SAMPLE_KEYS if k not in s]
            if missing:
                raise FormatError(f"manifest sample {s.get('id')} lacks {missing}")
            if s["split"] not in ("train", "test"):
                raise FormatError(f"sample {s['id']} has split {s['split']!r}")
            if self.mode == "d2p" and (s["te_in"] != self.default_params["te_s"]
                                       or s["tr_in"] != self.default_params["tr_s"]):
                raise FormatError(f"d2p sample {s['id']} does not use the default input parameters")
            for key in ("file_in", "file_out"):
                if not self.resolve(s[key]).is_file():
                    raise FormatError(f"sample {s['id']} points at missing file {s[key]}")


def write_manifest(path, manifest: DatasetManifest) -> None:
    atomic_write(path, manifest.to_json().encode())


def read_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    known = {"version", "mode", "R", "seed", "default_params", "samples"}
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('version')!r}")
    if not known.issubset(doc):
        raise FormatError(f"manifest lacks fields {sorted(known - set(doc))}")
    m = DatasetManifest(
        mode=doc["mode"], R=doc["R"], seed=doc["seed"], default_params=doc["default_params"],
        samples=doc["samples"], version=doc["version"],
        extra={k: v for k, v in doc.items() if k not in known}, root=path.parent,
    )
    if validate:
        m.validate()
    return m


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]

    @property
    def kind(self) -> str | None:
        return self.metadata.get("kind")


def _tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim > 255 or len(raw) > 0xFFFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = _tensor_table(ckpt.tensors)
    meta = dict(ckpt.metadata)
    meta["crc32"] = zlib.crc32(table)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob + table


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"checkpoint truncated while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(buf: bytes, verify: bool = True) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version, blob_len = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(blob_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"checkpoint metadata unreadable: {exc}", offset=12) from exc
    table_start = r.pos
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptionError("trailing bytes after tensor table", offset=r.pos)
    stored = meta.pop("crc32", None)
    if verify and stored is not None and zlib.crc32(buf[table_start:]) != stored:
        raise CorruptionError("checkpoint checksum mismatch", offset=table_start)
    return Checkpoint(meta, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expect_kind: str | None = None, verify: bool = True) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes(), verify=verify)
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise ModelKindMismatchError(f"checkpoint {path} holds a {ckpt.kind!r} model, expected {expect_kind!r}")
    return ckpt


# -- image export ------------------------------------------------------------------

def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise FormatError(f"PGM export needs a 2-D image, got {image.shape}")
    h, w = image.shape
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise FormatError("not a binary P5 PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = buf[m.end():]
    if maxval != 255 or len(data) < w * h:
        raise FormatError("unsupported or truncated PGM")
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)


def export_image(image: np.ndarray, path, fmt: str = "pgm") -> None:
    """Write a [0,1] image as 8-bit PGM or as a parameter-less slice file."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"export needs a 2-D image, got {image.shape}")
    if fmt == "pgm":
        atomic_write(path, encode_pgm(image))
    elif fmt == "raw":
        atomic_write(path, encode_slice(image, 0.0, 0.0))
    else:
        raise ValueError(f"unknown image format {fmt!r}")
