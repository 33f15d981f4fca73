"""PSNR / MAE metrics, test-set reports and difference maps.

Metrics are computed on display units ([0, 255], no quantization) in
float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError
from .formats import DatasetManifest, atomic_write
from .nn.tensor import Tensor, no_grad

PSNR_CAP_DB = 99.0
DISPLAY_MAX = 255.0


def to_display_units(img) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * DISPLAY_MAX


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = DISPLAY_MAX) -> float:
    a, b = _pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(max_val * max_val / err), PSNR_CAP_DB)


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def diff_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return np.abs(a - b)


@dataclass
class EvalReport:
    model_kind: str
    testset_id: str
    mean_psnr: float
    std_psnr: float
    mean_mae: float
    std_mae: float
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def from_rows(cls, model_kind: str, testset_id: str, rows: list[dict]) -> "EvalReport":
        rows = sorted(rows, key=lambda r: r["sample_id"])
        p = np.array([r["psnr"] for r in rows], dtype=np.float64)
        m = np.array([r["mae"] for r in rows], dtype=np.float64)
        return cls(model_kind, testset_id, float(p.mean()), float(p.std()), float(m.mean()), float(m.std()), rows)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def write_json(self, path) -> None:
        atomic_write(path, self.to_json().encode())

    def table(self) -> str:
        head = ("Model Type", "Mean PSNR", "Std. Dev. of PSNR", "Mean Absolute Difference",
                "Std. Dev. of Absolute Difference")
        name = {"d2p": "Default-to-Param", "p2p": "Param-to-Param"}.get(self.model_kind, self.model_kind)
        vals = (name, f"{self.mean_psnr:.2f}", f"{self.std_psnr:.2f}", f"{self.mean_mae:.2f}", f"{self.std_mae:.2f}")
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
        return "\n".join([f"testset: {self.testset_id} ({len(self.rows)} samples)", line(head),
                          "-+-".join("-" * w for w in widths), line(vals)])


Predictor = Callable[[np.ndarray, np.ndarray, list, list], np.ndarray]


def model_predictor(ae, pnet) -> Predictor:
    """Build ``predict(x_in, ids, params_in, params_out) -> [N,1,R,R] in [0,1]``."""
    from .pnet import condition_vector
    from .train import from_model_units, to_model_units

    ae.eval()
    pnet.eval()
    mode = pnet.config.mode

    def predict(x_in, ids, params_in, params_out):
        cond = np.stack([condition_vector(mode, po, pi, lenient=True) for pi, po in zip(params_in, params_out)])
        with no_grad():
            pyramid = ae.encode(Tensor(to_model_units(x_in)))
            out = pnet(pyramid, cond)
        return from_model_units(out.data)

    return predict


def evaluate_pairs(predict: Predictor, pairs, model_kind: str, testset_id: str = "test",
                   batch_size: int = 1) -> EvalReport:
    """Score predictions sample by sample.

    ``batch_size`` 1 keeps each prediction independent of its batch-mates,
    which makes reports independent of test-set order.
    """
    rows = []
    for start in range(0, len(pairs), batch_size):
        sl = slice(start, start + batch_size)
        preds = predict(pairs.x_in[sl], pairs.ids[sl], pairs.params_in[sl], pairs.params_out[sl])
        for sid, pred, truth in zip(pairs.ids[sl], preds, pairs.x_out[sl]):
            p, t = to_display_units(pred[0]), to_display_units(truth[0])
            rows.append({"sample_id": int(sid), "psnr": psnr(p, t), "mae": mae(p, t)})
    return EvalReport.from_rows(model_kind, testset_id, rows)


def identity_predictor(x_in, ids, params_in, params_out):
    return x_in


def evaluate(ae_ckpt, pnet_ckpt, manifest: DatasetManifest | str, split: str = "test",
             predictor: Predictor | None = None, testset_id: str | None = None) -> EvalReport:
    """Run ae_encode -> pnet_forward over a test split and aggregate PSNR / MAE.

    ``predictor`` replaces the model pipeline (test hook for oracle models).
    """
    from .checkpointing import check_pair, load_ae, load_pnet
    from .formats import read_manifest
    from .train import check_dataset_mode, load_pairs

    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    pairs = load_pairs(manifest, split)
    if predictor is None:
        ae = ae_ckpt if not isinstance(ae_ckpt, (str, bytes)) and hasattr(ae_ckpt, "encode") else load_ae(ae_ckpt)
        pn = pnet_ckpt if hasattr(pnet_ckpt, "config") else load_pnet(pnet_ckpt)
        check_pair(ae, pn)
        kind = pn.config.mode
        check_dataset_mode(kind, manifest.mode, pairs)
        predictor = model_predictor(ae, pn)
    else:
        kind = manifest.mode
    return evaluate_pairs(predictor, pairs, kind, testset_id or f"{manifest.root}:{split}")
