"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Option values resolve as: command-line flag > ``--config`` JSON > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import NumericError, ReparamError

log = logging.getLogger("mrreparam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    "workers": 1,
    "phantom": {"count": 4, "family": "default", "shape": [108, 90, 90], "out": "phantoms"},
    "dataset": {"mode": "d2p", "pairs": 200, "slices": 24, "resolution": 256, "phantoms": 4,
                "family": "default", "shape": [108, 90, 90], "n_train": None, "noise_sigma": 0.0, "out": "data"},
    "train-ae": {"epochs": 10, "batch_size": 8, "lr": 2e-4, "depth": None, "width": 16, "width_cap": None,
                 "checkpoint_every": 0, "pretrain_dir": None, "out": "ae.ckpt", "log": None},
    "train-pn": {"mode": None, "epochs": 10, "batch_size": 8, "lr": 2e-4, "checkpoint_every": 0,
                 "out": "pnet.ckpt", "log": None},
    "infer": {"te_in": None, "tr_in": None, "format": "raw", "diff": None},
    "eval": {"split": "test", "json": None},
    "export-figures": {"split": "test", "count": 4, "out": "figures"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrreparam", description="MR image re-parameterization toolkit")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--workers", type=int, help="parallel workers (default $MRREPARAM_WORKERS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate phantom volumes (.npz)")
    s.add_argument("--count", type=int)
    s.add_argument("--family", choices=["default", "shifted"])
    s.add_argument("--shape", type=int, nargs=3)
    s.add_argument("--out")

    s = sub.add_parser("dataset", help="simulate a paired dataset")
    s.add_argument("--mode", choices=["d2p", "p2p"])
    s.add_argument("--pairs", type=int)
    s.add_argument("--slices", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--phantoms", type=int, help="number of generated phantoms")
    s.add_argument("--family", choices=["default", "shifted"])
    s.add_argument("--shape", type=int, nargs=3, help="phantom volume shape D H W")
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    s.add_argument("--out")

    s = sub.add_parser("train-ae", help="phase 1: train the autoencoder")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--depth", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--width-cap", dest="width_cap", type=int)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    s.add_argument("--pretrain-dir", dest="pretrain_dir")
    s.add_argument("--out")
    s.add_argument("--log")

    s = sub.add_parser("train-pn", help="phase 2: train Param-Net with the autoencoder frozen")
    s.add_argument("--dataset", required=True)
    s.add_argument("--ae", required=True)
    s.add_argument("--mode", choices=["d2p", "p2p"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    s.add_argument("--out")
    s.add_argument("--log")

    s = sub.add_parser("infer", help="re-parameterize one slice file")
    s.add_argument("--ae", required=True)
    s.add_argument("--pn", required=True)
    s.add_argument("--input", required=True, help="slice file (.mrs)")
    s.add_argument("--te", type=float, required=True)
    s.add_argument("--tr", type=float, required=True)
    s.add_argument("--te-in", dest="te_in", type=float)
    s.add_argument("--tr-in", dest="tr_in", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["raw", "pgm"])
    s.add_argument("--diff", help="write |prediction - input| (or --reference) map here")
    s.add_argument("--reference", help="ground-truth slice for the difference map")

    s = sub.add_parser("eval", help="PSNR / MAE report over a dataset split")
    s.add_argument("--ae", required=True)
    s.add_argument("--pn", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=["train", "test"])
    s.add_argument("--json")

    s = sub.add_parser("export-figures", help="input / truth / prediction / difference quadruples")
    s.add_argument("--ae", required=True)
    s.add_argument("--pn", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=["train", "test"])
    s.add_argument("--count", type=int)
    s.add_argument("--out")
    return p


def resolve_options(args: argparse.Namespace, file_cfg: dict) -> dict:
    """Merge built-in defaults, the config file and explicit flags, in that order."""
    cmd = args.command
    opts = {k: v for k, v in DEFAULTS.items() if not isinstance(v, dict)}
    opts.update(DEFAULTS.get(cmd, {}))
    env_workers = os.environ.get("MRREPARAM_WORKERS")
    if env_workers:
        opts["workers"] = int(env_workers)
    for k, v in file_cfg.items():
        if isinstance(v, dict):
            if k == cmd:
                opts.update(v)
        else:
            opts[k] = v
    for k, v in vars(args).items():
        if k in ("config", "command", "verbose"):
            continue
        if v is not None:
            opts[k] = v
    return opts


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReparamError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ReparamError(f"config {path} must hold a JSON object")
    return cfg


# -- commands ----------------------------------------------------------------

def cmd_phantom(o: dict) -> None:
    from .phantom import generate_phantom

    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i in range(o["count"]):
        seed = o["seed"] * 1000 + i
        vol = generate_phantom(seed, tuple(o["shape"]), o["family"])
        np.savez_compressed(out / f"phantom_{i:03d}.npz", t1=vol.t1, t2=vol.t2, pd=vol.pd, labels=vol.labels)
    print(f"wrote {o['count']} phantoms to {out}")


def _phantoms_for(o: dict):
    from .phantom import generate_phantom

    shape = tuple(o["shape"])
    return [generate_phantom(o["seed"] * 1000 + i, shape, o["family"]) for i in range(o["phantoms"])]


def cmd_dataset(o: dict) -> None:
    from .sim import build_dataset

    m = build_dataset(_phantoms_for(o), o["mode"], o["pairs"], o["slices"], o["resolution"], o["seed"],
                      o["out"], n_train=o["n_train"], workers=o["workers"], noise_sigma=o["noise_sigma"])
    print(f"{len(m.samples)} samples ({len(m.split('train'))} train / {len(m.split('test'))} test) "
          f"-> {Path(o['out']) / 'manifest.json'}")


def _train_config(o: dict, phase: str, **extra):
    from .train import TrainConfig

    return TrainConfig(phase=phase, dataset=o["dataset"], epochs=o["epochs"], batch_size=o["batch_size"],
                       lr=o["lr"], seed=o["seed"], deterministic=bool(o["deterministic"]),
                       checkpoint_every=o["checkpoint_every"],
                       checkpoint_dir=str(Path(o["out"]).parent / "checkpoints") if o["checkpoint_every"] else None,
                       **extra)


def cmd_train_ae(o: dict) -> None:
    import math

    from .formats import read_manifest
    from .train import train_autoencoder

    manifest = read_manifest(o["dataset"])
    depth = o["depth"] or int(math.log2(manifest.R))
    cfg = _train_config(o, "ae", depth=depth, base_width=o["width"], width_cap=o["width_cap"],
                        pretrain_dir=o["pretrain_dir"])
    _, tlog = train_autoencoder(cfg, out_path=o["out"])
    if o["log"]:
        tlog.write(o["log"])
    print(f"autoencoder trained: final loss {tlog.final_loss:.6f} -> {o['out']}")


def cmd_train_pn(o: dict) -> None:
    from .formats import read_manifest
    from .train import train_paramnet

    mode = o["mode"] or read_manifest(o["dataset"], validate=False).mode
    cfg = _train_config(o, "pnet", mode=mode)
    _, tlog = train_paramnet(cfg, o["ae"], out_path=o["out"])
    if o["log"]:
        tlog.write(o["log"])
    print(f"param-net ({mode}) trained: final loss {tlog.final_loss:.6f} -> {o['out']}")


def cmd_infer(o: dict) -> None:
    from .checkpointing import check_pair, load_ae, load_pnet
    from .evaluation import diff_map, model_predictor
    from .formats import export_image, read_slice
    from .sim import ScanParams

    ae, pn = load_ae(o["ae"]), load_pnet(o["pn"])
    check_pair(ae, pn)
    img, te_file, tr_file = read_slice(o["input"])
    params_in = ScanParams(o["te_in"] if o["te_in"] is not None else te_file,
                           o["tr_in"] if o["tr_in"] is not None else tr_file)
    params_out = ScanParams(o["te"], o["tr"])
    pred = model_predictor(ae, pn)(img[None, None], [0], [params_in], [params_out])[0, 0]
    if o["format"] == "pgm":
        export_image(pred, o["out"], "pgm")
    else:
        from .formats import write_slice

        write_slice(o["out"], pred, params_out.te_s, params_out.tr_s)
    if o["diff"]:
        ref = read_slice(o["reference"])[0] if o.get("reference") else img
        d = diff_map(pred, ref)
        export_image(d, o["diff"], "raw" if o["format"] == "raw" else "pgm")
    print(f"prediction -> {o['out']}")


def cmd_eval(o: dict) -> None:
    from .evaluation import evaluate

    report = evaluate(o["ae"], o["pn"], o["dataset"], split=o["split"])
    if o["json"]:
        report.write_json(o["json"])
    print(report.table())


def cmd_export_figures(o: dict) -> None:
    from .checkpointing import check_pair, load_ae, load_pnet
    from .evaluation import diff_map, model_predictor
    from .formats import export_image, read_manifest
    from .train import check_dataset_mode, load_pairs

    ae, pn = load_ae(o["ae"]), load_pnet(o["pn"])
    check_pair(ae, pn)
    manifest = read_manifest(o["dataset"])
    pairs = load_pairs(manifest, o["split"])
    check_dataset_mode(pn.config.mode, manifest.mode, pairs)
    sub = pairs.subset(range(min(o["count"], len(pairs))))
    preds = model_predictor(ae, pn)(sub.x_in, sub.ids, sub.params_in, sub.params_out)
    out = Path(o["out"])
    for sid, x, y, p in zip(sub.ids, sub.x_in, sub.x_out, preds):
        d = diff_map(p[0], y[0])
        peak = d.max()
        # difference maps are in arbitrary units: stretch to full range for display
        export_image(x[0], out / f"{sid:05d}_input.pgm")
        export_image(y[0], out / f"{sid:05d}_truth.pgm")
        export_image(p[0], out / f"{sid:05d}_prediction.pgm")
        export_image(d / peak if peak > 0 else d, out / f"{sid:05d}_diff.pgm")
    print(f"wrote {len(sub)} figure quadruples to {out}")


COMMANDS = {
    "phantom": cmd_phantom,
    "dataset": cmd_dataset,
    "train-ae": cmd_train_ae,
    "train-pn": cmd_train_pn,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "export-figures": cmd_export_figures,
}


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts = resolve_options(args, _load_config(args.config))
        COMMANDS[args.command](opts)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ReparamError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
