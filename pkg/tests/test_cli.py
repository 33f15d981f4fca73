import json

import numpy as np
import pytest

from mrreparam.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, cli, resolve_options
from mrreparam.formats import read_manifest, read_slice, write_slice

SMALL = ["--shape", "24", "32", "32", "--phantoms", "1"]


def test_usage_errors(capsys):
    assert cli([]) == EXIT_USAGE
    assert cli(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err.lower()
    assert cli(["dataset", "--pairs", "many"]) == EXIT_USAGE


def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("MRREPARAM_WORKERS", raising=False)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "workers": 3, "dataset": {"pairs": 7, "slices": 3}}))
    parser = build_parser()
    args = parser.parse_args(["--config", str(cfg), "--seed", "9", "dataset", "--pairs", "2"])
    o = resolve_options(args, json.loads(cfg.read_text()))
    assert o["pairs"] == 2          # flag beats file
    assert o["slices"] == 3         # file beats default
    assert o["resolution"] == 256   # default
    assert o["seed"] == 9 and o["workers"] == 3
    monkeypatch.setenv("MRREPARAM_WORKERS", "4")
    o = resolve_options(parser.parse_args(["dataset"]), {})
    assert o["workers"] == 4


def test_bad_config_is_data_error(tmp_path):
    (tmp_path / "c.json").write_text("[1, 2]")
    assert cli(["--config", str(tmp_path / "c.json"), "dataset"]) == EXIT_DATA


def test_dataset_canonical_counts(tmp_path):
    out = tmp_path / "ds"
    rc = cli(["dataset", "--mode", "d2p", "--pairs", "200", "--slices", "24", "--resolution", "8",
              "--shape", "40", "32", "32", "--phantoms", "2", "--out", str(out)])
    assert rc == EXIT_OK
    m = read_manifest(out / "manifest.json")
    assert len(m.samples) == 4800 and len(m.split("train")) == 1500


def test_phantom_command(tmp_path):
    assert cli(["phantom", "--count", "2", "--shape", "16", "20", "20", "--out", str(tmp_path)]) == EXIT_OK
    vol = np.load(tmp_path / "phantom_001.npz")
    assert vol["t1"].shape == (16, 20, 20)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for mode in ("d2p", "p2p"):
        assert cli(["--seed", "1", "dataset", "--mode", mode, "--pairs", "4", "--slices", "4", "--resolution", "8",
                    *SMALL, "--out", str(root / mode)]) == EXIT_OK
    common = ["--epochs", "1", "--batch-size", "4", "--lr", "1e-3"]
    assert cli(["train-ae", "--dataset", str(root / "d2p" / "manifest.json"), "--width", "4", *common,
                "--out", str(root / "ae.ckpt"), "--log", str(root / "ae_log.json")]) == EXIT_OK
    for mode in ("d2p", "p2p"):
        assert cli(["train-pn", "--dataset", str(root / mode / "manifest.json"), "--ae", str(root / "ae.ckpt"),
                    *common, "--out", str(root / f"{mode}.ckpt")]) == EXIT_OK
    return root


def test_train_log_json(trained):
    log = json.loads((trained / "ae_log.json").read_text())
    assert set(log) == {"steps", "epochs"}
    assert {"step", "loss"} <= set(log["steps"][0]) and {"epoch", "mean_loss", "seconds"} <= set(log["epochs"][0])


def test_infer_with_diff_map(trained, tmp_path):
    src = trained / "d2p" / read_manifest(trained / "d2p" / "manifest.json").samples[0]["file_in"]
    rc = cli(["infer", "--ae", str(trained / "ae.ckpt"), "--pn", str(trained / "d2p.ckpt"), "--input", str(src),
              "--te", "0.05", "--tr", "4.5", "--out", str(tmp_path / "pred.mrs"), "--diff", str(tmp_path / "diff.mrs")])
    assert rc == EXIT_OK
    pred, te, tr = read_slice(tmp_path / "pred.mrs")
    diff, _, _ = read_slice(tmp_path / "diff.mrs")
    assert pred.shape == (8, 8) and (te, tr) == (0.05, 4.5)
    assert np.all(np.isfinite(diff))
    rc = cli(["infer", "--ae", str(trained / "ae.ckpt"), "--pn", str(trained / "d2p.ckpt"), "--input", str(src),
              "--te", "0.3", "--tr", "2", "--format", "pgm", "--out", str(tmp_path / "pred.pgm")])
    assert rc == EXIT_OK and (tmp_path / "pred.pgm").read_bytes().startswith(b"P5\n8 8\n")


def test_infer_p2p_uses_header_params(trained, tmp_path):
    write_slice(tmp_path / "in.mrs", np.full((8, 8), 0.3, np.float32), 0.2, 3.0)
    rc = cli(["infer", "--ae", str(trained / "ae.ckpt"), "--pn", str(trained / "p2p.ckpt"),
              "--input", str(tmp_path / "in.mrs"), "--te", "0.1", "--tr", "5", "--out", str(tmp_path / "o.mrs")])
    assert rc == EXIT_OK


def test_eval_and_mismatch(trained, tmp_path, capsys):
    rc = cli(["eval", "--ae", str(trained / "ae.ckpt"), "--pn", str(trained / "d2p.ckpt"),
              "--dataset", str(trained / "d2p" / "manifest.json"), "--json", str(tmp_path / "r.json")])
    assert rc == EXIT_OK
    assert "Mean PSNR" in capsys.readouterr().out
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["model_kind"] == "d2p" and len(rep["rows"]) > 0
    rc = cli(["eval", "--ae", str(trained / "ae.ckpt"), "--pn", str(trained / "d2p.ckpt"),
              "--dataset", str(trained / "p2p" / "manifest.json")])
    assert rc == EXIT_DATA


def test_export_figures(trained, tmp_path):
    rc = cli(["export-figures", "--ae", str(trained / "ae.ckpt"), "--pn", str(trained / "p2p.ckpt"),
              "--dataset", str(trained / "p2p" / "manifest.json"), "--count", "2", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    names = sorted(p.name for p in tmp_path.iterdir())
    assert len(names) == 8 and sum(n.endswith("_diff.pgm") for n in names) == 2


def test_missing_checkpoint_is_data_error(trained, tmp_path):
    rc = cli(["eval", "--ae", str(tmp_path / "nope.ckpt"), "--pn", str(trained / "d2p.ckpt"),
              "--dataset", str(trained / "d2p" / "manifest.json")])
    assert rc == EXIT_DATA


def test_nan_loss_exit_code(tmp_path):
    out = tmp_path / "ds"
    assert cli(["dataset", "--pairs", "2", "--slices", "2", "--resolution", "8", *SMALL, "--out", str(out)]) == 0
    m = read_manifest(out / "manifest.json")
    for s in m.samples:
        write_slice(out / s["file_in"], np.full((8, 8), np.nan, np.float32), s["te_in"], s["tr_in"])
    rc = cli(["train-ae", "--dataset", str(out / "manifest.json"), "--width", "2", "--epochs", "1",
              "--out", str(tmp_path / "ae.ckpt")])
    assert rc == EXIT_NUMERIC
