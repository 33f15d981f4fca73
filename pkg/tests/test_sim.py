import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrreparam.errors import ConfigError, ParamRangeError, ShapeError
from mrreparam.formats import read_manifest, read_slice
from mrreparam.phantom import generate_phantom
from mrreparam.sim import (
    DEFAULT_PARAMS,
    ScanParams,
    build_dataset,
    sample_param_pairs,
    simulate_image,
    spin_echo_signal,
    split_sizes,
)


def test_signal_reference_value():
    expected = (1 - math.exp(-4.5)) * math.exp(-0.5)
    assert spin_echo_signal(1.0, 1.0, 0.1, 0.05, 4.5) == pytest.approx(0.599794, abs=1e-5)
    assert spin_echo_signal(1.0, 1.0, 0.1, 0.05, 4.5) == pytest.approx(expected, abs=1e-12)


def test_signal_background_and_limit():
    assert spin_echo_signal(0.8, 0.0, 0.0, 0.05, 4.5) == 0.0
    assert spin_echo_signal(0.8, 1.2, 0.0, 0.05, 4.5) == 0.0
    assert spin_echo_signal(0.7, 1.0, 0.1, 1e-9, 1e9) == pytest.approx(0.7, abs=1e-6)


def test_signal_rejects_negative():
    with pytest.raises(ParamRangeError):
        spin_echo_signal(1.0, 1.0, 0.1, -0.05, 4.5)
    with pytest.raises(ParamRangeError):
        spin_echo_signal(-1.0, 1.0, 0.1, 0.05, 4.5)


@given(st.floats(0, 1), st.floats(0.01, 4.5), st.floats(0.01, 2.2), st.floats(0.02, 1.0), st.floats(1.2, 10.0))
def test_signal_bounds(pd, t1, t2, te, tr):
    s = spin_echo_signal(pd, t1, t2, te, tr)
    assert 0 <= s <= pd


def _maps():
    vol = generate_phantom(3, shape=(24, 32, 32))
    z = 12
    return vol.t1[z], vol.t2[z], vol.pd[z]


def test_simulate_monotone_in_te_and_tr():
    maps = _maps()
    imgs = [simulate_image(maps, ScanParams(te, 4.5)) for te in (0.02, 0.2, 1.0)]
    assert np.all(imgs[0] >= imgs[1]) and np.all(imgs[1] >= imgs[2])
    lo, hi = simulate_image(maps, ScanParams(0.05, 1.2)), simulate_image(maps, ScanParams(0.05, 10.0))
    assert np.all(hi >= lo)
    assert 0 <= imgs[0].min() and imgs[0].max() <= 1


def test_simulate_background_and_shape_errors():
    z = np.zeros((8, 8), np.float32)
    assert np.all(simulate_image((z, z, z), DEFAULT_PARAMS) == 0)
    with pytest.raises(ShapeError):
        simulate_image((z, np.zeros((8, 9)), z), DEFAULT_PARAMS)


def test_sample_param_pairs():
    a = sample_param_pairs(5, 10_000)
    assert a == sample_param_pairs(5, 10_000)
    assert all(p.in_range() for p in a)
    med = float(np.median([p.te_s for p in a]))
    assert abs(med / 0.1414 - 1) <= 0.15 and med < 0.51
    tr = np.array([p.tr_s for p in a])
    assert abs(tr.mean() - 5.6) < 0.1


def test_split_sizes():
    assert split_sizes(4800) == (1500, 3300)
    assert split_sizes(960) == (300, 660)


def test_scan_params_range():
    with pytest.raises(ParamRangeError):
        ScanParams(0.01, 4.5).check_range()
    assert DEFAULT_PARAMS == ScanParams(0.05, 4.5)


@pytest.fixture(scope="module")
def small_phantoms():
    return [generate_phantom(s, shape=(32, 40, 40)) for s in (0, 1)]


def test_build_d2p(tmp_path, small_phantoms):
    m = build_dataset(small_phantoms, "d2p", 6, 4, 16, 0, tmp_path)
    assert len(m.samples) == 24 and len(m.split("train")) == split_sizes(24)[0]
    assert all((s["te_in"], s["tr_in"]) == (0.05, 4.5) for s in m.samples)
    back = read_manifest(tmp_path / "manifest.json")
    for s in back.samples:
        img, te, tr = read_slice(back.resolve(s["file_out"]))
        assert img.shape == (16, 16) and img.min() >= 0 and img.max() <= 1
        assert (te, tr) == (s["te_out"], s["tr_out"])
    assert {s["phantom_id"] for s in m.samples} == {0, 1}


def test_build_p2p_and_split_policy(tmp_path, small_phantoms):
    m = build_dataset(small_phantoms, "p2p", 5, 4, 16, 1, tmp_path, n_train=6)
    assert len(m.split("train")) == 6 and len(m.split("test")) == 14
    assert len({(s["te_in"], s["tr_in"]) for s in m.samples}) == 5
    by_pair = {}
    for s in m.samples:
        by_pair.setdefault(s["id"] // 4, set()).add(s["split"])
    assert sum(len(v) > 1 for v in by_pair.values()) <= 1


def test_build_is_byte_identical_across_workers(tmp_path, small_phantoms):
    def snapshot(d):
        return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    build_dataset(small_phantoms, "p2p", 3, 3, 16, 7, tmp_path / "a", workers=1)
    build_dataset(small_phantoms, "p2p", 3, 3, 16, 7, tmp_path / "b", workers=2)
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_build_errors(tmp_path, small_phantoms):
    with pytest.raises(ConfigError):
        build_dataset([], "d2p", 2, 2, 16, 0, tmp_path)
    with pytest.raises(ConfigError):
        build_dataset(small_phantoms, "x2y", 2, 2, 16, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        build_dataset(small_phantoms, "d2p", 2, 2, 16, 0, blocker / "sub")
