import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrreparam.errors import ShapeError
from mrreparam.phantom import (
    DEFAULT_SHAPE,
    T1_MAX_S,
    T2_MAX_S,
    axial_slice_indices,
    default_palette,
    extract_axial_slices,
    generate_phantom,
    resize_bilinear,
    shifted_palette,
)


@pytest.fixture(scope="module")
def vol():
    return generate_phantom(0)


def _tissue(p):
    return [t for t in p if not t.is_background]


def test_palette_ranges_and_background():
    pal = default_palette()
    assert len(_tissue(pal)) >= 4
    for t in _tissue(pal):
        assert 0 < t.t1_s <= T1_MAX_S and 0 < t.t2_s <= T2_MAX_S and 0 < t.pd <= 1
    bg = [t for t in pal if t.is_background]
    assert len(bg) == 1 and (bg[0].t1_s, bg[0].t2_s, bg[0].pd) == (0, 0, 0)
    csf = next(t for t in pal if t.label == "csf")
    assert csf.t1_s == max(t.t1_s for t in pal) and csf.t2_s == max(t.t2_s for t in pal)
    assert {"csf", "gray_matter", "white_matter", "fat", "lesion"} <= {t.label for t in pal}


def test_shifted_palette_differs_and_stays_in_range():
    base, shifted = default_palette(), shifted_palette()
    assert [t.label for t in base] == [t.label for t in shifted]
    for b, s in zip(_tissue(base), _tissue(shifted)):
        assert (b.t1_s, b.t2_s) != (s.t1_s, s.t2_s)
        assert s.t1_s == pytest.approx(min(b.t1_s * 1.15, T1_MAX_S))
        assert s.t2_s == pytest.approx(min(b.t2_s * 1.15, T2_MAX_S))


def test_default_volume(vol):
    assert vol.t1.shape == vol.t2.shape == vol.pd.shape == DEFAULT_SHAPE
    bg = np.mean(vol.labels == 0)
    assert bg >= 0.3 and 1 - bg >= 0.1


def test_voxels_belong_to_palette(vol):
    triples = {(t.t1_s, t.t2_s, t.pd) for t in vol.palette}
    values = np.stack([vol.t1.ravel(), vol.t2.ravel(), vol.pd.ravel()], 1)
    uniq = {tuple(float(np.float32(x)) for x in row) for row in np.unique(values, axis=0)}
    assert uniq <= {tuple(float(np.float32(x)) for x in t) for t in triples}
    assert np.all(vol.t1 <= T1_MAX_S) and np.all(vol.t2 <= T2_MAX_S)


def test_determinism_and_seed_variation(vol):
    again = generate_phantom(0)
    assert again.t1.tobytes() == vol.t1.tobytes() and again.labels.tobytes() == vol.labels.tobytes()
    a, b = generate_phantom(1), generate_phantom(2)
    assert np.mean(a.labels != b.labels) >= 0.01


def test_shifted_family_phantom():
    s = generate_phantom(0, family="shifted")
    d = generate_phantom(0)
    assert np.array_equal(s.labels, d.labels)
    assert not np.array_equal(s.t1, d.t1)


def test_small_shape_rejected():
    with pytest.raises(ShapeError):
        generate_phantom(0, shape=(8, 32, 32))


def test_extract_slices(vol):
    sl = extract_axial_slices(vol, 24)
    assert len(sl) == 24 and all(m.shape == (90, 90) for trip in sl for m in trip)
    idx = axial_slice_indices(108, 24)
    assert all(b > a for a, b in zip(idx, idx[1:]))
    assert min(idx) >= 0.2 * 107 - 1 and max(idx) <= 0.8 * 107 + 1
    assert axial_slice_indices(108, 1)[0] in (53, 54)
    with pytest.raises(ShapeError):
        axial_slice_indices(10, 11)


@given(st.integers(16, 200), st.integers(1, 60))
def test_slice_indices_unique_increasing(depth, count):
    count = min(count, depth)
    idx = axial_slice_indices(depth, count)
    assert len(idx) == count and idx == sorted(set(idx))
    assert 0 <= idx[0] and idx[-1] < depth


def test_resize_examples():
    assert resize_bilinear(np.zeros((90, 90), np.float32), 256).shape == (256, 256)
    const = resize_bilinear(np.full((90, 90), 0.37, np.float32), 256)
    assert np.max(np.abs(const - 0.37)) < 1e-6
    img = np.random.default_rng(0).random((40, 40)).astype(np.float32)
    assert np.max(np.abs(resize_bilinear(img, 40) - img)) < 1e-6


@given(st.integers(2, 30), st.integers(2, 30), st.integers(2, 64), st.integers(0, 2**31 - 1))
@settings(max_examples=50)
def test_resize_preserves_range(h, w, size, seed):
    img = np.random.default_rng(seed).normal(size=(h, w)).astype(np.float32)
    out = resize_bilinear(img, size)
    assert out.shape == (size, size)
    assert out.min() >= img.min() and out.max() <= img.max()
    # corners are sampled exactly
    assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]
