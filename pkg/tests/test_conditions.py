import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from vidprop.conditions import (
    ConditionImage,
    canny_edges,
    encode_condition,
    load_or_synthesize_depth,
    normalize_depth,
    spatial_conditions,
)
from vidprop.denoiser import Denoiser
from vidprop.media import FormatError, save_gray, write_tensor
from vidprop.scenes import make_scene


def _canny_loop(gray, low, high, sigma):
    """Brute-force reference: per-pixel NMS loop and iterative hysteresis."""
    blur = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    gx = ndimage.sobel(blur, axis=1, mode="nearest")
    gy = ndimage.sobel(blur, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    if mag.max() <= 1e-12:
        return np.zeros(gray.shape, bool)
    mag = mag / mag.max()
    H, W = mag.shape
    nms = np.zeros_like(mag)
    for y in range(H):
        for x in range(W):
            ang = np.degrees(np.arctan2(gy[y, x], gx[y, x])) % 180.0
            if ang < 22.5 or ang >= 157.5:
                dy, dx = 0, 1
            elif ang < 67.5:
                dy, dx = 1, 1
            elif ang < 112.5:
                dy, dx = 1, 0
            else:
                dy, dx = 1, -1

            def at(yy, xx):
                return mag[yy, xx] if 0 <= yy < H and 0 <= xx < W else 0.0

            if mag[y, x] >= at(y - dy, x - dx) and mag[y, x] > at(y + dy, x + dx):
                nms[y, x] = mag[y, x]
    edges = nms >= high
    weak = nms >= low
    changed = True
    while changed:
        grown = ndimage.binary_dilation(edges, structure=np.ones((3, 3))) & weak
        changed = bool((grown & ~edges).any())
        edges = grown | edges
    return edges


def test_constant_frame_no_edges():
    e = canny_edges(np.full((16, 16, 3), 0.4, np.float32))
    assert e.kind == "edge" and not e.frame.any()


def test_step_edge_single_column():
    img = np.zeros((16, 16, 3), np.float32)
    img[:, 8:] = 1.0
    e = canny_edges(img).frame[..., 0]
    cols = np.nonzero(e.any(axis=0))[0]
    assert len(cols) == 1 and abs(cols[0] - 8) <= 1
    assert e[:, cols[0]].all()
    ref = _canny_loop(img[..., 0].astype(np.float64), 0.1, 0.2, 1.4)
    np.testing.assert_array_equal(e.astype(bool), ref)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_matches_brute_force(seed):
    f = np.random.default_rng(seed).random((16, 16, 3)).astype(np.float32)
    gray = f.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    np.testing.assert_array_equal(canny_edges(f).frame[..., 0].astype(bool), _canny_loop(gray, 0.1, 0.2, 1.4))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-0.2, 0.2))
def test_binary_and_shift_invariant(seed, shift):
    f = (0.25 + 0.5 * np.random.default_rng(seed).random((32, 32, 3))).astype(np.float32)
    a = canny_edges(f).frame
    b = canny_edges(f + np.float32(shift)).frame
    assert set(np.unique(a)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a, b)
    assert np.array_equal(a[..., 0], a[..., 1]) and np.array_equal(a[..., 0], a[..., 2])


def test_noise_density_band():
    for seed in range(3):
        d = canny_edges(np.random.default_rng(seed).random((64, 64, 3)).astype(np.float32)).frame.mean()
        assert 0.0 < d < 0.5


def test_threshold_order():
    with pytest.raises(ValueError):
        canny_edges(np.zeros((16, 16, 3), np.float32), low=0.3, high=0.2)
    with pytest.raises(ValueError):
        canny_edges(np.zeros((16, 16, 3), np.float32), low=0.0, high=0.2)


def test_depth_constant_p5(tmp_path):
    save_gray(np.full((16, 16), 128 / 255), tmp_path / "d.pgm")
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        c = load_or_synthesize_depth(tmp_path / "d.pgm")
    assert c.flagged and np.all(c.frame == 0.5)


def test_depth_fvt_range(tmp_path):
    d = np.full((16, 16), 6.0, np.float32)
    d[0, 0], d[0, 1] = 2.0, 10.0
    write_tensor(d, tmp_path / "d.fvt")
    c = load_or_synthesize_depth(tmp_path / "d.fvt")
    assert c.frame[5, 5, 0] == pytest.approx(0.5)
    assert c.frame.min() == 0.0 and c.frame.max() == 1.0


def test_depth_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_or_synthesize_depth(tmp_path / "nope.pgm")
    write_tensor(np.zeros((4, 4, 3)), tmp_path / "r3.fvt")
    with pytest.raises(FormatError):
        load_or_synthesize_depth(tmp_path / "r3.fvt")
    (tmp_path / "x.bin").write_bytes(b"junk")
    with pytest.raises(FormatError):
        load_or_synthesize_depth(tmp_path / "x.bin")


def test_depth_synthetic_square():
    sc = make_scene("translating-square", 32, 3, seed=0, square_size=8, square_origin=(4.0, 4.0))
    c = load_or_synthesize_depth(sc, 1)
    m = sc.square_mask(1)
    assert np.all(c.frame[m] == 1.0) and np.all(c.frame[~m] == 0.0)


def test_depth_normalise_rejects_rgb():
    with pytest.raises(ValueError):
        normalize_depth(np.zeros((4, 4, 3)))


def test_encode_condition():
    model = Denoiser()
    img = np.random.default_rng(0).random((32, 48, 3)).astype(np.float32)
    c = encode_condition(ConditionImage("depth", img), model)
    assert c.shape == (4, 6, 4)
    # zero-initialised output conv: the latent is exactly zero at init
    assert not c.any()
    model.control.hint.out.weight.data[:] = 0.01
    a = encode_condition(ConditionImage("depth", img), model)
    b = encode_condition(ConditionImage("depth", img), model)
    np.testing.assert_array_equal(a, b)
    z = encode_condition(ConditionImage("edge", np.zeros_like(img)), model)
    np.testing.assert_array_equal(z, encode_condition(ConditionImage("edge", np.zeros_like(img)), model))
    with pytest.raises(ValueError):
        encode_condition(ConditionImage("edge", np.zeros((20, 16, 3), np.float32)), model)


def test_spatial_conditions_sequence():
    sc = make_scene("translating-square", 32, 3)
    fr = sc.clip().frames
    assert spatial_conditions(fr, "canny").shape == (3, 32, 32, 3)
    assert spatial_conditions(fr, "depth", sc).shape == (3, 32, 32, 3)
    with pytest.raises(ValueError):
        spatial_conditions(fr, "depth")
    with pytest.raises(ValueError):
        spatial_conditions(fr, "normals")
