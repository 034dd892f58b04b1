import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vidprop.media import (
    DimensionError,
    FormatError,
    VideoClip,
    check_frame,
    frame_stats,
    load_clip,
    load_frame,
    load_gray,
    read_flow,
    read_manifest,
    read_tensor,
    read_tensor_bundle,
    save_clip,
    save_frame,
    save_gray,
    write_flow,
    write_manifest,
    write_tensor,
    write_tensor_bundle,
)


def _ppm(path, w, h, payload, maxval=255, magic=b"P6"):
    path.write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + payload)
    return path


@pytest.mark.parametrize("byte,value", [(0, 0.0), (255, 1.0), (128, 128 / 255)])
def test_load_constant_ppm(tmp_path, byte, value):
    p = _ppm(tmp_path / "a.ppm", 16, 16, bytes([byte]) * 16 * 16 * 3)
    f = load_frame(p)
    assert f.shape == (16, 16, 3) and f.dtype == np.float32
    np.testing.assert_allclose(f, value, rtol=0, atol=1e-7)


def test_load_header_with_comment(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n16 16\n255\n" + bytes(16 * 16 * 3))
    assert load_frame(p).max() == 0.0


def test_load_errors(tmp_path):
    with pytest.raises(FormatError):
        load_frame(_ppm(tmp_path / "a.ppm", 16, 16, bytes(16 * 16 * 3), magic=b"P3"))
    with pytest.raises(FormatError):
        load_frame(_ppm(tmp_path / "b.ppm", 16, 16, bytes(16 * 16 * 3), maxval=65535))
    with pytest.raises(FormatError):
        load_frame(_ppm(tmp_path / "c.ppm", 16, 16, bytes(10)))
    with pytest.raises(DimensionError):
        load_frame(_ppm(tmp_path / "d.ppm", 20, 16, bytes(20 * 16 * 3)))
    with pytest.raises(FileNotFoundError):
        load_frame(tmp_path / "missing.ppm")


def test_save_load_examples(tmp_path):
    z = np.zeros((16, 16, 3), np.float32)
    save_frame(z, tmp_path / "z.ppm")
    np.testing.assert_array_equal(load_frame(tmp_path / "z.ppm"), z)
    h = np.full((16, 16, 3), 0.5, np.float32)
    save_frame(h, tmp_path / "h.ppm")
    back = load_frame(tmp_path / "h.ppm")
    assert np.abs(back - 0.5).max() <= 1 / 510 + 1e-7
    assert back[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)


def test_quantisation_bound_all_levels(tmp_path):
    # every byte level and the midpoints between them
    levels = np.linspace(0, 1, 16 * 32 * 3, dtype=np.float32).reshape(16, 32, 3)
    save_frame(levels, tmp_path / "l.ppm")
    assert np.abs(load_frame(tmp_path / "l.ppm") - levels).max() <= 1 / 510 + 1e-7


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (16, 24, 3), elements=st.floats(0, 1, width=32)))
def test_roundtrip_property(tmp_path_factory, frame):
    p = tmp_path_factory.mktemp("rt") / "f.ppm"
    save_frame(frame, p)
    back = load_frame(p)
    assert np.all(np.isfinite(back))
    assert np.abs(back - frame).max() <= 1 / 510 + 1e-7


def test_check_frame():
    with pytest.raises(DimensionError):
        check_frame(np.zeros((8, 8, 3), np.float32))
    with pytest.raises(DimensionError):
        check_frame(np.zeros((16, 16), np.float32))
    with pytest.raises(ValueError):
        check_frame(np.full((16, 16, 3), np.nan, np.float32))


def test_frame_stats_examples():
    s = frame_stats(np.full((16, 16, 3), 0.3, np.float32))
    np.testing.assert_allclose(s.mean, 0.3, atol=1e-7)
    np.testing.assert_allclose(s.std, 0.0, atol=1e-7)
    cb = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float32)
    s = frame_stats(np.repeat(cb[..., None], 3, axis=-1))
    np.testing.assert_allclose(s.mean, 0.5)
    np.testing.assert_allclose(s.std, 0.5)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-2, 2), seed=st.integers(0, 1000))
def test_stats_affine(a, b, seed):
    f = np.random.default_rng(seed).random((16, 16, 3))
    s0, s1 = frame_stats(f), frame_stats(a * f + b)
    np.testing.assert_allclose(s1.mean, a * s0.mean + b, atol=1e-9)
    np.testing.assert_allclose(s1.std, abs(a) * s0.std, atol=1e-9)


def test_tensor_format_bytes(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(arr, tmp_path / "t.fvt")
    raw = (tmp_path / "t.fvt").read_bytes()
    assert raw[:4] == b"FVT1"
    assert struct.unpack("<III", raw[4:16]) == (2, 2, 3)
    assert raw[16:] == arr.astype("<f4").tobytes()
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.fvt"), arr)


def test_tensor_errors(tmp_path):
    (tmp_path / "bad.fvt").write_bytes(b"FVT2" + bytes(8))
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "bad.fvt")
    write_tensor(np.zeros(4), tmp_path / "t.fvt")
    data = (tmp_path / "t.fvt").read_bytes()
    (tmp_path / "short.fvt").write_bytes(data[:-2])
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "short.fvt")


def test_rank3_tensor_as_frame(tmp_path):
    f = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    write_tensor(f, tmp_path / "f.fvt")
    np.testing.assert_array_equal(load_frame(tmp_path / "f.fvt"), f)


def test_flow_file(tmp_path):
    flow = np.random.default_rng(1).standard_normal((8, 12, 2)).astype(np.float32)
    write_flow(flow, tmp_path / "f.flo")
    raw = (tmp_path / "f.flo").read_bytes()
    assert raw[:4] == b"PIEH" and struct.unpack("<II", raw[4:12]) == (12, 8)
    assert struct.unpack("<ff", raw[12:20]) == tuple(flow[0, 0])
    np.testing.assert_array_equal(read_flow(tmp_path / "f.flo"), flow)
    with pytest.raises(DimensionError):
        write_flow(np.zeros((4, 4, 3)), tmp_path / "g.flo")


def test_gray_mask(tmp_path):
    m = np.zeros((16, 16), np.float32)
    m[3:5] = 1.0
    save_gray(m, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n")
    assert set(raw[len(b"P5\n16 16\n255\n"):]) == {0, 255}
    np.testing.assert_array_equal(load_gray(tmp_path / "m.pgm"), m)


def test_manifest_and_clip(tmp_path):
    write_manifest({"fps": 24, "name": "a b"}, tmp_path / "m.txt")
    assert read_manifest(tmp_path / "m.txt") == {"fps": "24", "name": "a b"}
    with pytest.raises(ValueError):
        write_manifest({"a=b": 1}, tmp_path / "x.txt")
    frames = np.random.default_rng(2).random((3, 16, 16, 3)).astype(np.float32)
    save_clip(VideoClip(frames, fps=12, frame_interval=2), tmp_path / "clip")
    back = load_clip(tmp_path / "clip")
    assert len(back) == 3 and back.fps == 12 and back.frame_interval == 2
    assert np.abs(back.frames - frames).max() <= 1 / 510 + 1e-7


def test_bundle(tmp_path):
    t = {"a": np.ones((2, 2)), "b.c": np.zeros(3)}
    write_tensor_bundle(t, tmp_path / "b", extra={"seed": 4})
    back, meta = read_tensor_bundle(tmp_path / "b")
    assert meta == {"seed": "4"}
    assert set(back) == {"a", "b.c"}


def test_clip_invariants():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((0, 16, 16, 3), np.float32))
    with pytest.raises(ValueError):
        VideoClip(np.zeros((2, 16, 16, 3), np.float32), frame_interval=0)
