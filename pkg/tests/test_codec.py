import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidprop.codec import (
    CodecParams,
    LatentCodec,
    depth_to_space,
    load_codec_params,
    psnr,
    save_codec_params,
    space_to_depth,
)
from vidprop.flow import warp_clip
from vidprop.media import DimensionError


@pytest.fixture(scope="module")
def codec():
    return LatentCodec(seed=0)


def test_pseudo_inverse(codec):
    p = codec.params
    np.testing.assert_allclose(p.backward_proj, np.linalg.pinv(p.forward_proj), atol=1e-5)
    np.testing.assert_allclose(p.forward_proj.T @ p.forward_proj, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(p.forward_proj[:, 0], 1 / np.sqrt(192))


def test_space_to_depth_layout():
    f = np.random.default_rng(0).random((16, 24, 3))
    g = space_to_depth(f)
    assert g.shape == (2, 3, 192)
    # patch (1, 2) flattened row-major over (8, 8, 3)
    np.testing.assert_array_equal(g[1, 2], f[8:16, 16:24].reshape(-1))
    np.testing.assert_array_equal(depth_to_space(g), f)


def test_shapes_and_zero(codec):
    z = codec.encode(np.zeros((64, 64, 3), np.float32))
    assert z.shape == (8, 8, 4)
    assert not z.any()
    assert not codec.decode(np.zeros((8, 8, 4))).any()
    with pytest.raises(DimensionError):
        codec.decode(np.zeros((8, 8, 3)))
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((20, 16, 3), np.float32))


def test_linearity(codec):
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 32, 32, 3)).astype(np.float32) * 0.5
    np.testing.assert_allclose(codec.encode(a) + codec.encode(b), codec.encode(a + b), atol=1e-5)


def test_constant_gray_roundtrip(codec):
    out = codec.round_trip(np.full((32, 32, 3), 0.5, np.float32))
    assert np.abs(out - 0.5).max() < 0.02


def test_psnr_bands(codec):
    # achromatic horizontal ramp; per-patch chroma is mostly discarded by design
    xs = np.tile(np.linspace(0, 1, 64), (64, 1))
    grad = np.repeat(xs[..., None], 3, axis=-1).astype(np.float32)
    assert psnr(grad, codec.round_trip(grad)) >= 25.0
    noise = np.random.default_rng(2).random((64, 64, 3)).astype(np.float32)
    assert psnr(noise, codec.round_trip(noise)) <= 15.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_projection_idempotent_and_contractive(codec, seed):
    x = np.random.default_rng(seed).random((16, 16, 3)).astype(np.float32)
    z = codec.encode(x)
    rec = codec.decode(z, clamp=False)
    np.testing.assert_allclose(codec.encode(rec, validate=False), z, atol=1e-5)
    assert np.linalg.norm(rec) <= np.linalg.norm(x) + 1e-6


def test_clip_encoding(codec):
    f = np.random.default_rng(3).random((16, 16, 3)).astype(np.float32)
    lat = codec.encode_clip(np.stack([f] * 3))
    assert len(lat) == 3
    assert all(np.array_equal(lat[0], z) for z in lat)
    warped = warp_clip(f, [np.ones((16, 16, 2))] * 3, [np.zeros((16, 16), bool)] * 3)
    const = np.stack([f] * 3)
    np.testing.assert_array_equal(codec.encode_clip(warped)[0], codec.encode_clip(const)[0])


def test_model_space(codec):
    gray = np.full((16, 16, 3), 0.5, np.float32)
    np.testing.assert_allclose(codec.to_model(codec.encode(gray)[None]), 0.0, atol=1e-6)
    z = np.random.default_rng(4).standard_normal((2, 2, 4)).astype(np.float32)
    np.testing.assert_allclose(codec.to_model(codec.from_model(z)), z, atol=1e-5)


def test_params_persist(tmp_path):
    p = CodecParams.create(5)
    save_codec_params(p, tmp_path / "codec")
    q = load_codec_params(tmp_path / "codec")
    assert q.seed == 5
    np.testing.assert_allclose(q.forward_proj, p.forward_proj, atol=1e-7)


def test_seed_determinism():
    a, b = CodecParams.create(3), CodecParams.create(3)
    np.testing.assert_array_equal(a.forward_proj, b.forward_proj)
    assert not np.array_equal(a.forward_proj, CodecParams.create(4).forward_proj)
