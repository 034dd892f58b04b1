import numpy as np
import pytest

from vidprop.denoiser import (
    ConditionBundle,
    Denoiser,
    DenoiserConfig,
    SpatialTemporalAttention,
    _attend,
    embed_prompt,
    load_checkpoint,
    resize_mask,
    save_checkpoint,
)
from vidprop.tensorad import Tensor, gradcheck, mse_loss


def make_bundle(n, hw=(8, 8), seed=0, prompt="a red car"):
    rng = np.random.default_rng(seed)
    h, w = hw
    return ConditionBundle(
        spatial=rng.random((n, 8 * h, 8 * w, 3)).astype(np.float32),
        flow_latent=rng.standard_normal((n, h, w, 4)).astype(np.float32),
        first_latent=rng.standard_normal((n, h, w, 4)).astype(np.float32),
        occlusion=rng.random((n, h, w)).astype(np.float32),
        prompt=embed_prompt(prompt),
    )


@pytest.fixture(scope="module")
def model():
    return Denoiser(DenoiserConfig(seed=3))


def test_prompt_embedding():
    a, b = embed_prompt("A red car"), embed_prompt("a red car")
    assert a.tokens == b.tokens and len(a.tokens) == 3
    np.testing.assert_array_equal(a.vectors, b.vectors)
    assert len(embed_prompt("one two three four five six seven eight nine ten").tokens) == 8
    e = embed_prompt("")
    assert e.vectors.shape == (1, 32) and not e.vectors.any()
    assert embed_prompt("car").vectors.shape == (1, 32)


def test_bundle_validation():
    b = make_bundle(3)
    with pytest.raises(ValueError):
        ConditionBundle(b.spatial[:2], b.flow_latent, b.first_latent, b.occlusion, b.prompt)
    with pytest.raises(ValueError):
        ConditionBundle(b.spatial, b.flow_latent, b.first_latent, b.occlusion + 2.0, b.prompt)


def test_resize_mask_modes():
    m = np.zeros((16, 16), bool)
    m[:8, :4] = True
    avg = resize_mask(m)
    np.testing.assert_array_equal(avg, [[0.5, 0.0], [0.0, 0.0]])
    near = resize_mask(m, mode="nearest")
    np.testing.assert_array_equal(near, [[0.0, 0.0], [0.0, 0.0]])
    m[:8, :8] = True
    np.testing.assert_array_equal(resize_mask(m, mode="nearest"), [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        resize_mask(m, mode="bicubic")


@pytest.mark.parametrize("n", [1, 4, 16])
def test_output_shape(model, n):
    b = make_bundle(n)
    z = np.random.default_rng(1).standard_normal((n, 8, 8, 4)).astype(np.float32)
    v = model.predict(z, 500, b)
    assert v.shape == z.shape and v.dtype == np.float32
    assert np.all(np.isfinite(v))


def test_rectangular_latent(model):
    b = make_bundle(2, hw=(4, 6))
    z = np.zeros((2, 4, 6, 4), np.float32)
    assert model.predict(z, 10, b).shape == (2, 4, 6, 4)


def test_rejects_bad_shapes(model):
    b = make_bundle(2)
    with pytest.raises(ValueError):
        model.predict(np.zeros((0, 8, 8, 4), np.float32), 5, b)
    with pytest.raises(ValueError):
        model.predict(np.zeros((3, 8, 8, 4), np.float32), 5, b)
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 8, 8, 3), np.float32), 5, b)


def test_zero_init_contract(model):
    assert not model.encoder.conv_in.weight.data[:, 4:].any()
    for zc in (model.control.zero1, model.control.zero2):
        assert not zc.weight.data.any() and not zc.bias.data.any()
    b = make_bundle(4)
    z = np.random.default_rng(2).standard_normal((4, 8, 8, 4)).astype(np.float32)
    ref = model.predict(z, 300, b)
    rng = np.random.default_rng(9)
    noisy = ConditionBundle(
        rng.random(b.spatial.shape).astype(np.float32),
        rng.standard_normal(b.flow_latent.shape).astype(np.float32),
        rng.standard_normal(b.first_latent.shape).astype(np.float32),
        rng.random(b.occlusion.shape).astype(np.float32),
        b.prompt,
    )
    np.testing.assert_array_equal(model.predict(z, 300, noisy), ref)


def test_control_branch_copy_init(model):
    main = dict(model.encoder.named_parameters())
    for name, p in model.control.encoder.named_parameters():
        if name == "conv_in.weight":
            np.testing.assert_array_equal(p.data[:, :4], main[name].data[:, :4])
            assert not p.data[:, 4:].any()
        else:
            np.testing.assert_array_equal(p.data, main[name].data)


def test_st_attention_context(model):
    n = 5
    b = make_bundle(n)
    z = np.zeros((n, 8, 8, 4), np.float32)
    rec = {}
    model.predict(z, 100, b, record=rec)
    assert sorted(rec) == [0, 1]
    tokens = {0: 64, 1: 16}
    for layer, (k, v) in rec.items():
        assert k.shape[:2] == (n, 2 * tokens[layer]) and v.shape == k.shape
    for layer in model.st_layers():
        assert layer.sources == [(0, 0), (0, 0), (0, 1), (0, 2), (0, 3)]


def test_st_context_rule():
    assert SpatialTemporalAttention.context_frames(1) == [(0, 0)]
    assert SpatialTemporalAttention.context_frames(3) == [(0, 0), (0, 0), (0, 1)]


def test_attention_duplicated_context():
    rng = np.random.default_rng(4)
    q = Tensor(rng.standard_normal((1, 6, 8)))
    k = rng.standard_normal((1, 6, 8))
    v = rng.standard_normal((1, 6, 8))
    single = _attend(q, Tensor(k), Tensor(v)).data
    double = _attend(q, Tensor(np.concatenate([k, k], 1)), Tensor(np.concatenate([v, v], 1))).data
    np.testing.assert_allclose(double, single, atol=1e-12)
    const = np.tile(rng.standard_normal(8), (1, 12, 1))
    out = _attend(q, Tensor(rng.standard_normal((1, 12, 8))), Tensor(const)).data
    np.testing.assert_allclose(out, np.broadcast_to(const[:, :1], out.shape), atol=1e-12)


def test_injection_replaces_context(model):
    b = make_bundle(3)
    rng = np.random.default_rng(5)
    z1 = rng.standard_normal((3, 8, 8, 4)).astype(np.float32)
    z2 = rng.standard_normal((3, 8, 8, 4)).astype(np.float32)
    rec = {}
    model.predict(z1, 200, b, record=rec)
    # with both layers injected, a different latent sees z1's keys/values
    rec2 = {}
    model.predict(z2, 200, b, record=rec2, inject=rec)
    for layer in rec:
        np.testing.assert_array_equal(rec2[layer][0], rec[layer][0])
    assert not np.array_equal(model.predict(z2, 200, b, inject=rec), model.predict(z2, 200, b))


def test_bind_matches_predict(model):
    b = make_bundle(2)
    z = np.random.default_rng(6).standard_normal((2, 8, 8, 4)).astype(np.float32)
    np.testing.assert_array_equal(model.bind(b)(z, 40), model.predict(z, 40, b))
    unc = model.bind(b, embed_prompt(""))(z, 40)
    assert unc.shape == z.shape


def test_checkpoint_roundtrip(tmp_path, model):
    save_checkpoint(model, tmp_path / "ck", extra={"steps": 0})
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == model.config
    b = make_bundle(2)
    z = np.random.default_rng(7).standard_normal((2, 8, 8, 4)).astype(np.float32)
    np.testing.assert_array_equal(back.predict(z, 10, b), model.predict(z, 10, b))


def test_config_from_dict():
    cfg = DenoiserConfig.from_dict({"use_flow": "False", "width": "32"})
    assert cfg.use_flow is False and cfg.width == 32
    with pytest.raises(KeyError):
        DenoiserConfig.from_dict({"depth": "3"})


def test_ablation_flags_ignore_inputs():
    m = Denoiser(DenoiserConfig(use_flow=False, use_occlusion=False, use_first_frame=False))
    rng = np.random.default_rng(8)
    for p in m.parameters():
        p.data = p.data + rng.normal(scale=0.01, size=p.shape).astype(p.dtype)
    b = make_bundle(2)
    z = rng.standard_normal((2, 8, 8, 4)).astype(np.float32)
    other = ConditionBundle(b.spatial, b.flow_latent * 3, b.first_latent - 1, 1 - b.occlusion, b.prompt)
    np.testing.assert_array_equal(m.predict(z, 30, b), m.predict(z, 30, other))


def test_end_to_end_gradcheck():
    m = Denoiser(DenoiserConfig(width=16, width2=16, temb_dim=16, d_txt=32, groups=4, seed=11)).astype(np.float64)
    rng = np.random.default_rng(0)
    # move off the zero init so every path carries gradient
    for p in m.parameters():
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    n = 3
    b = make_bundle(n, hw=(4, 4), seed=1)
    z = rng.standard_normal((n, 4, 4, 4))
    target = rng.standard_normal((n, 4, 4, 4))
    params = m.parameters()

    def loss(*_):
        return mse_loss(m.forward(z, 250, b), target)

    sizes = np.array([p.data.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.choice(sizes.sum(), size=64, replace=False)
    probes = [[int(i - offsets[k]) for i in flat if offsets[k] <= i < offsets[k + 1]] for k in range(len(params))]
    assert gradcheck(loss, params, indices=probes) < 1e-3
