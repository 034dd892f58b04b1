import numpy as np
import pytest

from vidprop.conditions import spatial_conditions
from vidprop.denoiser import Denoiser, DenoiserConfig
from vidprop.diffusion import add_noise, build_schedule, v_target
from vidprop.layers import AdamW
from vidprop.scenes import make_scene
from vidprop.tensorad import mse_loss
from vidprop.training import (
    FULL_PROFILE,
    ClipDataset,
    NumericError,
    SourceClip,
    TrainConfig,
    TrainingSample,
    oracle_predict,
    read_loss_log,
    sample_clip,
    train,
    train_step,
    write_loss_log,
)


def _source(frames=8, size=32, seed=0, kind="translating-square"):
    sc = make_scene(kind, size, frames, seed=seed, square_size=12, square_origin=(6.0, 8.0))
    fr = sc.clip().frames
    return SourceClip(fr, spatial_conditions(fr, "depth", sc), prompt="square", name=f"s{seed}")


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def test_full_profile():
    assert FULL_PROFILE == {"frames": 16, "intervals": (2, 4, 8)}


def test_sample_consecutive():
    ds = ClipDataset([_source(8)])
    s = sample_clip(ds, np.random.default_rng(0), frames=4, intervals=(1,))
    assert np.all(np.diff(s.indices) == 1) and len(s.indices) == 4
    assert s.z0.shape == (4, 4, 4, 4)
    assert len(s.bundle) == 4


def test_sample_interval_two_on_long_clip():
    frames = np.random.default_rng(1).random((30, 16, 16, 3)).astype(np.float32)
    ds = ClipDataset([SourceClip(frames, frames.copy())])
    rng = np.random.default_rng(2)
    starts = set()
    for _ in range(20):
        s = sample_clip(ds, rng, frames=4, intervals=(2,))
        k = s.indices[0]
        assert s.indices == [k, k + 2, k + 4, k + 6]
        assert 0 <= k <= 23
        starts.add(k)
    assert len(starts) > 1


def test_sample_skips_short_clips():
    ds = ClipDataset([_source(4, seed=0), _source(8, seed=1)])
    rng = np.random.default_rng(3)
    for _ in range(6):
        s = sample_clip(ds, rng, frames=4, intervals=(1, 2))
        if s.interval == 2:
            assert s.clip_index == 1
    assert any("clip 0 too short" in n for n in ds.skipped)
    with pytest.raises(ValueError):
        sample_clip(ClipDataset([_source(4)]), rng, frames=4, intervals=(8,))


def test_bundle_provenance_and_first_frame():
    ds = ClipDataset([_source(8)])
    s = ds.build(0, [0, 1, 2, 3])
    assert s.bundle.provenance["flows"].startswith("input:")
    # the flow latent of frame 1 is the first-frame latent (identity warp)
    np.testing.assert_array_equal(s.bundle.flow_latent[0], s.bundle.first_latent[0])
    np.testing.assert_array_equal(s.z0[0], s.bundle.first_latent[0])


def test_oracle_loss_zero_and_nonnegative(sched):
    ds = ClipDataset([_source(8)])
    rng = np.random.default_rng(4)
    m = Denoiser()
    opt = AdamW(m.parameters())
    s = sample_clip(ds, rng, 4, (1,))
    assert train_step(m, opt, s, sched, rng, predict=oracle_predict) == 0.0
    assert train_step(m, opt, s, sched, rng) >= 0.0


def test_nan_aborts(sched):
    ds = ClipDataset([_source(8)])
    s = sample_clip(ds, np.random.default_rng(5), 4, (1,))
    bad = TrainingSample(np.full_like(s.z0, np.nan), s.bundle, 0, s.indices, 1)
    m = Denoiser()
    with pytest.raises(NumericError):
        train_step(m, AdamW(m.parameters()), bad, sched, np.random.default_rng(0))


def test_augmentation_channels_receive_gradient(sched):
    # crafted batch: the flow latent equals the clean target latent
    ds = ClipDataset([_source(8, kind="panning")])
    s = ds.build(0, [0, 1, 2, 3])
    s.bundle.flow_latent[:] = s.z0
    m = Denoiser()
    w = m.encoder.conv_in.weight
    before = w.data[:, 4:8].copy()
    opt = AdamW(m.parameters())
    train_step(m, opt, s, sched, np.random.default_rng(6), p_uncond=0.0)
    assert np.abs(opt.m[m.parameters().index(w)][:, 4:8]).sum() > 0
    assert not np.array_equal(w.data[:, 4:8], before)


def _fixed_eval(model, sample, sched, draws):
    total = 0.0
    for t, eps in draws:
        zt = add_noise(sched, sample.z0, eps, t).astype(np.float32)
        target = np.transpose(v_target(sched, sample.z0, eps, t), (0, 3, 1, 2))
        total += float(mse_loss(model.forward(zt, t, sample.bundle), target).data)
    return total / len(draws)


def test_overfit_single_clip(sched):
    ds = ClipDataset([_source(8)])
    sample = ds.build(0, [0, 1, 2, 3])
    rng = np.random.default_rng(7)
    draws = [(int(t), rng.standard_normal(sample.z0.shape).astype(np.float32)) for t in rng.integers(1, 1001, 16)]
    m = Denoiser(DenoiserConfig(seed=1))
    before = _fixed_eval(m, sample, sched, draws)
    opt = AdamW(m.parameters(), lr=1e-3)
    for _ in range(200):
        train_step(m, opt, sample, sched, rng, p_uncond=0.0)
    after = _fixed_eval(m, sample, sched, draws)
    assert after < 0.5 * before


def test_train_loop_deterministic_and_logged(tmp_path, sched):
    def run():
        ds = ClipDataset([_source(8)])
        m = Denoiser(DenoiserConfig(seed=2))
        return m, train(m, ds, TrainConfig(steps=3, seed=9), sched, log_path=tmp_path / "loss.csv")

    m1, r1 = run()
    m2, r2 = run()
    assert r1.losses == r2.losses
    for a, b in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert read_loss_log(tmp_path / "loss.csv") == r1.losses
    assert (tmp_path / "loss.csv").read_text().startswith("step,loss")


def test_loss_log_roundtrip(tmp_path):
    write_loss_log([0.5, 0.25], tmp_path / "l.csv")
    assert read_loss_log(tmp_path / "l.csv") == [0.5, 0.25]
