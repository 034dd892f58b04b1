"""Clip sampling, condition bundles and the v-prediction training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import LatentCodec
from .denoiser import ConditionBundle, Denoiser, embed_prompt, resize_mask
from .diffusion import NoiseSchedule, add_noise, build_schedule, v_target
from .flow import ClipFlows, estimate_flow, fb_occlusion, warp_clip
from .layers import AdamW
from .media import ensure_dir, write_manifest
from .tensorad import Tape, Tensor, mse_loss

# desk-scale defaults; FULL_PROFILE mirrors the full-size recipe
DEFAULT_FRAMES = 4
DEFAULT_INTERVALS = (1, 2)
FULL_PROFILE = {"frames": 16, "intervals": (2, 4, 8)}


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    frames: int = DEFAULT_FRAMES
    intervals: tuple = DEFAULT_INTERVALS
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    color_aug: bool = True
    seed: int = 0

    def as_dict(self):
        d = dict(vars(self))
        d["intervals"] = ",".join(str(i) for i in self.intervals)
        return d


def make_bundle(first, flows: ClipFlows, spatial, prompt, codec: LatentCodec, mask_resize="avg", provenance=None) -> ConditionBundle:
    """Condition bundle for a clip whose geometry is described by ``flows``.

    ``first`` is warped with the backward flows into the flow-warped video,
    which is encoded as the flow latent.  ``first`` may be an edited frame
    while ``flows`` and ``spatial`` come from the input clip.
    """
    warped = warp_clip(first, list(flows.bwd), list(flows.occ_bwd)).frames
    f = codec.to_model(codec.encode_clip(warped))
    first_lat = np.repeat(codec.to_model(codec.encode(first))[None], len(warped), axis=0)
    occ = resize_mask(flows.occ_bwd, mode=mask_resize)
    if isinstance(prompt, str):
        prompt = embed_prompt(prompt)
    return ConditionBundle(np.asarray(spatial, np.float32), f, first_lat, occ, prompt, dict(provenance or {}))


@dataclass
class SourceClip:
    frames: np.ndarray  # (F, H, W, 3)
    spatial: np.ndarray  # (F, H, W, 3) condition images
    prompt: str = ""
    name: str = ""


@dataclass
class TrainingSample:
    z0: np.ndarray  # (N, h, w, 4) model-space latents
    bundle: ConditionBundle
    clip_index: int
    indices: list
    interval: int


class ClipDataset:
    """Source clips plus a cache of flows between frame pairs."""

    def __init__(self, clips, codec: LatentCodec | None = None, flow_fn=None, mask_resize="avg"):
        self.clips = list(clips)
        if not self.clips:
            raise ValueError("dataset needs at least one clip")
        self.codec = codec or LatentCodec()
        self.flow_fn = flow_fn or estimate_flow
        self.mask_resize = mask_resize
        self.skipped: list = []
        self._flows: dict = {}

    def __len__(self):
        return len(self.clips)

    def pair_flow(self, ci, a, b):
        """(fwd a->b, bwd b->a, occ_fwd, occ_bwd) for frames a, b of clip ci."""
        key = (ci, a, b)
        if key not in self._flows:
            fr = self.clips[ci].frames
            fwd = self.flow_fn(fr[a], fr[b])
            bwd = self.flow_fn(fr[b], fr[a])
            occ_f, occ_b = fb_occlusion(fwd, bwd)
            self._flows[key] = (fwd, bwd, occ_f, occ_b)
        return self._flows[key]

    def clip_flows(self, ci, indices) -> ClipFlows:
        H, W = self.clips[ci].frames.shape[1:3]
        n = len(indices)
        out = ClipFlows(
            np.zeros((n, H, W, 2), np.float32),
            np.zeros((n, H, W, 2), np.float32),
            np.zeros((n, H, W), bool),
            np.zeros((n, H, W), bool),
        )
        for k in range(1, n):
            out.fwd[k], out.bwd[k], out.occ_fwd[k], out.occ_bwd[k] = self.pair_flow(ci, indices[0], indices[k])
        return out

    def build(self, ci, indices, interval=1, color=None) -> TrainingSample:
        src = self.clips[ci]
        frames = src.frames[indices].astype(np.float32)
        if color is not None:
            perm, gain = color
            frames = np.clip(frames[..., perm] * gain, 0.0, 1.0).astype(np.float32)
        flows = self.clip_flows(ci, indices)
        bundle = make_bundle(
            frames[0], flows, src.spatial[indices], src.prompt, self.codec, self.mask_resize,
            provenance={"flows": f"input:{src.name or ci}", "spatial": f"input:{src.name or ci}"},
        )
        z0 = self.codec.to_model(self.codec.encode_clip(frames))
        return TrainingSample(z0, bundle, ci, list(indices), interval)


def sample_clip(dataset: ClipDataset, rng, frames=DEFAULT_FRAMES, intervals=DEFAULT_INTERVALS, color_aug=False) -> TrainingSample:
    """Draw a clip, an interval and a start; frames are start + j * interval.

    Clip/interval combinations that do not fit are skipped and noted in
    ``dataset.skipped``; if none fit at all a ValueError is raised.
    """
    options = [(ci, iv) for ci in range(len(dataset)) for iv in intervals]
    fitting = []
    for ci, iv in options:
        if (frames - 1) * iv + 1 <= len(dataset.clips[ci].frames):
            fitting.append((ci, iv))
        else:
            note = f"clip {ci} too short for {frames} frames at interval {iv}"
            if note not in dataset.skipped:
                dataset.skipped.append(note)
    if not fitting:
        raise ValueError("no clip is long enough for the requested frames/intervals")
    ci = int(rng.integers(len(dataset)))
    valid_iv = [iv for c, iv in fitting if c == ci]
    if not valid_iv:
        ci, _ = fitting[int(rng.integers(len(fitting)))]
        valid_iv = [iv for c, iv in fitting if c == ci]
    iv = int(valid_iv[int(rng.integers(len(valid_iv)))])
    span = (frames - 1) * iv
    start = int(rng.integers(len(dataset.clips[ci].frames) - span))
    indices = [start + j * iv for j in range(frames)]
    color = None
    if color_aug:
        color = (rng.permutation(3), rng.uniform(0.85, 1.15, size=3).astype(np.float32))
    return dataset.build(ci, indices, iv, color)


def _nchw(a):
    return np.transpose(a, (0, 3, 1, 2))


def train_step(model: Denoiser, optimizer: AdamW, sample: TrainingSample, schedule: NoiseSchedule, rng, p_uncond=0.1, predict=None) -> float:
    """One optimizer update on the v-prediction loss; returns the loss.

    ``predict(z_t, t, bundle, target)`` may replace the model forward (used
    to check the loss wiring with an oracle).
    """
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(sample.z0.shape).astype(np.float32)
    z_t = add_noise(schedule, sample.z0, eps, t).astype(np.float32)
    target = _nchw(v_target(schedule, sample.z0, eps, t)).astype(np.float32)
    bundle = sample.bundle
    if rng.random() < p_uncond:
        bundle = bundle.with_prompt(embed_prompt(""))
    params = model.parameters()
    with Tape() as tape:
        v = model.forward(z_t, t, bundle) if predict is None else predict(z_t, t, bundle, target)
        loss = mse_loss(v, target)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss at t={t}: |z_t|max={np.abs(z_t).max():.3g}, "
                f"|v|max={np.nanmax(np.abs(v.data)) if np.isfinite(v.data).any() else float('nan'):.3g}"
            )
        grads = tape.backward(loss, params)
    for p, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for a parameter of shape {p.shape} at t={t}")
    optimizer.step(grads)
    return value


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def train(model: Denoiser, dataset: ClipDataset, config: TrainConfig, schedule=None, log_path=None, callback=None) -> TrainResult:
    schedule = schedule or build_schedule()
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult()
    for step in range(config.steps):
        sample = sample_clip(dataset, rng, config.frames, config.intervals, config.color_aug)
        loss = train_step(model, opt, sample, schedule, rng, config.p_uncond)
        result.losses.append(loss)
        if callback is not None:
            callback(step, loss)
    result.skipped = list(dataset.skipped)
    if log_path is not None:
        write_loss_log(result.losses, log_path)
    return result


def write_loss_log(losses, path):
    ensure_dir(Path(path).parent)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def read_loss_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def write_train_config(config: TrainConfig, path):
    write_manifest(config.as_dict(), Path(path))


def oracle_predict(z_t, t, bundle, target):
    """Returns the exact target; the loss must then be zero."""
    return Tensor(target)
