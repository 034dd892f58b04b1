"""Edit the first frame, propagate it through the clip, chain batches.

Generation only ever derives flows, occlusions and spatial conditions from
the *input* clip; the edited first frame enters solely through the
flow-warped video.  Long clips are processed as overlapping batches of key
frames whose last frame seeds the next batch, with every generated frame
colour-calibrated to the edited first frame.  Frames between key frames are
filled in by flow-based interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import LatentCodec
from .denoiser import embed_prompt
from .diffusion import DEFAULT_STEPS, GUIDANCE_SCALE, ddim_invert, ddim_sample, guided
from .flow import adjacent_flows, estimate_flow, flows_to_first, warp_by_flow
from .media import DimensionError, FrameStats, VideoClip, check_frame, frame_stats, load_frame, luminance, write_manifest
from .training import make_bundle

EDITORS = ("identity", "colormap", "file")


# ---------------------------------------------------------------------------
# first-frame editors


def hue_rotation(degrees):
    """3x3 matrix rotating colours about the grey axis."""
    th = math.radians(degrees)
    k = np.ones(3) / math.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K


@dataclass
class EditSpec:
    """``editor`` is "identity", "colormap" or "file:<path>".

    colormap params: ``hue`` (degrees), ``gain`` and ``bias`` (3-vectors);
    out = clip(rotate_hue(x) * gain + bias).
    """

    editor: str = "identity"
    target_prompt: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = self.editor.split(":", 1)[0]
        if kind not in EDITORS:
            raise ValueError(f"unknown editor {self.editor!r}; use identity, colormap or file:<path>")
        if kind == "file" and not self.editor[5:]:
            raise ValueError("file editor needs a path: file:<path>")

    @property
    def kind(self):
        return self.editor.split(":", 1)[0]

    def apply(self, frame) -> np.ndarray:
        frame = check_frame(frame)
        if self.kind == "identity":
            return frame.copy()
        if self.kind == "colormap":
            m = hue_rotation(float(self.params.get("hue", 0.0)))
            gain = np.asarray(self.params.get("gain", (1.0, 1.0, 1.0)), dtype=np.float64)
            bias = np.asarray(self.params.get("bias", (0.0, 0.0, 0.0)), dtype=np.float64)
            out = (frame.astype(np.float64) @ m.T) * gain + bias
            return np.clip(out, 0.0, 1.0).astype(np.float32)
        edited = load_frame(self.editor[5:])
        if edited.shape != frame.shape:
            raise DimensionError(f"edited frame {edited.shape} does not match input {frame.shape}")
        return edited


# ---------------------------------------------------------------------------
# batch plans


@dataclass
class BatchPlan:
    interval: int = 4
    frames_per_batch: int = 16
    batches: int = 1

    def __post_init__(self):
        if self.interval < 1 or self.frames_per_batch < 2 or self.batches < 1:
            raise ValueError(f"invalid plan {self}")

    @property
    def num_keys(self) -> int:
        return self.batches * (self.frames_per_batch - 1) + 1

    @property
    def output_length(self) -> int:
        return (self.num_keys - 1) * self.interval + 1

    def key_indices(self, n_input: int):
        """Input frame index of every key frame, and notes on any adjustment.

        A final key that overshoots the clip by less than one interval is
        clamped to the last input frame; keys beyond that are dropped.
        """
        notes = []
        idx = [k * self.interval for k in range(self.num_keys)]
        if idx[-1] > n_input - 1:
            if idx[-1] - (n_input - 1) < self.interval:
                notes.append(f"last key frame clamped from {idx[-1]} to {n_input - 1}")
                idx[-1] = n_input - 1
            else:
                keep = [i for i in idx if i <= n_input - 1]
                notes.append(f"plan needs {len(idx)} key frames, input has room for {len(keep)}; truncated")
                idx = keep
        return idx, notes

    def batch_slices(self, num_keys: int):
        """Key-frame positions of each batch; consecutive batches share one frame."""
        step = self.frames_per_batch - 1
        out = []
        start = 0
        while start < num_keys - 1:
            out.append(list(range(start, min(start + self.frames_per_batch, num_keys))))
            start += step
        return out or [[0]]


# ---------------------------------------------------------------------------
# colour calibration


@dataclass
class Calibrated:
    frame: np.ndarray
    pre_clamp: np.ndarray
    flagged_channels: list


def _luma_stats(frame) -> FrameStats:
    y = luminance(frame).astype(np.float64)
    return FrameStats(np.array([y.mean()]), np.array([y.std()]))


def calibrate(frame, ref: FrameStats, per_channel=True, clamp=True) -> Calibrated:
    """Match the frame's mean/std to ``ref`` (per channel or on luma)."""
    x = np.asarray(frame, dtype=np.float64)
    if per_channel:
        st = frame_stats(x)
        mean, std, rmean, rstd = st.mean, st.std, np.asarray(ref.mean), np.asarray(ref.std)
    else:
        if np.size(ref.mean) != 1:
            raise ValueError("luma calibration needs luma reference stats (see reference_stats)")
        st = _luma_stats(x)
        mean, std = st.mean, st.std
        rmean, rstd = np.asarray(ref.mean).ravel(), np.asarray(ref.std).ravel()
    flagged = [int(c) for c in np.nonzero(std <= 1e-12)[0]]
    safe = np.where(std > 1e-12, std, 1.0)
    scale = np.where(std > 1e-12, rstd / safe, 1.0)
    shift = np.where(std > 1e-12, rmean - mean * scale, 0.0)
    pre = x * scale + shift
    out = np.clip(pre, 0.0, 1.0) if clamp else pre
    return Calibrated(out.astype(np.float32), pre, flagged)


def reference_stats(frame, per_channel=True) -> FrameStats:
    return frame_stats(frame) if per_channel else _luma_stats(frame)


def color_calibrate(frame, ref_stats: FrameStats, per_channel=True, clamp=True) -> np.ndarray:
    return calibrate(frame, ref_stats, per_channel, clamp).frame


# ---------------------------------------------------------------------------
# propagation


class FlowCopyModel:
    """Oracle whose clean-latent estimate is always the flow latent.

    v = (alpha z - f) / sigma makes every DDIM step predict x0 = f, so
    sampling returns the encoded flow-warped video.  Useful for isolating
    the codec/warping path from the learned denoiser.
    """

    def __init__(self, schedule):
        self.schedule = schedule

    def bind(self, bundle, prompt=None):
        f = np.asarray(bundle.flow_latent, dtype=np.float64)

        def fn(z, t, record=None, inject=None):
            a, s = self.schedule.coeffs(t)
            return ((a * np.asarray(z, np.float64) - f) / s).astype(np.float32)

        return fn


@dataclass
class Propagator:
    model: object
    schedule: object
    codec: LatentCodec = field(default_factory=LatentCodec)
    steps: int = DEFAULT_STEPS
    cfg_scale: float = GUIDANCE_SCALE
    injection: bool = True
    refine: int = 50
    prompt: str = ""
    mask_resize: str = "avg"
    flow_fn: object = None

    def __post_init__(self):
        self.flow_fn = self.flow_fn or estimate_flow


@dataclass
class BatchResult:
    frames: np.ndarray
    notes: list
    provenance: dict


class _NoTimer:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _no_timer(name):
    return _NoTimer()


def propagate_batch(prop: Propagator, input_keys, edited_first, spatial, rng, flows=None, timer=None) -> BatchResult:
    """Generate all key frames of one batch jointly.

    Flows and occlusions are computed from ``input_keys``; ``edited_first``
    is warped along them to build the flow latent.  With injection on, the
    input keys are first DDIM-inverted (conditional branch only) and their
    self-attention keys/values replace the sampler's at matching steps.
    """
    input_keys = np.asarray(input_keys, dtype=np.float32)
    edited_first = check_frame(edited_first)
    if edited_first.shape != input_keys.shape[1:]:
        raise DimensionError(f"edited first frame {edited_first.shape} does not match input {input_keys.shape[1:]}")
    if len(spatial) != len(input_keys):
        raise DimensionError(f"{len(spatial)} condition images for {len(input_keys)} key frames")
    notes = []
    codec = prop.codec
    timer = timer or _no_timer
    with timer("flow"):
        flows = flows if flows is not None else flows_to_first(input_keys, prop.flow_fn)
    prov = {"flows": "input", "spatial": "input", "occlusion": "input"}
    with timer("warping"):
        bundle = make_bundle(edited_first, flows, spatial, prop.prompt, codec, prop.mask_resize, prov)

    with timer("inversion"):
        store = _invert_input(prop, input_keys, flows, spatial, prov, notes) if prop.injection else None

    with timer("keyframe_sampling"):
        cond = prop.model.bind(bundle)
        uncond = prop.model.bind(bundle, embed_prompt("")) if prop.cfg_scale != 1.0 else None
        model_fn = guided(cond, uncond, prop.cfg_scale)
        z_T = rng.standard_normal(bundle.flow_latent.shape).astype(np.float32)
        z0 = ddim_sample(prop.schedule, model_fn, z_T, prop.steps, store)
        frames = codec.decode_clip(codec.from_model(z0))
    return BatchResult(frames, notes, bundle.provenance)


def _invert_input(prop, input_keys, flows, spatial, prov, notes):
    """DDIM-invert the input keys; None (with a note) if nothing was recorded."""
    codec = prop.codec
    bundle_in = make_bundle(input_keys[0], flows, spatial, prop.prompt, codec, prop.mask_resize, prov)
    z0_in = codec.to_model(codec.encode_clip(input_keys))
    _, store = ddim_invert(prop.schedule, prop.model.bind(bundle_in), z0_in, prop.steps, refine=prop.refine)
    if len(store) == 0:
        notes.append("no attention maps recorded; sampling without injection")
        return None
    return store


# ---------------------------------------------------------------------------
# autoregressive runs


@dataclass
class RunReport:
    key_indices: list
    batches: list  # key-frame positions per batch
    notes: list
    first_means: list  # luma mean of the first frame fed to each batch
    pre_clamp_means: list  # luma mean of each batch's last frame before clamping
    calibration: bool
    provenance: list


def run_autoregressive(
    prop: Propagator,
    frames,
    edit: EditSpec,
    plan: BatchPlan,
    spatial,
    seed: int = 0,
    calibration: bool = True,
    per_channel: bool = True,
    timer=None,
):
    """Generate every key frame of ``plan``; returns (keys, report).

    Batch 1 starts from the edited first input frame; each later batch
    starts from the previous batch's (calibrated) last frame.
    """
    frames = np.asarray(frames, dtype=np.float32)
    spatial = np.asarray(spatial, dtype=np.float32)
    if len(spatial) != len(frames):
        raise DimensionError(f"{len(spatial)} condition images for {len(frames)} frames")
    key_idx, notes = plan.key_indices(len(frames))
    slices = plan.batch_slices(len(key_idx))
    rng = np.random.default_rng(seed)
    edited = edit.apply(frames[0])
    ref = reference_stats(edited, per_channel)
    keys = [None] * len(key_idx)
    first = edited
    first_means, pre_means, provs = [], [], []
    for b, sl in enumerate(slices):
        idx = [key_idx[k] for k in sl]
        first_means.append(float(luminance(first).mean()))
        res = propagate_batch(prop, frames[idx], first, spatial[idx], rng, timer=timer)
        notes.extend(f"batch {b}: {n}" for n in res.notes)
        provs.append(res.provenance)
        out = []
        for j, fr in enumerate(res.frames):
            if calibration:
                cal = calibrate(fr, ref, per_channel)
                out.append(cal.frame)
                if cal.flagged_channels:
                    notes.append(f"batch {b} frame {j}: zero-std channels {cal.flagged_channels} left as is")
                if j == len(res.frames) - 1:
                    pre_means.append(float(luminance(cal.pre_clamp).mean()))
            else:
                out.append(fr)
                if j == len(res.frames) - 1:
                    pre_means.append(float(luminance(fr).mean()))
        start = 0 if b == 0 else 1
        for j in range(start, len(sl)):
            keys[sl[j]] = out[j]
        first = keys[sl[-1]]
    report = RunReport(key_idx, slices, notes, first_means, pre_means, calibration, provs)
    return np.stack(keys), report


# ---------------------------------------------------------------------------
# interpolation and metrics


def interpolate_nonkeys(keys, interval: int, flows=None):
    """Fill ``interval - 1`` frames between adjacent keys.

    ``flows`` is a list of (F01, F10) pairs per adjacent key pair.  Each
    intermediate at fraction t pulls from both keys with the flows
    approximated as F_t0 = -(1-t) t F01 + t^2 F10 and
    F_t1 = (1-t)^2 F01 - t (1-t) F10, then blends (1-t, t).  Without
    flows the frames are a plain cross-fade.  Returns (frames, flagged).
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    keys = np.asarray(keys, dtype=np.float32)
    flagged = flows is None
    if flows is not None and len(flows) != len(keys) - 1:
        raise ValueError(f"need {len(keys) - 1} flow pairs, got {len(flows)}")
    out = [keys[0]]
    for k in range(len(keys) - 1):
        a, b = keys[k].astype(np.float64), keys[k + 1].astype(np.float64)
        for j in range(1, interval):
            t = j / interval
            if flows is None:
                mid = (1 - t) * a + t * b
            else:
                f01, f10 = (np.asarray(f, np.float64) for f in flows[k])
                ft0 = -(1 - t) * t * f01 + t * t * f10
                ft1 = (1 - t) ** 2 * f01 - t * (1 - t) * f10
                mid = (1 - t) * warp_by_flow(a, ft0) + t * warp_by_flow(b, ft1)
            out.append(mid.astype(np.float32))
        out.append(keys[k + 1])
    return np.stack(out), flagged


def key_flows(frames, flow_fn=None):
    """(F01, F10) for each adjacent pair of frames."""
    flow_fn = flow_fn or estimate_flow
    return [(flow_fn(frames[i], frames[i + 1]), flow_fn(frames[i + 1], frames[i])) for i in range(len(frames) - 1)]


def temporal_consistency(clip, bwd_flows, occs):
    """Mean squared error between frame i+1 and frame i warped onto it.

    ``bwd_flows[i]`` lives on frame i+1's grid and points into frame i;
    ``occs[i]`` marks the pixels to ignore.  Returns (score, skipped pairs).
    """
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    if len(bwd_flows) != len(frames) - 1 or len(occs) != len(frames) - 1:
        raise ValueError("need one flow and mask per adjacent pair")
    errs, skipped = [], []
    for i in range(len(frames) - 1):
        valid = ~np.asarray(occs[i], dtype=bool)
        if not valid.any():
            skipped.append(i)
            continue
        warped = warp_by_flow(frames[i].astype(np.float64), np.asarray(bwd_flows[i], np.float64))
        diff = (frames[i + 1].astype(np.float64) - warped) ** 2
        errs.append(float(diff[valid].mean()))
    score = float(np.mean(errs)) if errs else float("nan")
    return score, skipped


def input_consistency_flows(frames, flow_fn=None):
    """Backward flows and occlusions between adjacent input frames."""
    bwd, occ, _ = adjacent_flows(frames, flow_fn)
    return bwd, occ


def write_run_manifest(path, entries: dict):
    write_manifest({k: v for k, v in entries.items()}, Path(path))
