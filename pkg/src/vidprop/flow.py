"""Dense optical flow, forward-backward occlusion masks and first-frame warping.

Flow fields are float32 arrays of shape (H, W, 2) holding (u, v) pixel
displacements.  A flow ``F_{a->b}`` lives on frame ``a``'s pixel grid: pixel
``p`` of frame ``a`` corresponds to ``p + F(p)`` in frame ``b``.  Occlusion
masks are bool (H, W) arrays, True = occluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .media import DimensionError, VideoClip, check_frame

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# Horn-Schunck neighbourhood average; the Laplacian is approximated by
# KAPPA * (avg - u) with this kernel.
_HS_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0
_KAPPA = 3.0

DEFAULT_LEVELS = 3
DEFAULT_ITERS = 100
DEFAULT_LAMBDA = 15.0
DEFAULT_WARPS = 1
CONSISTENCY_A = 0.01
CONSISTENCY_B = 0.5
OCCLUSION_FILL = 0.5


@dataclass
class WarpedFrame:
    frame: np.ndarray
    source_index: int = 1
    fill_value: float = OCCLUSION_FILL


def to_gray(frame) -> np.ndarray:
    """Luma in 8-bit intensity units (0..255), float64."""
    return np.asarray(frame, dtype=np.float64)[..., :3] @ LUMA * 255.0


def bilinear_sample(image, x, y):
    """Sample ``image`` (H, W) or (H, W, C) at float coordinates, clamping to
    the image rectangle.  Integer coordinates reproduce pixels exactly."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, W - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, H - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def warp_by_flow(image, flow):
    """Pull ``image`` onto the grid of ``flow``: out(p) = image(p + flow(p))."""
    H, W = flow.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W]
    return bilinear_sample(image, xs + flow[..., 0], ys + flow[..., 1])


def _check_pair(a, b):
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _pyramid(gray, levels):
    pyr = [gray]
    for _ in range(levels - 1):
        blurred = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr[::-1]


def _upsample_flow(flow, shape):
    H, W = shape
    h, w = flow.shape[:2]
    ys = (np.arange(H) + 0.5) * h / H - 0.5
    xs = (np.arange(W) + 0.5) * w / W - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    up = bilinear_sample(flow, xx, yy)
    up[..., 0] *= W / w
    up[..., 1] *= H / h
    return up


def _horn_schunck(a, b, flow, iters, lam, warps):
    alpha = _KAPPA * lam
    u, v = flow[..., 0].copy(), flow[..., 1].copy()
    for _ in range(warps):
        bw = warp_by_flow(b, np.stack([u, v], axis=-1))
        gy_a, gx_a = np.gradient(a)
        gy_b, gx_b = np.gradient(bw)
        ix = 0.5 * (gx_a + gx_b)
        iy = 0.5 * (gy_a + gy_b)
        it = bw - a
        u0, v0 = u.copy(), v.copy()
        denom = alpha + ix * ix + iy * iy
        for _ in range(iters):
            ub = ndimage.correlate(u, _HS_KERNEL, mode="nearest")
            vb = ndimage.correlate(v, _HS_KERNEL, mode="nearest")
            resid = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
            u = ub - ix * resid
            v = vb - iy * resid
    return np.stack([u, v], axis=-1)


def estimate_flow(a, b, levels=DEFAULT_LEVELS, iters=DEFAULT_ITERS, lam=DEFAULT_LAMBDA, warps=DEFAULT_WARPS):
    """Flow from frame ``a`` to frame ``b`` by coarse-to-fine Horn-Schunck.

    ``lam`` weights the smoothness term against brightness constancy, with
    intensities in 8-bit units.  Each pyramid level re-linearises around
    the current estimate ``warps`` times and runs ``iters`` Jacobi sweeps.
    """
    _check_pair(a, b)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pa = _pyramid(to_gray(a), levels)
    pb = _pyramid(to_gray(b), levels)
    flow = np.zeros(pa[0].shape + (2,))
    for k, (ga, gb) in enumerate(zip(pa, pb)):
        if k:
            flow = _upsample_flow(flow, ga.shape)
        flow = _horn_schunck(ga, gb, flow, iters, lam, warps)
    H, W = pa[-1].shape
    flow[..., 0] = np.clip(flow[..., 0], -(W - 1), W - 1)
    flow[..., 1] = np.clip(flow[..., 1], -(H - 1), H - 1)
    return flow.astype(np.float32)


def _consistency(flow, other, a, b):
    H, W = flow.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    f = flow.astype(np.float64)
    tx = xs + f[..., 0]
    ty = ys + f[..., 1]
    outside = (tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)
    g = bilinear_sample(other.astype(np.float64), tx, ty)
    lhs = ((f + g) ** 2).sum(axis=-1)
    rhs = a * ((f**2).sum(axis=-1) + (g**2).sum(axis=-1)) + b
    return outside | (lhs > rhs)


def fb_occlusion(fwd, bwd, a=CONSISTENCY_A, b=CONSISTENCY_B):
    """Forward-backward consistency check.

    ``fwd`` is on frame 1's grid (1 -> i), ``bwd`` on frame i's grid
    (i -> 1).  A pixel is occluded when its round trip does not close:
    ``|F(p) + G(p + F(p))|^2 > a (|F(p)|^2 + |G(p + F(p))|^2) + b``, or when
    ``p + F(p)`` leaves the image.  Returns ``(occ_fwd, occ_bwd)``.
    """
    _check_pair(fwd, bwd)
    return _consistency(fwd, bwd, a, b), _consistency(bwd, fwd, a, b)


def warp_first_frame(first, bwd, occ, fill=OCCLUSION_FILL) -> WarpedFrame:
    """Re-render ``first`` at another frame's geometry via its backward flow."""
    first = check_frame(first)
    _check_pair(first, bwd)
    _check_pair(first, occ)
    out = warp_by_flow(first, bwd).astype(np.float32)
    out[np.asarray(occ, dtype=bool)] = np.float32(fill)
    return WarpedFrame(out, source_index=1, fill_value=fill)


def warp_clip(first, clip_flows, occs, fill=OCCLUSION_FILL, fps=30, interval=1) -> VideoClip:
    """Flow-warped video: frame 1 is ``first``, frame i is ``first`` warped
    with the backward flow i -> 1 and its occlusion mask."""
    if len(clip_flows) != len(occs):
        raise ValueError(f"{len(clip_flows)} flows but {len(occs)} masks")
    if not clip_flows:
        raise ValueError("need at least one flow (identity for frame 1)")
    first = check_frame(first)
    frames = [first.copy()]
    for flow, occ in zip(clip_flows[1:], occs[1:]):
        frames.append(warp_first_frame(first, flow, occ, fill).frame)
    return VideoClip(np.stack(frames), fps=fps, frame_interval=interval)


@dataclass
class ClipFlows:
    """Flows of every frame relative to the first frame of a clip."""

    bwd: np.ndarray  # (N, H, W, 2), frame i -> frame 1
    fwd: np.ndarray  # (N, H, W, 2), frame 1 -> frame i
    occ_bwd: np.ndarray  # (N, H, W) bool
    occ_fwd: np.ndarray  # (N, H, W) bool


def flows_to_first(frames, flow_fn=None, a=CONSISTENCY_A, b=CONSISTENCY_B) -> ClipFlows:
    """Backward/forward flows and occlusions between frame 1 and each frame."""
    frames = np.asarray(frames)
    flow_fn = flow_fn or estimate_flow
    N, H, W = frames.shape[:3]
    bwd = np.zeros((N, H, W, 2), dtype=np.float32)
    fwd = np.zeros((N, H, W, 2), dtype=np.float32)
    occ_b = np.zeros((N, H, W), dtype=bool)
    occ_f = np.zeros((N, H, W), dtype=bool)
    for i in range(1, N):
        fwd[i] = flow_fn(frames[0], frames[i])
        bwd[i] = flow_fn(frames[i], frames[0])
        occ_f[i], occ_b[i] = fb_occlusion(fwd[i], bwd[i], a, b)
    return ClipFlows(bwd, fwd, occ_b, occ_f)


def adjacent_flows(frames, flow_fn=None, a=CONSISTENCY_A, b=CONSISTENCY_B):
    """For each adjacent pair (i, i+1): backward flow on frame i+1's grid
    pointing to frame i, its occlusion mask, and the forward flow i -> i+1."""
    frames = np.asarray(frames)
    flow_fn = flow_fn or estimate_flow
    bwd, occ, fwd = [], [], []
    for i in range(len(frames) - 1):
        f = flow_fn(frames[i], frames[i + 1])
        g = flow_fn(frames[i + 1], frames[i])
        _, occ_g = fb_occlusion(f, g, a, b)
        fwd.append(f)
        bwd.append(g)
        occ.append(occ_g)
    return bwd, occ, fwd


def flow_magnitude(flow) -> np.ndarray:
    return np.hypot(flow[..., 0], flow[..., 1])
