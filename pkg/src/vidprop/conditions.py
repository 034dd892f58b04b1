"""Spatial condition images: Canny edge maps and ingested/synthetic depth."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .media import DimensionError, FormatError, check_frame, luminance, load_gray, read_tensor

KINDS = ("edge", "depth")
CANNY_SIGMA = 1.4
CANNY_LOW = 0.1
CANNY_HIGH = 0.2

# neighbour offsets (dy, dx) along the quantised gradient direction
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass
class ConditionImage:
    kind: str
    frame: np.ndarray  # (H, W, 3) float32 in [0, 1]
    flagged: bool = False
    note: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")


def _gradients(gray, sigma):
    blurred = ndimage.gaussian_filter(gray, sigma, mode="nearest") if sigma > 0 else gray
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    return gx, gy


def _direction_bins(gx, gy):
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    return (np.floor((angle + 22.5) / 45.0).astype(int)) % 4


def non_max_suppression(mag, gx, gy):
    """Keep pixels that are local maxima across the edge.

    Ties are broken one-sidedly (``>=`` the lower neighbour, ``>`` the upper
    one) so a symmetric ridge two pixels wide thins to a single pixel.
    """
    H, W = mag.shape
    padded = np.pad(mag, 1)
    bins = _direction_bins(gx, gy)
    out = np.zeros_like(mag)
    for b, (dy, dx) in enumerate(_DIRECTIONS):
        sel = bins == b
        lower = padded[1 - dy : 1 - dy + H, 1 - dx : 1 - dx + W]
        upper = padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
        keep = sel & (mag >= lower) & (mag > upper)
        out[keep] = mag[keep]
    return out


def hysteresis(nms, low, high):
    weak = nms >= low
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    if count == 0:
        return np.zeros_like(weak)
    strong_labels = np.unique(labels[(nms >= high) & weak])
    return np.isin(labels, strong_labels[strong_labels > 0])


def canny_edges(frame, low=CANNY_LOW, high=CANNY_HIGH, sigma=CANNY_SIGMA) -> ConditionImage:
    """Binary edge map replicated to 3 channels.

    Thresholds apply to the gradient magnitude divided by its maximum, so
    they are fractions in (0, 1) regardless of image contrast.
    """
    if not 0 < low < high:
        raise ValueError(f"need 0 < low < high, got low={low}, high={high}")
    frame = check_frame(frame)
    gx, gy = _gradients(luminance(frame).astype(np.float64), sigma)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        edges = np.zeros(mag.shape, dtype=bool)
    else:
        edges = hysteresis(non_max_suppression(mag / peak, gx, gy), low, high)
    img = np.repeat(edges[..., None], 3, axis=-1).astype(np.float32)
    return ConditionImage("edge", img)


def normalize_depth(depth) -> ConditionImage:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise DimensionError(f"depth must be single-channel (H, W), got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise FormatError("depth contains non-finite values")
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        warnings.warn("constant depth map; using 0.5 everywhere", RuntimeWarning, stacklevel=2)
        norm = np.full(d.shape, 0.5)
        flagged, note = True, "constant depth"
    else:
        norm = (d - lo) / (hi - lo)
        flagged, note = False, ""
    img = np.repeat(norm[..., None], 3, axis=-1).astype(np.float32)
    return ConditionImage("depth", img, flagged, note)


def load_or_synthesize_depth(source, index: int = 0) -> ConditionImage:
    """Depth from a P5 / rank-2 FVT1 file, or frame ``index`` of a synthetic scene."""
    from .scenes import Scene

    if isinstance(source, Scene):
        return normalize_depth(source.depth(index))
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"depth file {path} not found")
    head = path.read_bytes()[:4]
    if head == b"FVT1":
        arr = read_tensor(path)
        if arr.ndim != 2:
            raise FormatError(f"{path}: depth FVT1 must be rank 2, got rank {arr.ndim}")
    elif head[:2] == b"P5":
        arr = load_gray(path)
    else:
        raise FormatError(f"{path}: depth must be P5 or FVT1")
    return normalize_depth(arr)


def encode_condition(cond: ConditionImage, model) -> np.ndarray:
    """Latent c (H/8, W/8, 4) from the model's trainable condition encoder."""
    frame = check_frame(cond.frame)
    c = model.condition_latent(frame[None])
    return np.transpose(c.data[0], (1, 2, 0)).astype(np.float32)


def spatial_conditions(frames, control="canny", depth=None) -> np.ndarray:
    """Condition images (N, H, W, 3) for a clip.

    ``depth`` is a sequence of depth sources (paths, arrays or a Scene) used
    when ``control == "depth"``.
    """
    frames = np.asarray(frames)
    if control == "canny":
        return np.stack([canny_edges(f).frame for f in frames])
    if control == "depth":
        if depth is None:
            raise ValueError("depth control needs depth sources")
        from .scenes import Scene

        out = []
        for i in range(len(frames)):
            if isinstance(depth, Scene):
                out.append(load_or_synthesize_depth(depth, i).frame)
            elif isinstance(depth[i], (str, Path)):
                out.append(load_or_synthesize_depth(depth[i]).frame)
            else:
                out.append(normalize_depth(depth[i]).frame)
        result = np.stack(out)
        if result.shape[:3] != frames.shape[:3]:
            raise DimensionError(f"depth {result.shape[:3]} does not match frames {frames.shape[:3]}")
        return result
    raise ValueError(f"unknown control kind {control!r}; use 'canny' or 'depth'")
