"""Frames, clips and the small binary formats they travel in.

Frames are float32 arrays of shape (H, W, 3) with values in [0, 1].  Clips
stack frames into (N, H, W, 3).  Everything on disk is one of:

* binary PPM (P6) for colour frames, PGM (P5) for masks and depth,
* ``FVT1`` raw tensors: magic, u32 rank, rank x u32 dims, f32 LE payload,
* ``PIEH`` flow files (Middlebury layout): magic, u32 w, u32 h, (u, v) f32 pairs,
* ``key=value`` UTF-8 manifests.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_SIDE = 16
LUMA = np.array([0.299, 0.587, 0.114])

__all__ = [
    "FormatError",
    "DimensionError",
    "Frame",
    "VideoClip",
    "FrameStats",
    "check_frame",
    "load_frame",
    "save_frame",
    "load_gray",
    "save_gray",
    "read_tensor",
    "write_tensor",
    "read_tensor_bundle",
    "write_tensor_bundle",
    "read_flow",
    "write_flow",
    "read_manifest",
    "write_manifest",
    "load_clip",
    "save_clip",
    "frame_stats",
    "luminance",
]


class FormatError(ValueError):
    """Malformed file header or payload."""


class DimensionError(ValueError):
    """Array dimensions violate a frame or grid invariant."""


# A Frame is just a validated (H, W, 3) float32 array.
Frame = np.ndarray


def check_frame(frame, *, min_side: int = MIN_SIDE) -> np.ndarray:
    """Validate and return ``frame`` as a float32 (H, W, 3) array."""
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) frame, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < min_side or w < min_side:
        raise DimensionError(f"frame {h}x{w} is smaller than {min_side}x{min_side}")
    if h % 8 or w % 8:
        raise DimensionError(f"frame {h}x{w} is not divisible by 8")
    if not np.all(np.isfinite(arr)):
        raise ValueError("frame contains non-finite values")
    return arr


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, H, W, 3)
    fps: int = 30
    frame_interval: int = 1

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise DimensionError(f"clip needs shape (N>=1, H, W, 3), got {frames.shape}")
        check_frame(frames[0])
        self.frames = frames
        if self.frame_interval < 1:
            raise ValueError("frame_interval must be a positive integer")

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def shape(self):
        return self.frames.shape[1:3]


@dataclass
class FrameStats:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.zeros(3))


def frame_stats(frame) -> FrameStats:
    """Per-channel population mean and standard deviation (float64)."""
    arr = np.asarray(frame, dtype=np.float64).reshape(-1, 3)
    return FrameStats(mean=arr.mean(axis=0), std=arr.std(axis=0))


def luminance(frame) -> np.ndarray:
    return np.asarray(frame, dtype=np.float64) @ LUMA


# --------------------------------------------------------------------------
# PPM / PGM


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, got {data[:2]!r}")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise FormatError(f"{path}: bad header token {tok!r}")
        tokens.append(int(tok))
    pos += 1  # exactly one whitespace byte before the raster
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    raster = data[pos:]
    if len(raster) < w * h * channels:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, need {w * h * channels}")
    arr = np.frombuffer(raster[: w * h * channels], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)


def _quantize(values) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def load_frame(path) -> np.ndarray:
    """Load a P6 PPM or a rank-3 FVT1 tensor as a validated frame."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"FVT1":
        arr = read_tensor(path)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise FormatError(f"{path}: FVT1 frame must have dims (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: non-finite values in frame tensor")
        arr = np.clip(arr, 0.0, 1.0)
    elif head[:2] == b"P6":
        arr = _read_netpbm(path, b"P6").astype(np.float32) / np.float32(255.0)
    else:
        raise FormatError(f"{path}: not a P6 PPM or FVT1 tensor")
    return check_frame(arr)


def save_frame(frame, path) -> None:
    arr = check_frame(frame)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(arr).tobytes())


def load_gray(path) -> np.ndarray:
    """Load a P5 PGM as float32 (H, W) in [0, 1]."""
    return _read_netpbm(path, b"P5").astype(np.float32) / np.float32(255.0)


def save_gray(image, path) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DimensionError(f"expected (H, W) image, got {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.float32)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(arr).tobytes())


# --------------------------------------------------------------------------
# raw tensors and flows


def write_tensor(array, path) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"FVT1")
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"FVT1":
        raise FormatError(f"{path}: bad FVT1 magic {data[:4]!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated FVT1 header")
    (rank,) = struct.unpack_from("<I", data, 4)
    head = 8 + 4 * rank
    if len(data) < head:
        raise FormatError(f"{path}: truncated FVT1 dims")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) != head + 4 * count:
        raise FormatError(f"{path}: payload is {len(data) - head} bytes, expected {4 * count}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=head)
    return arr.reshape(dims).astype(np.float32)


def write_tensor_bundle(tensors: dict, directory, manifest_name="manifest.txt", extra=None) -> None:
    """Write each named array to ``<name>.fvt`` plus a name=file manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        fname = f"{name}.fvt"
        write_tensor(tensors[name], directory / fname)
        entries[name] = fname
    if extra:
        entries.update({f"meta.{k}": v for k, v in extra.items()})
    write_manifest(entries, directory / manifest_name)


def read_tensor_bundle(directory, manifest_name="manifest.txt"):
    """Inverse of :func:`write_tensor_bundle`; returns (tensors, meta)."""
    directory = Path(directory)
    entries = read_manifest(directory / manifest_name)
    tensors, meta = {}, {}
    for key, value in entries.items():
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            tensors[key] = read_tensor(directory / value)
    return tensors, meta


def write_flow(flow, path) -> None:
    arr = np.ascontiguousarray(flow, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimensionError(f"flow must be (H, W, 2), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PIEH")
        fh.write(struct.pack("<II", w, h))
        fh.write(arr.tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"PIEH":
        raise FormatError(f"{path}: bad flow magic {data[:4]!r}")
    w, h = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 8 * w * h:
        raise FormatError(f"{path}: flow payload size mismatch for {w}x{h}")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return arr.astype(np.float32)


# --------------------------------------------------------------------------
# manifests and clip directories


def write_manifest(entries: dict, path) -> None:
    lines = []
    for key, value in entries.items():
        key = str(key)
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"manifest entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> dict:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.ppm"


def save_clip(clip: VideoClip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        save_frame(frame, directory / frame_name(i))
    write_manifest(
        {"fps": int(clip.fps), "interval": int(clip.frame_interval), "frames": len(clip)},
        directory / "clip.txt",
    )


def load_clip(directory) -> VideoClip:
    directory = Path(directory)
    manifest_path = directory / "clip.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{directory}: missing clip.txt manifest")
    meta = read_manifest(manifest_path)
    try:
        n = int(meta["frames"])
        fps = int(meta.get("fps", 30))
        interval = int(meta.get("interval", 1))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: bad manifest ({exc})") from exc
    frames = [load_frame(directory / frame_name(i)) for i in range(n)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DimensionError(f"{directory}: frames have mixed shapes {sorted(shapes)}")
    return VideoClip(np.stack(frames), fps=fps, frame_interval=interval)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
