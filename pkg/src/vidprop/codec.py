"""A fixed, deliberately lossy linear stand-in for a latent autoencoder.

``encode`` folds every 8x8x3 pixel patch into a 192-vector and projects it
onto 4 orthonormal directions; ``decode`` maps back with the pseudo-inverse
and clamps to [0, 1].  The first direction is the normalised all-ones
vector, so the mean of each patch survives exactly; the other three are
seeded random directions orthogonal to it.  Everything else (fine texture
and most of the per-channel colour) is discarded, which is what makes
repeated encode/decode cycles drift towards grey.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .media import DimensionError, VideoClip, check_frame

PATCH = 8
PATCH_DIM = PATCH * PATCH * 3
LATENT_CHANNELS = 4


@dataclass
class CodecParams:
    forward_proj: np.ndarray  # (192, 4): patch vector -> latent
    backward_proj: np.ndarray  # (4, 192)
    seed: int

    @classmethod
    def create(cls, seed: int = 0) -> "CodecParams":
        rng = np.random.default_rng(seed)
        basis = np.empty((PATCH_DIM, LATENT_CHANNELS))
        basis[:, 0] = 1.0 / np.sqrt(PATCH_DIM)
        basis[:, 1:] = rng.standard_normal((PATCH_DIM, LATENT_CHANNELS - 1))
        q, r = np.linalg.qr(basis)
        q *= np.sign(np.diag(r))  # keep the all-ones column positive
        return cls(forward_proj=q, backward_proj=np.linalg.pinv(q), seed=seed)


def space_to_depth(frame, block=PATCH) -> np.ndarray:
    H, W, C = frame.shape
    x = frame.reshape(H // block, block, W // block, block, C)
    return x.transpose(0, 2, 1, 3, 4).reshape(H // block, W // block, block * block * C)


def depth_to_space(grid, block=PATCH, channels=3) -> np.ndarray:
    h, w, _ = grid.shape
    x = grid.reshape(h, w, block, block, channels)
    return x.transpose(0, 2, 1, 3, 4).reshape(h * block, w * block, channels)


class LatentCodec:
    """Encoder/decoder pair between (H, W, 3) frames and (H/8, W/8, 4) grids."""

    def __init__(self, params: CodecParams | None = None, seed: int = 0):
        self.params = params or CodecParams.create(seed)
        # latent of a mid-grey frame; subtracted before diffusion so the
        # model works on roughly zero-centred values
        self.shift = self.encode_patches(np.full(PATCH_DIM, 0.5))
        self.scale = 0.25

    def encode_patches(self, patches):
        return np.asarray(patches, dtype=np.float64) @ self.params.forward_proj

    def encode(self, frame, validate=True) -> np.ndarray:
        if validate:
            frame = check_frame(frame)
        elif frame.shape[0] % PATCH or frame.shape[1] % PATCH:
            raise DimensionError(f"frame {frame.shape[:2]} not divisible by {PATCH}")
        return self.encode_patches(space_to_depth(np.asarray(frame, dtype=np.float64))).astype(np.float32)

    def decode(self, latent, clamp=True) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[2] != LATENT_CHANNELS:
            raise DimensionError(f"latent must be (h, w, {LATENT_CHANNELS}), got {latent.shape}")
        frame = depth_to_space(latent @ self.params.backward_proj)
        if clamp:
            frame = np.clip(frame, 0.0, 1.0)
        return frame.astype(np.float32)

    def encode_clip(self, clip) -> np.ndarray:
        frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
        return np.stack([self.encode(f) for f in frames])

    def decode_clip(self, latents, clamp=True) -> np.ndarray:
        return np.stack([self.decode(z, clamp=clamp) for z in latents])

    # diffusion works on shifted, scaled latents
    def to_model(self, latents) -> np.ndarray:
        return ((np.asarray(latents) - self.shift) * self.scale).astype(np.float32)

    def from_model(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) / self.scale + self.shift).astype(np.float32)

    def round_trip(self, frame, clamp=True) -> np.ndarray:
        return self.decode(self.encode(frame), clamp=clamp)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def save_codec_params(params: CodecParams, directory) -> None:
    from .media import write_tensor_bundle

    write_tensor_bundle(
        {"forward_proj": params.forward_proj, "backward_proj": params.backward_proj},
        directory,
        manifest_name="codec.txt",
        extra={"seed": params.seed},
    )


def load_codec_params(directory) -> CodecParams:
    from .media import read_tensor_bundle

    tensors, meta = read_tensor_bundle(directory, manifest_name="codec.txt")
    return CodecParams(
        forward_proj=tensors["forward_proj"].astype(np.float64),
        backward_proj=tensors["backward_proj"].astype(np.float64),
        seed=int(meta["seed"]),
    )
