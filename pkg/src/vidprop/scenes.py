"""Procedural test clips with exact ground-truth flow, occlusion and depth.

Textures are sums of low-frequency sinusoids evaluated at continuous
coordinates, so a moved texture is re-rendered exactly rather than
resampled.  Registered scenes:

``translating-square``
    static textured background, a textured square moving at constant
    velocity (texture attached to the square).  Depth: square 1, background 0.
``panning``
    the whole textured canvas moves at constant velocity (camera pan).
    Depth is a smooth field carried along with the content.
``static``
    a single textured image repeated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .media import VideoClip

SCENES = ("translating-square", "panning", "static")


@dataclass
class Texture:
    freqs: np.ndarray  # (3, K, 2) cycles per pixel
    phases: np.ndarray  # (3, K)
    amps: np.ndarray  # (3, K)
    base: np.ndarray  # (3,)

    @classmethod
    def random(cls, rng, components=4, min_wavelength=14.0, max_wavelength=48.0, contrast=0.35):
        wl = rng.uniform(min_wavelength, max_wavelength, size=(3, components))
        theta = rng.uniform(0, 2 * np.pi, size=(3, components))
        freqs = np.stack([np.cos(theta), np.sin(theta)], axis=-1) / wl[..., None]
        phases = rng.uniform(0, 2 * np.pi, size=(3, components))
        amps = rng.uniform(0.3, 1.0, size=(3, components))
        amps *= contrast / amps.sum(axis=1, keepdims=True)
        base = rng.uniform(0.25 + contrast * 0.5, 0.75 - contrast * 0.5, size=3)
        return cls(freqs, phases, amps, base)

    def __call__(self, x, y):
        """Evaluate at pixel coordinates x, y (broadcastable arrays) -> (..., 3)."""
        x = np.asarray(x, dtype=np.float64)[..., None, None]
        y = np.asarray(y, dtype=np.float64)[..., None, None]
        arg = 2 * np.pi * (self.freqs[..., 0] * x + self.freqs[..., 1] * y) + self.phases
        vals = self.base + (self.amps * np.sin(arg)).sum(axis=-1)
        return np.clip(vals, 0.0, 1.0)


@dataclass
class Scene:
    kind: str
    height: int
    width: int
    num_frames: int
    velocity: tuple = (1.0, 0.0)  # (vx, vy) pixels per frame
    square_size: int = 24
    square_origin: tuple = (8.0, 20.0)  # (x, y) of the top-left corner in frame 0
    seed: int = 0
    background: Texture = field(init=False)
    foreground: Texture = field(init=False)
    depth_texture: Texture = field(init=False)

    def __post_init__(self):
        if self.kind not in SCENES:
            raise ValueError(f"unknown scene {self.kind!r}; choose from {SCENES}")
        rng = np.random.default_rng(self.seed)
        self.background = Texture.random(rng)
        self.foreground = Texture.random(rng, contrast=0.3)
        # keep the square visibly different from the background
        self.foreground.base = np.clip(1.0 - self.background.base, 0.25, 0.75)
        self.depth_texture = Texture.random(rng, components=2, min_wavelength=40, max_wavelength=80)

    # -- geometry ---------------------------------------------------------
    def _grid(self):
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return xs, ys

    def _offset(self, i):
        vx, vy = self.velocity
        return np.array([vx * i, vy * i])

    def square_mask(self, i):
        xs, ys = self._grid()
        ox, oy = np.array(self.square_origin) + self._offset(i)
        s = self.square_size
        return (xs >= ox) & (xs < ox + s) & (ys >= oy) & (ys < oy + s)

    # -- rendering --------------------------------------------------------
    def render(self, i) -> np.ndarray:
        xs, ys = self._grid()
        if self.kind == "static":
            return self.background(xs, ys).astype(np.float32)
        dx, dy = self._offset(i)
        if self.kind == "panning":
            return self.background(xs - dx, ys - dy).astype(np.float32)
        img = self.background(xs, ys)
        m = self.square_mask(i)
        ox, oy = np.array(self.square_origin) + self._offset(i)
        img[m] = self.foreground(xs[m] - ox, ys[m] - oy)
        return img.astype(np.float32)

    def depth(self, i) -> np.ndarray:
        """Ground-truth depth in [0, 1], near = 1."""
        if self.kind == "translating-square":
            return self.square_mask(i).astype(np.float32)
        xs, ys = self._grid()
        dx, dy = self._offset(i) if self.kind == "panning" else (0.0, 0.0)
        d = self.depth_texture(xs - dx, ys - dy).mean(axis=-1)
        lo, hi = d.min(), d.max()
        return ((d - lo) / (hi - lo) if hi > lo else np.full_like(d, 0.5)).astype(np.float32)

    def clip(self, fps=30) -> VideoClip:
        return VideoClip(np.stack([self.render(i) for i in range(self.num_frames)]), fps=fps)

    # -- ground truth correspondence -------------------------------------
    def flow(self, a, b):
        """Exact flow on frame ``a``'s grid pointing to frame ``b`` and the
        matching occlusion mask (True where the pixel has no counterpart)."""
        xs, ys = self._grid()
        H, W = self.height, self.width
        flow = np.zeros((H, W, 2), dtype=np.float32)
        shift = self._offset(b) - self._offset(a)
        if self.kind == "static":
            return flow, np.zeros((H, W), dtype=bool)
        if self.kind == "panning":
            flow[...] = shift
            tx, ty = xs + shift[0], ys + shift[1]
            occ = (tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)
            return flow, occ
        in_a = self.square_mask(a)
        in_b = self.square_mask(b)
        flow[in_a] = shift
        tx, ty = xs + shift[0], ys + shift[1]
        out = (tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)
        occ = (in_a & out) | (~in_a & in_b)
        return flow, occ


def make_scene(kind="translating-square", size=64, frames=12, seed=0, **kwargs) -> Scene:
    return Scene(kind=kind, height=size, width=size, num_frames=frames, seed=seed, **kwargs)


def training_scenes(count=5, size=64, frames=16, seed=0):
    """A small, varied set of clips used for the desk-scale experiments."""
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(count):
        if k % 2 == 0:
            v = (float(rng.choice([-1.0, 1.0])) * rng.uniform(0.5, 1.0), rng.uniform(-0.5, 0.5))
            s = int(rng.integers(16, 25))
            origin = (rng.uniform(12, size - s - 12), rng.uniform(8, size - s - 8))
            if v[0] > 0:
                origin = (rng.uniform(4, 12), origin[1])
            else:
                origin = (rng.uniform(size - s - 12, size - s - 4), origin[1])
            scenes.append(
                Scene("translating-square", size, size, frames, velocity=v, square_size=s, square_origin=origin, seed=seed * 100 + k)
            )
        else:
            v = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
            scenes.append(Scene("panning", size, size, frames, velocity=v, seed=seed * 100 + k))
    return scenes
