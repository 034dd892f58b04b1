"""Toy inflated U-Net with a control branch, predicting v for a clip of latents.

Layout (latent h x w, then h/2 x w/2)::

    input  = concat(z_t, flow latent f, first-frame latent, occlusion) -> conv
    enc1   = ResBlock(32) + Transformer(32)         <- + control residual 1
    down   = strided conv
    enc2   = ResBlock(64) + Transformer(64)         <- + control residual 2
    mid    = ResBlock(64)
    dec    = upsample, concat enc1 skip, ResBlock(32)
    out    = GroupNorm, SiLU, conv -> v

Every convolution is pseudo-3D (the same 2-D kernel on each frame).  Each
main-branch transformer block runs spatial-temporal self-attention (queries
from frame i, keys/values from frames 1 and i-1), temporal self-attention
across frames at each location, cross-attention to the prompt and a
feed-forward layer.  The control branch is a per-frame copy of the encoder
fed with ``z_t + c`` (c = encoded spatial condition) and the flow latent;
its outputs enter the main branch through zero-initialised 1x1 convs.
Input channels for f, the first-frame latent and the occlusion mask are
zero-initialised, so an untrained model ignores them exactly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import Conv2d, FeedForward, GroupNorm, LayerNorm, Linear, Module, param
from .tensorad import Tensor, concat, matmul, silu, softmax_lastdim, take, upsample_nearest2x

LATENT_CHANNELS = 4
VOCAB_SIZE = 512
MAX_TOKENS = 8
PROMPT_SEED = 0x5EED


# ---------------------------------------------------------------------------
# prompts


@dataclass
class PromptEmbedding:
    tokens: list
    vectors: np.ndarray  # (P, d_txt)


_TABLES: dict = {}


def _embedding_table(d_txt):
    if d_txt not in _TABLES:
        rng = np.random.default_rng(PROMPT_SEED)
        _TABLES[d_txt] = (rng.standard_normal((VOCAB_SIZE, d_txt)) / math.sqrt(d_txt)).astype(np.float32)
    return _TABLES[d_txt]


def embed_prompt(text: str, d_txt: int = 32) -> PromptEmbedding:
    """Hash up to 8 words into a fixed random table; "" -> one zero vector."""
    words = text.lower().split()[:MAX_TOKENS]
    if not words:
        return PromptEmbedding([], np.zeros((1, d_txt), dtype=np.float32))
    tokens = [zlib.crc32(w.encode("utf-8")) % VOCAB_SIZE for w in words]
    return PromptEmbedding(tokens, _embedding_table(d_txt)[tokens].copy())


# ---------------------------------------------------------------------------
# conditions


@dataclass
class ConditionBundle:
    """Per-clip conditioning, every sequence of length N.

    ``spatial`` holds the spatial condition images in pixel space (N, H, W, 3);
    they are turned into latents by the model's trainable condition encoder.
    ``flow_latent`` and ``first_latent`` are model-space latents (N, h, w, 4),
    ``occlusion`` is (N, h, w) in [0, 1].
    """

    spatial: np.ndarray
    flow_latent: np.ndarray
    first_latent: np.ndarray
    occlusion: np.ndarray
    prompt: PromptEmbedding
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = {len(self.spatial), len(self.flow_latent), len(self.first_latent), len(self.occlusion)}
        if len(n) != 1:
            raise ValueError(f"condition sequences differ in length: {sorted(n)}")
        occ = np.asarray(self.occlusion)
        if occ.size and (occ.min() < 0 or occ.max() > 1):
            raise ValueError("occlusion grid must lie in [0, 1]")

    def __len__(self):
        return len(self.flow_latent)

    def with_prompt(self, prompt: PromptEmbedding) -> "ConditionBundle":
        return ConditionBundle(self.spatial, self.flow_latent, self.first_latent, self.occlusion, prompt, self.provenance)


def resize_mask(mask, factor=8, mode="avg"):
    """Occlusion mask (..., H, W) -> latent grid (..., H/f, W/f)."""
    m = np.asarray(mask, dtype=np.float32)
    *lead, H, W = m.shape
    if mode == "avg":
        return m.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1))
    if mode == "nearest":
        return m[..., factor // 2 :: factor, factor // 2 :: factor].copy()
    raise ValueError(f"unknown mask resize mode {mode!r}")


# ---------------------------------------------------------------------------
# blocks


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = float(t) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])[None, :]


class ResBlock(Module):
    def __init__(self, rng, c_in, c_out, temb_dim, groups):
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(rng, c_in, c_out)
        self.temb = Linear(rng, temb_dim, c_out)
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(rng, c_out, c_out)
        self.skip = Conv2d(rng, c_in, c_out, k=1) if c_in != c_out else None
        self.c_out = c_out

    def __call__(self, x, temb):
        h = self.conv1(silu(self.norm1(x)))
        h = h + self.temb(temb).reshape(1, self.c_out, 1, 1)
        h = self.conv2(silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


def _attend(q, k, v):
    scores = matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax_lastdim(scores), v)


class SpatialTemporalAttention(Module):
    """Self-attention whose keys/values for frame i come from frames 1 and i-1.

    With ``inflate=False`` it is ordinary per-frame self-attention.
    """

    def __init__(self, rng, dim, layer_id=None, inflate=True):
        self.to_q = Linear(rng, dim, dim, bias=False)
        self.to_k = Linear(rng, dim, dim, bias=False)
        self.to_v = Linear(rng, dim, dim, bias=False)
        self.to_out = Linear(rng, dim, dim)
        self.layer_id = layer_id
        self.inflate = inflate
        self.sources = None

    @staticmethod
    def context_frames(n):
        return [(0, max(i - 1, 0)) for i in range(n)]

    def __call__(self, x, record=None, inject=None):
        n = x.shape[0]
        q = self.to_q(x)
        if inject is not None and self.layer_id in inject:
            k_ctx, v_ctx = (Tensor(a.astype(x.dtype)) for a in inject[self.layer_id])
        else:
            k, v = self.to_k(x), self.to_v(x)
            if self.inflate:
                ctx = self.context_frames(n)
                first = [a for a, _ in ctx]
                prev = [b for _, b in ctx]
                k_ctx = concat([take(k, first), take(k, prev)], axis=1)
                v_ctx = concat([take(v, first), take(v, prev)], axis=1)
                self.sources = ctx
            else:
                k_ctx, v_ctx = k, v
        if record is not None and self.layer_id is not None:
            record[self.layer_id] = (k_ctx.data.copy(), v_ctx.data.copy())
        return self.to_out(_attend(q, k_ctx, v_ctx))


class TemporalAttention(Module):
    """Self-attention across all frames at each spatial position."""

    def __init__(self, rng, dim):
        self.to_q = Linear(rng, dim, dim, bias=False)
        self.to_k = Linear(rng, dim, dim, bias=False)
        self.to_v = Linear(rng, dim, dim, bias=False)
        self.to_out = Linear(rng, dim, dim)

    def __call__(self, x):
        xt = x.transpose(1, 0, 2)  # (L, N, C)
        out = _attend(self.to_q(xt), self.to_k(xt), self.to_v(xt))
        return self.to_out(out).transpose(1, 0, 2)


class CrossAttention(Module):
    def __init__(self, rng, dim, d_txt):
        self.to_q = Linear(rng, dim, dim, bias=False)
        self.to_k = Linear(rng, d_txt, dim, bias=False)
        self.to_v = Linear(rng, d_txt, dim, bias=False)
        self.to_out = Linear(rng, dim, dim)

    def __call__(self, x, context):
        return self.to_out(_attend(self.to_q(x), self.to_k(context), self.to_v(context)))


class TransformerBlock(Module):
    def __init__(self, rng, dim, d_txt, layer_id=None, inflate=True, ff_mult=2):
        self.norm1 = LayerNorm(dim)
        self.attn = SpatialTemporalAttention(rng, dim, layer_id, inflate)
        self.temporal = TemporalAttention(rng, dim) if inflate else None
        self.norm_t = LayerNorm(dim) if inflate else None
        self.norm2 = LayerNorm(dim)
        self.cross = CrossAttention(rng, dim, d_txt)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, ff_mult)

    def __call__(self, x, context, record=None, inject=None):
        n, c, h, w = x.shape
        tok = x.reshape(n, c, h * w).transpose(0, 2, 1)
        tok = tok + self.attn(self.norm1(tok), record, inject)
        if self.temporal is not None:
            tok = tok + self.temporal(self.norm_t(tok))
        tok = tok + self.cross(self.norm2(tok), context)
        tok = tok + self.ff(self.norm3(tok))
        return tok.transpose(0, 2, 1).reshape(n, c, h, w)


class ConditionEncoder(Module):
    """Pixel-space condition image (N, 3, H, W) -> (N, 4, H/8, W/8)."""

    def __init__(self, rng, c_in=3, widths=(16, 32, 32), out_channels=LATENT_CHANNELS):
        self.convs = []
        prev = c_in
        for wdt in widths:
            self.convs.append(Conv2d(rng, prev, wdt, k=3, stride=2, pad=1))
            prev = wdt
        self.out = Conv2d(rng, prev, out_channels, k=1, zero=True)

    def __call__(self, x):
        for conv in self.convs:
            x = silu(conv(x))
        return self.out(x)


# ---------------------------------------------------------------------------
# the model


@dataclass
class DenoiserConfig:
    width: int = 32
    width2: int = 64
    d_txt: int = 32
    temb_dim: int = 64
    groups: int = 8
    ff_mult: int = 2
    use_flow: bool = True
    use_occlusion: bool = True
    use_first_frame: bool = True
    mask_resize: str = "avg"
    seed: int = 0

    @property
    def input_channels(self):
        return 3 * LATENT_CHANNELS + 1

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {k: type(v) for k, v in asdict(cls()).items()}
        unknown = set(d) - set(kinds)
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            if kinds[k] is bool and isinstance(v, str):
                out[k] = v.lower() in ("1", "true", "yes")
            else:
                out[k] = kinds[k](v)
        return cls(**out)


class Encoder(Module):
    """Encoder half shared by the main U-Net and the control branch."""

    def __init__(self, rng, cfg: DenoiserConfig, c_in, inflate, layer_ids=(None, None)):
        w1, w2 = cfg.width, cfg.width2
        self.conv_in = Conv2d(rng, c_in, w1)
        self.res1 = ResBlock(rng, w1, w1, cfg.temb_dim, cfg.groups)
        self.attn1 = TransformerBlock(rng, w1, cfg.d_txt, layer_ids[0], inflate, cfg.ff_mult)
        self.down = Conv2d(rng, w1, w1, k=3, stride=2, pad=1)
        self.res2 = ResBlock(rng, w1, w2, cfg.temb_dim, cfg.groups)
        self.attn2 = TransformerBlock(rng, w2, cfg.d_txt, layer_ids[1], inflate, cfg.ff_mult)

    def __call__(self, x, temb, context, record=None, inject=None, residuals=None):
        h = self.conv_in(x)
        h1 = self.attn1(self.res1(h, temb), context, record, inject)
        if residuals is not None:
            h1 = h1 + residuals[0]
        h = self.down(h1)
        h2 = self.attn2(self.res2(h, temb), context, record, inject)
        if residuals is not None:
            h2 = h2 + residuals[1]
        return h1, h2


class ControlBranch(Module):
    def __init__(self, rng, cfg: DenoiserConfig):
        self.hint = ConditionEncoder(rng)
        self.encoder = Encoder(rng, cfg, 2 * LATENT_CHANNELS, inflate=False)
        self.zero1 = Conv2d(rng, cfg.width, cfg.width, k=1, zero=True)
        self.zero2 = Conv2d(rng, cfg.width2, cfg.width2, k=1, zero=True)

    def __call__(self, z, c_latent, f, temb, context):
        x = concat([z + c_latent, f], axis=1)
        h1, h2 = self.encoder(x, temb, context)
        return self.zero1(h1), self.zero2(h2)


class Denoiser(Module):
    ST_LAYERS = (0, 1)

    def __init__(self, cfg: DenoiserConfig | None = None):
        self.config = cfg = cfg or DenoiserConfig()
        rng = np.random.default_rng(cfg.seed)
        self.time1 = Linear(rng, cfg.temb_dim // 2, cfg.temb_dim)
        self.time2 = Linear(rng, cfg.temb_dim, cfg.temb_dim)
        self.encoder = Encoder(rng, cfg, cfg.input_channels, inflate=True, layer_ids=self.ST_LAYERS)
        self.mid = ResBlock(rng, cfg.width2, cfg.width2, cfg.temb_dim, cfg.groups)
        self.dec = ResBlock(rng, cfg.width2 + cfg.width, cfg.width, cfg.temb_dim, cfg.groups)
        self.norm_out = GroupNorm(cfg.groups, cfg.width)
        self.conv_out = Conv2d(rng, cfg.width, LATENT_CHANNELS)
        self.control = ControlBranch(rng, cfg)

        # new input channels start at exactly zero
        w = self.encoder.conv_in.weight.data
        w[:, LATENT_CHANNELS:] = 0.0
        # control encoder starts as a copy of the main encoder
        main = dict(self.encoder.named_parameters())
        for name, p in self.control.encoder.named_parameters():
            src = main[name].data
            if name == "conv_in.weight":
                p.data = np.zeros_like(p.data)
                p.data[:, :LATENT_CHANNELS] = src[:, :LATENT_CHANNELS]
            elif p.shape == src.shape:
                p.data = src.copy()

    # -- helpers ----------------------------------------------------------
    def _temb(self, t, dtype):
        e = Tensor(timestep_embedding(t, self.config.temb_dim // 2).astype(dtype))
        return silu(self.time2(silu(self.time1(e))))

    def _inputs(self, bundle: ConditionBundle, dtype):
        cfg = self.config
        n = len(bundle)
        f = np.transpose(bundle.flow_latent, (0, 3, 1, 2)).astype(dtype)
        first = np.transpose(bundle.first_latent, (0, 3, 1, 2)).astype(dtype)
        occ = np.asarray(bundle.occlusion, dtype=dtype)[:, None]
        if not cfg.use_flow:
            f = np.zeros_like(f)
        if not cfg.use_first_frame:
            first = np.zeros_like(first)
        if not cfg.use_occlusion:
            occ = np.zeros_like(occ)
        assert f.shape[0] == n
        return f, first, occ

    def condition_latent(self, spatial, dtype=np.float32) -> Tensor:
        x = Tensor(np.transpose(np.asarray(spatial), (0, 3, 1, 2)).astype(dtype))
        return self.control.hint(x)

    # -- forward ----------------------------------------------------------
    def forward(self, z_t, t, bundle: ConditionBundle, record=None, inject=None, c_latent=None) -> Tensor:
        """v prediction as a (N, 4, h, w) Tensor; ``z_t`` is (N, h, w, 4)."""
        z_arr = np.asarray(z_t)
        if z_arr.ndim != 4 or z_arr.shape[0] == 0:
            raise ValueError(f"z_t must be (N>=1, h, w, 4), got {z_arr.shape}")
        if z_arr.shape[-1] != LATENT_CHANNELS or len(bundle) != z_arr.shape[0]:
            raise ValueError(f"z_t {z_arr.shape} does not match bundle of {len(bundle)} frames")
        dtype = self.conv_out.weight.dtype
        z = Tensor(np.transpose(z_arr, (0, 3, 1, 2)).astype(dtype))
        f, first, occ = self._inputs(bundle, dtype)
        f_t = Tensor(f)
        temb = self._temb(t, dtype)
        context = Tensor(bundle.prompt.vectors.astype(dtype))
        if c_latent is None:
            c_latent = self.condition_latent(bundle.spatial, dtype)
        residuals = self.control(z, c_latent, f_t, temb, context)

        x = concat([z, f_t, Tensor(first), Tensor(occ)], axis=1)
        h1, h2 = self.encoder(x, temb, context, record, inject, residuals)
        h = self.mid(h2, temb)
        h = concat([upsample_nearest2x(h), h1], axis=1)
        h = self.dec(h, temb)
        return self.conv_out(silu(self.norm_out(h)))

    def predict(self, z_t, t, bundle, record=None, inject=None, c_latent=None) -> np.ndarray:
        v = self.forward(z_t, t, bundle, record, inject, c_latent)
        return np.transpose(v.data, (0, 2, 3, 1)).astype(np.float32)

    def bind(self, bundle: ConditionBundle, prompt: PromptEmbedding | None = None):
        """Callable ``fn(z, t, record=None, inject=None)`` for the samplers.

        The condition latent is computed once and reused across steps.
        """
        if prompt is not None:
            bundle = bundle.with_prompt(prompt)
        c_latent = self.condition_latent(bundle.spatial, self.conv_out.weight.dtype)

        def fn(z, t, record=None, inject=None):
            return self.predict(z, t, bundle, record, inject, c_latent)

        return fn

    def st_layers(self):
        return [self.encoder.attn1.attn, self.encoder.attn2.attn]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Denoiser, directory, extra=None):
    from .media import write_tensor_bundle

    meta = {f"config.{k}": v for k, v in model.config.as_dict().items()}
    meta.update(extra or {})
    write_tensor_bundle(model.state_dict(), directory, extra=meta)


def load_checkpoint(directory) -> Denoiser:
    from .media import read_tensor_bundle

    tensors, meta = read_tensor_bundle(directory)
    cfg = DenoiserConfig.from_dict({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
    model = Denoiser(cfg)
    model.load_state_dict(tensors)
    return model


def new_param(shape, value=0.0):
    return param(np.full(shape, value))
