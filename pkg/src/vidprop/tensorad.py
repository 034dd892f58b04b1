"""Reverse-mode automatic differentiation over numpy arrays.

Operations run eagerly.  When a :class:`Tape` is active and at least one
input requires a gradient, the op appends a node (output, parents, backward
rule) to the tape; ``tape.backward(loss)`` then walks the nodes in reverse
execution order exactly once.  Outside a tape nothing is recorded, which is
how inference runs.

The op set is deliberately small: elementwise arithmetic and SiLU,
(batched) matmul, reductions, reshape/transpose/slice/take/concat, last-dim
softmax, 2-D convolution (applied per frame for pseudo-3D use) and group
normalisation.  Attention and the losses are composed from these.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "as_tensor",
    "matmul",
    "softmax_lastdim",
    "conv2d",
    "conv_pseudo3d",
    "group_norm",
    "layer_norm",
    "silu",
    "concat",
    "take",
    "mse_loss",
    "upsample_nearest2x",
    "gradcheck",
]

_ACTIVE: list["Tape"] = []


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, or a second backward pass."""


class Tape:
    """Records differentiable ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape has already been used for a backward pass")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out, parents, rule):
        self.nodes.append((out, parents, rule))

    def backward(self, loss: "Tensor", params=None):
        """Accumulate d(loss)/d(leaf) for every leaf that requires grad.

        Returns a dict mapping leaf tensors to gradient arrays.  Leaves
        listed in ``params`` but never touched get an exact zero gradient.
        The tape is cleared and cannot be replayed.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {id(out) for out, _, _ in self.nodes}
        for out, parents, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in produced:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.nodes = []

        result = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        if loss.requires_grad and id(loss) not in produced and id(loss) in grads:
            # loss is itself a leaf
            result[loss] = grads[id(loss)]
        for p in params or ():
            if p not in result:
                result[p] = np.zeros_like(p.data)
        return result


def _current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    # --- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other, like=self))

    def __rsub__(self, other):
        return _add(as_tensor(other, like=self), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, _reciprocal(other))
        return _mul(self, as_tensor(1.0 / np.asarray(other, dtype=self.dtype), like=self))

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other, like=self))

    def __getitem__(self, index):
        return _getitem(self, index)

    # --- shape ops and reductions ----------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(self.dtype)
        shape = self.shape

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(out, (self,), rule)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def astype(self, dtype):
        src = self.dtype
        return _make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, rule) -> Tensor:
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, rule)
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def _reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    shape, dtype = x.shape, x.dtype
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out), (x,), rule)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)
    shape, dtype = x.shape, x.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (x,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), rule)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    NaN inputs propagate to NaN outputs in the affected rows.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Zero-padded 2-D cross-correlation of (B, C, H, W) with (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ValueError("conv2d kernel does not fit the padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    w2 = w.data.reshape(O, -1)
    out = cols @ w2.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _make(np.ascontiguousarray(out), parents, rule)


def conv_pseudo3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Apply the same 2-D convolution to every frame of a (T, C, H, W) clip."""
    return conv2d(x, w, b, stride=stride, pad=pad)


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel group) to zero mean and unit variance.

    ``x`` is (B, C, ...).  Statistics are accumulated in float64.
    """
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"{C} channels are not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1).astype(np.float64)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    red = (0,) + tuple(range(2, x.ndim))

    def rule(g):
        g64 = g.astype(np.float64)
        gx_hat = g64 * gamma.data.reshape(bshape) if gamma is not None else g64
        gh = gx_hat.reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        grads = [gx.reshape(x.shape).astype(x.dtype)]
        if gamma is not None:
            grads.append((g64 * xhat).sum(axis=red).astype(gamma.dtype))
        if beta is not None:
            grads.append(g64.sum(axis=red).astype(beta.dtype))
        return tuple(grads)

    return _make(out.astype(x.dtype), parents, rule)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; built on :func:`group_norm` with one group."""
    shape = x.shape
    flat = x.reshape(-1, shape[-1])
    return group_norm(flat, 1, gamma, beta, eps).reshape(shape)


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    ones = Tensor(np.ones((1, 1, 1, 2, 1, 2), dtype=x.dtype))
    return (x.reshape(B, C, H, 1, W, 1) * ones).reshape(B, C, 2 * H, 2 * W)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target, like=pred)
    return (diff * diff).mean()


def gradcheck(fn, inputs, h: float = 1e-3, indices=None, rng=None, max_checks: int | None = None, floor: float = 1e-3):
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    ``inputs`` are float64 leaf tensors with ``requires_grad``.  Returns the
    largest relative error ``|a - n| / max(|a|, |n|, floor)`` over the probed
    entries; ``floor`` keeps near-zero gradients from dividing by noise.
    """
    with Tape() as tape:
        loss = fn(*inputs)
    grads = tape.backward(loss, params=inputs)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        if indices is not None:
            probe = indices[k]
        elif max_checks is not None and flat.size > max_checks:
            probe = rng.choice(flat.size, size=max_checks, replace=False)
        else:
            probe = range(flat.size)
        analytic = grads[t].reshape(-1)
        for i in probe:
            old = flat[i]
            flat[i] = old + h
            up = float(fn(*inputs).data)
            flat[i] = old - h
            down = float(fn(*inputs).data)
            flat[i] = old
            numeric = (up - down) / (2 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst
