"""Parameter containers and the handful of layers the denoiser is built from."""

from __future__ import annotations

import math

import numpy as np

from .tensorad import Tensor, conv2d, group_norm, layer_norm, matmul, silu

DTYPE = np.float32


def param(array, dtype=DTYPE) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


def kaiming_uniform(rng, shape, fan_in):
    # a = sqrt(5) variant, bound 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter tree: attributes that are Tensors with
    ``requires_grad`` are parameters; Modules and lists of Modules nest."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            unknown = set(state) - set(own)
            if missing or unknown:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, value in state.items():
            if name in own:
                if own[name].shape != tuple(np.shape(value)):
                    raise ValueError(f"{name}: shape {np.shape(value)} != {own[name].shape}")
                own[name].data = np.array(value, dtype=own[name].dtype)

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero=False):
        w = np.zeros((d_in, d_out)) if zero else xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=None, zero=False):
        shape = (c_out, c_in, k, k)
        fan_in = c_in * k * k
        w = np.zeros(shape) if zero else kaiming_uniform(rng, shape, fan_in)
        b = np.zeros(c_out) if zero else kaiming_uniform(rng, (c_out,), fan_in)
        self.weight = param(w)
        self.bias = param(b)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        self.groups = groups
        self.eps = eps
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x):
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, rng, dim, mult=2):
        self.fc1 = Linear(rng, dim, dim * mult)
        self.fc2 = Linear(rng, dim * mult, dim)

    def __call__(self, x):
        return self.fc2(silu(self.fc1(x)))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - self.lr * update).astype(p.dtype)

    def state(self):
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out
