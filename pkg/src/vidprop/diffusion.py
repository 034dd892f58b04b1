"""Noise schedule, v-parameterisation and deterministic DDIM sampling/inversion.

Notation: ``alpha_t = sqrt(alpha_bar_t)`` scales the signal and
``sigma_t = sqrt(1 - alpha_bar_t)`` the noise, so ``z_t = alpha_t z0 +
sigma_t eps``.  The schedule is rescaled to zero terminal SNR, i.e.
``alpha_bar_T = 0``: the last timestep is pure noise.

A *model* here is any callable ``model(z, t, record=None, inject=None)``
returning a v prediction with the shape of ``z``.  ``record``/``inject``
are per-call dicts the model uses to expose or override its
self-attention keys and values; :func:`ddim_invert` and :func:`ddim_sample`
key them by inference step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_T = 1000
DEFAULT_STEPS = 20
GUIDANCE_SCALE = 7.5


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def alpha(self, t):
        return np.sqrt(self.alpha_bar[t])

    def sigma(self, t):
        return np.sqrt(1.0 - self.alpha_bar[t])

    def snr(self, t):
        ab = self.alpha_bar[t]
        return ab / (1.0 - ab)

    def coeffs(self, t):
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha(t)), float(self.sigma(t))


def linear_alpha_bar(T, beta_min, beta_max) -> np.ndarray:
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def build_schedule(T: int = DEFAULT_T, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear-beta DDPM schedule, rescaled to zero terminal SNR.

    ``sqrt(alpha_bar)`` over t = 1..T is shifted and scaled so the last value
    is exactly 0 while the value at t = 1 is kept.
    """
    if T < 2:
        raise ScheduleError("T must be at least 2")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"invalid beta range [{beta_min}, {beta_max}]")
    ab = linear_alpha_bar(T, beta_min, beta_max)
    s = np.sqrt(ab[1:])
    s0, sT = s[0], s[-1]
    s = (s - sT) * s0 / (s0 - sT)
    s[-1] = 0.0
    out = np.concatenate([[1.0], s * s])
    out[1] = ab[1]
    return NoiseSchedule(out)


def timestep_grid(T: int, steps: int) -> np.ndarray:
    """Uniform inference grid ``[0, ..., T]`` with ``steps`` intervals."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    return np.round(np.linspace(0, T, steps + 1)).astype(int)


# ---------------------------------------------------------------------------
# v-parameterisation algebra


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def add_noise(schedule: NoiseSchedule, z0, eps, t):
    _check_shapes(z0, eps)
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"add_noise needs 1 <= t <= {schedule.T}, got {t}")
    a, s = schedule.coeffs(t)
    return a * np.asarray(z0) + s * np.asarray(eps)


def v_target(schedule: NoiseSchedule, z0, eps, t):
    _check_shapes(z0, eps)
    a, s = schedule.coeffs(t)
    return a * np.asarray(eps) - s * np.asarray(z0)


def recover_x0_eps(schedule: NoiseSchedule, z_t, v, t):
    _check_shapes(z_t, v)
    a, s = schedule.coeffs(t)
    z_t, v = np.asarray(z_t), np.asarray(v)
    return a * z_t - s * v, s * z_t + a * v


def ddim_step(schedule: NoiseSchedule, z_t, v_pred, t, t_prev):
    """Deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    if not t > t_prev >= 0:
        raise ScheduleError(f"ddim_step needs t > t_prev >= 0, got {t}, {t_prev}")
    x0, eps = recover_x0_eps(schedule, z_t, v_pred, t)
    a, s = schedule.coeffs(t_prev)
    if t_prev == 0:
        return x0
    return a * x0 + s * eps


def cfg_combine(v_cond, v_uncond, scale):
    _check_shapes(v_cond, v_uncond)
    if not np.isfinite(scale):
        raise ValueError("guidance scale must be finite")
    if scale == 1.0:
        return np.array(v_cond, copy=True)
    v_cond, v_uncond = np.asarray(v_cond), np.asarray(v_uncond)
    return v_uncond + scale * (v_cond - v_uncond)


# ---------------------------------------------------------------------------
# sampling and inversion


@dataclass
class AttentionStore:
    """Self-attention keys/values per (layer, inference step)."""

    maps: dict = field(default_factory=dict)  # (layer, step) -> (k, v)
    layers: int = 0
    steps: int = 0

    def __len__(self):
        return len(self.maps)

    def step(self, j) -> dict:
        return {layer: kv for (layer, s), kv in self.maps.items() if s == j}

    def to_arrays(self) -> dict:
        out = {}
        for (layer, j), (k, v) in sorted(self.maps.items()):
            out[f"layer{layer}_step{j}_k"] = k
            out[f"layer{layer}_step{j}_v"] = v
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "AttentionStore":
        store = cls()
        for key, value in arrays.items():
            layer_s, step_s, kind = key.split("_")
            layer, step = int(layer_s[5:]), int(step_s[4:])
            k, v = store.maps.get((layer, step), (None, None))
            store.maps[(layer, step)] = (value, v) if kind == "k" else (k, value)
        store.layers = len({lay for lay, _ in store.maps})
        store.steps = len({s for _, s in store.maps})
        return store


def guided(model, uncond_model=None, scale=1.0):
    """Wrap a conditional model (and optional unconditional twin) with CFG."""
    if uncond_model is None or scale == 1.0:
        return model

    def fn(z, t, record=None, inject=None):
        v_c = model(z, t, record=record, inject=inject)
        v_u = uncond_model(z, t, inject=inject)
        return cfg_combine(v_c, v_u, scale)

    return fn


def ddim_sample(schedule, model, z_T, steps=DEFAULT_STEPS, store: AttentionStore | None = None, record=None):
    """Run ``steps`` DDIM updates from ``z_T`` at t = T down to t = 0.

    With ``store`` the model's self-attention keys/values at step ``j`` are
    replaced by those recorded during inversion at the same timestep.
    """
    grid = timestep_grid(schedule.T, steps)
    z = np.asarray(z_T, dtype=np.float32)
    for j in range(steps, 0, -1):
        t, t_prev = int(grid[j]), int(grid[j - 1])
        inject = store.step(j) if store is not None else None
        v = model(z, t, inject=inject or None)
        z = ddim_step(schedule, z, v, t, t_prev).astype(np.float32)
        if record is not None:
            record.append(z)
    return z


def ddim_invert(schedule, model, z0, steps=DEFAULT_STEPS, refine=0, tol=1e-3):
    """Map a clean latent to its DDIM noise ``z_T``, recording attention maps.

    Each step from ``s`` to ``t > s`` evaluates the model on the current
    latent with timestep ``t`` and re-noises the implied (x0, eps) estimate
    to level ``t``.  ``refine > 0`` then runs up to ``refine`` fixed-point
    iterations of ``z_t = (z_s - b v(z_t)) / a``, the exact inverse of
    :func:`ddim_step`, stopping once the step residual is below ``tol``.
    This lets sampling retrace the inversion closely.  Returns
    ``(z_T, store)`` where ``store`` holds one (k, v) pair per
    self-attention layer per step, recorded at the final ``z_t``.
    """
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    grid = timestep_grid(schedule.T, steps)
    store = AttentionStore(steps=steps)
    z = np.asarray(z0, dtype=np.float32)
    for j in range(1, steps + 1):
        s, t = int(grid[j - 1]), int(grid[j])
        rec: dict = {}
        v = model(z, t, record=rec)
        a_s, sg_s = schedule.coeffs(s)
        x0 = a_s * z - sg_s * v
        eps = sg_s * z + a_s * v
        a_t, sg_t = schedule.coeffs(t)
        z_t = a_t * x0 + sg_t * eps
        a_c = a_s * a_t + sg_s * sg_t
        b_c = sg_s * a_t - a_s * sg_t
        if refine and a_c > 1e-6:
            for _ in range(refine):
                rec = {}
                v_t = model(z_t.astype(np.float32), t, record=rec)
                resid = a_c * z_t + b_c * v_t - z
                if np.abs(resid).max() <= tol:
                    break
                z_t = z_t - resid / a_c
            else:
                rec = {}
                model(z_t.astype(np.float32), t, record=rec)
        for layer, kv in rec.items():
            store.maps[(layer, j)] = kv
        z = np.asarray(z_t, dtype=np.float32)
    store.layers = len({lay for lay, _ in store.maps})
    return z, store
