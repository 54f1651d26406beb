"""Noise schedules, v-parameterisation, timestep selection and DDIM sampling.

Timesteps are 1-based: ``t = 1`` is the least noisy training step and
``t = T`` the noisiest. ``alpha_bar(0)`` is defined as exactly 1 so a DDIM
step that lands on 0 returns the clean estimate.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError


class Spacing(str, enum.Enum):
    LINEAR = "linear"
    SCALED_LINEAR = "scaled_linear"


class PlanMode(str, enum.Enum):
    LEADING = "leading"
    TRAILING = "trailing"


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    PYRAMID = "pyramid"
    ZEROS = "zeros"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def alpha_bar_0(self) -> float:
        return 1.0

    def alpha_bar(self, t):
        """``alpha_bar`` at integer timestep(s) ``t`` in ``[0, T]``."""
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise DomainError(f"timesteps must be integers, got {t!r}")
            t = t.astype(np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise DomainError(f"timestep outside [0, {self.T}]: {t!r}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def build_schedule(
    T: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    spacing: Spacing | str = Spacing.SCALED_LINEAR,
) -> NoiseSchedule:
    spacing = Spacing(spacing)
    if int(T) != T or T < 1:
        raise DomainError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    if spacing is Spacing.LINEAR:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]
    mode: PlanMode

    def __post_init__(self):
        s = self.steps
        if len(s) == 0 or any(a <= b for a, b in zip(s, s[1:])) or s[-1] < 1:
            raise DomainError(f"plan must be strictly descending positive timesteps: {s}")

    @property
    def k(self) -> int:
        return len(self.steps)

    def pairs(self):
        """Yield ``(t, t_prev)`` for each DDIM step, ending at ``t_prev = 0``."""
        nxt = self.steps[1:] + (0,)
        return list(zip(self.steps, nxt))


def select_timesteps(T: int, k: int, mode: PlanMode | str) -> TimestepPlan:
    """Pick ``k`` of the ``T`` training timesteps, in descending order.

    ``leading`` starts one stride below ``T`` and always ends at 1;
    ``trailing`` always starts at ``T``. ``T`` must be divisible by ``k``.
    """
    mode = PlanMode(mode)
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if k > T:
        raise DomainError(f"k exceeds T ({k} > {T})")
    if T % k:
        raise DomainError(f"T={T} is not divisible by k={k}")
    stride = T // k
    if mode is PlanMode.LEADING:
        steps = tuple(T - i * stride + 1 for i in range(1, k + 1))
    else:
        steps = tuple(T - (i - 1) * stride for i in range(1, k + 1))
    return TimestepPlan(steps=steps, mode=mode)


def _coeffs(sched: NoiseSchedule, t, ndim: int, allow_zero: bool = False):
    t_arr = np.asarray(t)
    if not allow_zero and np.any(t_arr < 1):
        raise DomainError(f"timestep must be >= 1, got {t!r}")
    ab = sched.alpha_bar(t_arr)
    if ab.ndim:
        # per-sample timesteps broadcast over the leading (batch) axis
        ab = ab.reshape(ab.shape + (1,) * (ndim - ab.ndim))
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def _check_shapes(a, b, names):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {names[0]}{a.shape} vs {names[1]}{b.shape}")
    return a, b


def forward_diffuse(z0, eps, t, sched: NoiseSchedule) -> np.ndarray:
    z0, eps = _check_shapes(z0, eps, ("z0", "eps"))
    sa, sb = _coeffs(sched, t, z0.ndim)
    return sa * z0 + sb * eps


def v_target(z0, eps, t, sched: NoiseSchedule) -> np.ndarray:
    z0, eps = _check_shapes(z0, eps, ("z0", "eps"))
    sa, sb = _coeffs(sched, t, z0.ndim)
    return sa * eps - sb * z0


def reconstruct_z0(z_t, v, t, sched: NoiseSchedule) -> np.ndarray:
    z_t, v = _check_shapes(z_t, v, ("z_t", "v"))
    sa, sb = _coeffs(sched, t, z_t.ndim)
    return sa * z_t - sb * v


def eps_from_v(z_t, v, t, sched: NoiseSchedule) -> np.ndarray:
    z_t, v = _check_shapes(z_t, v, ("z_t", "v"))
    sa, sb = _coeffs(sched, t, z_t.ndim)
    return sa * v + sb * z_t


def ddim_step(z_t, v_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if not t > t_prev >= 0:
        raise DomainError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z0_hat = reconstruct_z0(z_t, v_hat, t, sched)
    if t_prev == 0:
        return z0_hat
    eps_hat = eps_from_v(z_t, v_hat, t, sched)
    sa, sb = _coeffs(sched, t_prev, z0_hat.ndim)
    return sa * z0_hat + sb * eps_hat


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.GAUSSIAN
    pyramid_levels: int = 4
    pyramid_decay: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.pyramid_levels < 1:
            raise DomainError("pyramid_levels must be >= 1")
        if not 0.0 < self.pyramid_decay < 1.0:
            raise DomainError("pyramid_decay must lie in (0, 1)")

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, self.pyramid_levels, self.pyramid_decay, seed)


def _upsample_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    # half-pixel centres, clamped at the edges
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def upsample_bilinear(a: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resize of the first two axes of ``a`` to ``H x W``."""
    return _upsample_axis(_upsample_axis(a, H, 0), W, 1)


def _seed_for(seed: int, level: int) -> int:
    return (int(seed) ^ level) & 0xFFFFFFFFFFFFFFFF


def sample_noise(spec: NoiseSpec, shape: Sequence[int]) -> np.ndarray:
    """Draw a noise field of ``shape`` (``H x W`` or ``H x W x C``)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or any(s < 1 for s in shape):
        raise DomainError(f"invalid field shape {shape}")
    if spec.kind is NoiseKind.ZEROS:
        return np.zeros(shape)
    if spec.kind is NoiseKind.GAUSSIAN:
        return np.random.default_rng(_seed_for(spec.seed, 0)).standard_normal(shape)

    H, W = shape[:2]
    rest = shape[2:]
    out = np.zeros(shape)
    for level in range(spec.pyramid_levels):
        h = -(-H // 2**level)
        w = -(-W // 2**level)
        rng = np.random.default_rng(_seed_for(spec.seed, level))
        coarse = rng.standard_normal((h, w) + rest)
        out += spec.pyramid_decay**level * upsample_bilinear(coarse, H, W)
        if h == 1 and w == 1:
            break  # deeper levels would repeat the 1x1 constant
    std = out.std()
    return out / std if std > 0 else out


Model = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def run_inference(
    model: Model,
    x: np.ndarray,
    plan: TimestepPlan,
    spec: NoiseSpec,
    sched: NoiseSchedule,
    channels: int | None = None,
) -> np.ndarray:
    """Denoise from ``sample_noise(spec)`` through every step of ``plan``.

    ``model(z, x, t)`` returns the v-prediction. With a single trailing step
    and zero noise this is the deterministic one-step predictor.
    """
    if plan.steps[0] > sched.T:
        raise DomainError(f"plan starts at {plan.steps[0]} > T={sched.T}")
    if channels is None:
        channels = getattr(model, "out_channels", 1)
    shape = tuple(x.shape) if channels == 1 else tuple(x.shape) + (channels,)
    z = sample_noise(spec, shape)
    for t, t_prev in plan.pairs():
        v_hat = model(z, x, t)
        z = ddim_step(z, v_hat, t, t_prev, sched)
    return z
