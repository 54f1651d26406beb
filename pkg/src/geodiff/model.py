"""A small fully connected conditional v-prediction network with hand-written
reverse-mode gradients, plus AdamW.

Input is ``concat(flatten(z_t), flatten(x), embed(t))``; two SiLU hidden
layers; linear output reshaped to the target field.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape ``(B, dim)`` for ``B`` timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _silu(a):
    with np.errstate(over="ignore"):  # exp overflow saturates the sigmoid to 0
        s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


@dataclass
class DenoiserParams:
    H: int
    W: int
    out_channels: int = 1
    width: int = 256
    embed_dim: int = 32
    tensors: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def pixels(self) -> int:
        return self.H * self.W

    @property
    def in_dim(self) -> int:
        return self.pixels * self.out_channels + self.pixels + self.embed_dim

    @property
    def out_dim(self) -> int:
        return self.pixels * self.out_channels

    @property
    def layer_sizes(self) -> tuple[int, int, int, int]:
        return self.in_dim, self.width, self.width, self.out_dim

    def target_shape(self) -> tuple[int, ...]:
        return (self.H, self.W) if self.out_channels == 1 else (self.H, self.W, self.out_channels)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        i, h1, h2, o = self.layer_sizes
        return {"w1": (i, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,), "w3": (h2, o), "b3": (o,)}

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.H, self.W, self.out_channels, self.width, self.embed_dim,
                              {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __call__(self, z_t, x, t):
        return forward(self, z_t, x, t)


def init_params(H: int, W: int, out_channels: int = 1, width: int = 256, embed_dim: int = 32,
                seed: int = 0, zero_output: bool = False) -> DenoiserParams:
    p = DenoiserParams(H, W, out_channels, width, embed_dim)
    rng = np.random.default_rng(seed)
    for name, shape in p.shapes().items():
        if name.startswith("b") or (zero_output and name == "w3"):
            p.tensors[name] = np.zeros(shape)
        else:
            p.tensors[name] = rng.standard_normal(shape) * np.sqrt(1.0 / shape[0])
    return p


def _inputs(params: DenoiserParams, z_t, x, t):
    x = np.asarray(x, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
        z_t = z_t[None]
    B = x.shape[0]
    if x.shape[1:] != (params.H, params.W):
        raise DomainError(f"condition shape {x.shape[1:]} != model field {(params.H, params.W)}")
    if z_t.shape[1:] != params.target_shape() or z_t.shape[0] != B:
        raise DomainError(f"z_t shape {z_t.shape} incompatible with model target {params.target_shape()}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    inp = np.concatenate([z_t.reshape(B, -1), x.reshape(B, -1),
                          timestep_embedding(t, params.embed_dim)], axis=1)
    return inp, single


def _forward_cache(params: DenoiserParams, inp: np.ndarray):
    p = params.tensors
    a1 = inp @ p["w1"] + p["b1"]
    h1, s1 = _silu(a1)
    a2 = h1 @ p["w2"] + p["b2"]
    h2, s2 = _silu(a2)
    out = h2 @ p["w3"] + p["b3"]
    return out, (inp, a1, h1, s1, a2, h2, s2)


def forward(params: DenoiserParams, z_t, x, t) -> np.ndarray:
    """v-prediction for one sample (``x`` is ``H x W``) or a batch (``B x H x W``)."""
    inp, single = _inputs(params, z_t, x, t)
    out, _ = _forward_cache(params, inp)
    out = out.reshape((inp.shape[0],) + params.target_shape())
    return out[0] if single else out


def forward_with_cache(params: DenoiserParams, z_t, x, t):
    inp, _ = _inputs(params, z_t, x, t)
    out, cache = _forward_cache(params, inp)
    return out.reshape((inp.shape[0],) + params.target_shape()), cache


def backprop(params: DenoiserParams, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dL/d(output)`` of shape ``(B, ...)``."""
    p = params.tensors
    inp, a1, h1, s1, a2, h2, s2 = cache
    g = d_out.reshape(d_out.shape[0], -1)
    grads = {"w3": h2.T @ g, "b3": g.sum(axis=0)}
    dh2 = g @ p["w3"].T
    da2 = dh2 * s2 * (1.0 + a2 * (1.0 - s2))
    grads["w2"] = h1.T @ da2
    grads["b2"] = da2.sum(axis=0)
    dh1 = da2 @ p["w2"].T
    da1 = dh1 * s1 * (1.0 + a1 * (1.0 - s1))
    grads["w1"] = inp.T @ da1
    grads["b1"] = da1.sum(axis=0)
    return {k: grads[k] for k in PARAM_NAMES}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params: DenoiserParams, **kw) -> "OptimizerState":
        m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        v = {k: np.zeros_like(a) for k, a in params.tensors.items()}
        return cls(m, v, **kw)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()},
                              self.step, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def adam_step(params: DenoiserParams, grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float | None = None):
    """One AdamW update; returns new ``(params, state)`` and leaves inputs untouched.

    ``lr`` overrides ``state.lr`` for this step (used by LR schedules).
    """
    lr = state.lr if lr is None else lr
    new_p = params.copy()
    new_s = state.copy()
    new_s.step += 1
    bc1 = 1.0 - state.beta1**new_s.step
    bc2 = 1.0 - state.beta2**new_s.step
    for k, w in new_p.tensors.items():
        g = grads[k]
        if g.shape != w.shape:
            raise DomainError(f"gradient for {k} has shape {g.shape}, expected {w.shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        new_s.m[k] = m
        new_s.v[k] = v
        if state.weight_decay:
            w *= 1.0 - lr * state.weight_decay
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new_p, new_s
