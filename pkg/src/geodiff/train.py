"""Diffusion (v-matching) training and end-to-end single-step fine-tuning.

E2E depth loss treats the per-sample scale/shift fit as a constant when
differentiating, so its gradient is exact for the loss with alignment held
fixed at the values computed from the current prediction.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    NoiseKind, NoiseSchedule, NoiseSpec, TimestepPlan, build_schedule,
    forward_diffuse, reconstruct_z0, run_inference, sample_noise, v_target,
)
from .errors import DegenerateAlignment, DomainError, NonFiniteLoss
from .geometry import (
    DepthMap, MetricsReport, NormalMap, align_affine, ensemble,
    evaluate_depth, evaluate_normals, preprocess_depth,
)
from .model import DenoiserParams, OptimizerState, adam_step, backprop, forward_with_cache, init_params

log = logging.getLogger(__name__)


class LossKind(str, enum.Enum):
    V_MATCHING = "v_matching"
    AFFINE_DEPTH = "affine_depth"
    ANGULAR_NORMALS = "angular_normals"


class TimestepPolicy(str, enum.Enum):
    UNIFORM = "uniform"
    FIXED_T = "fixed_t"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup: int = 100
    lr_decay: float = 0.999
    weight_decay: float = 0.0
    noise: NoiseSpec = NoiseSpec(NoiseKind.GAUSSIAN)
    timestep_policy: TimestepPolicy = TimestepPolicy.UNIFORM
    loss: LossKind = LossKind.V_MATCHING
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "timestep_policy", TimestepPolicy(self.timestep_policy))
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise DomainError("need iterations >= 0, batch_size >= 1, learning_rate > 0")
        e2e = self.loss is not LossKind.V_MATCHING
        if e2e != (self.timestep_policy is TimestepPolicy.FIXED_T):
            raise DomainError("fixed_t timesteps go with task losses, uniform with v_matching")

    def lr_at(self, step: int) -> float:
        """Linear warm-up, then exponential decay."""
        if step < self.warmup:
            return self.learning_rate * (step + 1) / self.warmup
        return self.learning_rate * self.lr_decay ** (step - self.warmup)


def diffusion_config(**kw) -> TrainConfig:
    return TrainConfig(timestep_policy=TimestepPolicy.UNIFORM, loss=LossKind.V_MATCHING, **kw)


def e2e_config(loss=LossKind.AFFINE_DEPTH, noise=NoiseSpec(NoiseKind.ZEROS), **kw) -> TrainConfig:
    return TrainConfig(timestep_policy=TimestepPolicy.FIXED_T, loss=loss, noise=noise, **kw)


@dataclass
class TrainingSet:
    """Network-ready arrays for a list of samples.

    ``x`` is the condition mapped to [-1, 1]; ``target`` is preprocessed depth
    (``task='depth'``) or GT normals (``task='normals'``), zero where masked.
    """
    x: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    depth_raw: np.ndarray
    normals: np.ndarray
    task: str = "depth"

    def __len__(self):
        return len(self.x)

    @property
    def channels(self) -> int:
        return 1 if self.task == "depth" else 3


def prepare(samples, task: str = "depth", far_plane: float | None = None) -> TrainingSet:
    if task not in ("depth", "normals"):
        raise DomainError(f"unknown task {task!r}")
    xs, targets, masks = [], [], []
    for s in samples:
        xs.append(2.0 * s.condition.astype(np.float64) - 1.0)
        if task == "depth":
            pre = preprocess_depth(s.depth_gt, far_plane)
            targets.append(pre.values)
            masks.append(pre.mask)
        else:
            m = s.normals_gt.mask
            targets.append(np.where(m[..., None], s.normals_gt.vectors, 0.0))
            masks.append(m)
    return TrainingSet(
        x=np.stack(xs), target=np.stack(targets), mask=np.stack(masks),
        depth_raw=np.stack([s.depth_gt.values.astype(np.float64) for s in samples]),
        normals=np.stack([s.normals_gt.vectors.astype(np.float64) for s in samples]),
        task=task,
    )


@dataclass
class Batch:
    x: np.ndarray
    z_t: np.ndarray
    t: np.ndarray
    target: np.ndarray  # v* for v-matching, clean z* for task losses
    mask: np.ndarray


@dataclass
class LossInfo:
    loss: float
    per_sample: np.ndarray
    alignments: list = field(default_factory=list)
    skipped: int = 0


def _expand_mask(mask, like):
    return mask if like.ndim == mask.ndim else mask[..., None]


def _vmatching(v_hat, batch: Batch):
    m = _expand_mask(batch.mask, v_hat).astype(np.float64)
    m = np.broadcast_to(m, v_hat.shape)
    axes = tuple(range(1, v_hat.ndim))
    count = m.sum(axis=axes)
    diff = (v_hat - batch.target) * m
    per = (diff * diff).sum(axis=axes) / count
    B = len(per)
    d_v = 2.0 * diff / (count.reshape((B,) + (1,) * (v_hat.ndim - 1)) * B)
    return per, d_v, LossInfo(float(per.mean()), per)


def _affine_depth(z0_hat, batch: Batch, alignments=None):
    B = len(z0_hat)
    per = np.full(B, np.nan)
    d_z = np.zeros_like(z0_hat)
    used = []
    for b in range(B):
        m = batch.mask[b]
        if alignments is not None:
            al = alignments[b]
        else:
            try:
                al = align_affine(DepthMap(z0_hat[b], m), DepthMap(batch.target[b], m))
            except DegenerateAlignment:
                al = None
        used.append(al)
        if al is None:
            continue
        r = batch.target[b][m] - al.apply(z0_hat[b][m])
        per[b] = np.abs(r).mean()
        g = np.zeros(m.shape)
        g[m] = -al.scale * np.sign(r) / m.sum()
        d_z[b] = g
    ok = ~np.isnan(per)
    n_ok = int(ok.sum())
    skipped = B - n_ok
    if n_ok:
        d_z /= n_ok
        loss = float(per[ok].mean())
    else:
        loss = 0.0
    return per, d_z, LossInfo(loss, per, used, skipped)


def _angular(z0_hat, batch: Batch):
    B = len(z0_hat)
    n = z0_hat
    g = batch.target
    m = batch.mask
    nn = np.linalg.norm(n, axis=-1)
    gn = np.linalg.norm(g, axis=-1)
    bad = (nn == 0) | (gn == 0)
    safe_nn = np.where(bad, 1.0, nn)
    safe_gn = np.where(bad, 1.0, gn)
    c = np.sum(n * g, axis=-1) / (safe_nn * safe_gn)
    c = np.clip(c, -1.0, 1.0)
    theta = np.where(bad, np.pi, np.arccos(c))
    count = m.sum(axis=(1, 2))
    per = (theta * m).sum(axis=(1, 2)) / count
    sin2 = 1.0 - c * c
    live = m & ~bad & (sin2 > 1e-24)
    dtheta_dc = np.where(live, -1.0 / np.sqrt(np.where(live, sin2, 1.0)), 0.0)
    dc_dn = (g / (safe_nn * safe_gn)[..., None]) - (c / (safe_nn**2))[..., None] * n
    weight = dtheta_dc / (count[:, None, None] * B)
    d_z = weight[..., None] * dc_dn
    return per, d_z, LossInfo(float(per.mean()), per)


def loss_and_grad(params: DenoiserParams, batch: Batch, loss_kind: LossKind,
                  sched: NoiseSchedule, alignments=None):
    """Batch-mean loss and its parameter gradients.

    ``alignments`` (depth loss only) freezes each sample's scale/shift.
    Raises ``NonFiniteLoss`` naming the first sample whose loss is not finite.
    """
    loss_kind = LossKind(loss_kind)
    v_hat, cache = forward_with_cache(params, batch.z_t, batch.x, batch.t)
    if loss_kind is LossKind.V_MATCHING:
        per, d_v, info = _vmatching(v_hat, batch)
    else:
        z0_hat = reconstruct_z0(batch.z_t, v_hat, batch.t, sched)
        if loss_kind is LossKind.AFFINE_DEPTH:
            per, d_z, info = _affine_depth(z0_hat, batch, alignments)
        else:
            per, d_z, info = _angular(z0_hat, batch)
        # d z0_hat / d v_hat = -sqrt(1 - alpha_bar_t)
        ab = sched.alpha_bar(batch.t).reshape((-1,) + (1,) * (v_hat.ndim - 1))
        d_v = -np.sqrt(1.0 - ab) * d_z
    for i, val in enumerate(per):
        if not np.isfinite(val) and not (loss_kind is LossKind.AFFINE_DEPTH and info.alignments[i] is None):
            raise NonFiniteLoss(i, float(val))
    return info, backprop(params, cache, d_v)


def backward(params, batch, loss_kind, sched, alignments=None):
    """Gradient structure congruent to ``params.tensors``."""
    return loss_and_grad(params, batch, loss_kind, sched, alignments)[1]


def batch_loss(params, batch, loss_kind, sched, alignments=None) -> float:
    return loss_and_grad(params, batch, loss_kind, sched, alignments)[0].loss


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches: seeded permutation per epoch, consumed in order."""
    perm = rng.permutation(n)
    pos = 0
    while True:
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                perm = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take].tolist())
            pos += take
        yield np.array(idx)


def _noise_batch(spec: NoiseSpec, shape, seeds) -> np.ndarray:
    return np.stack([sample_noise(spec.with_seed(int(s)), shape) for s in seeds])


@dataclass
class TrainResult:
    params: DenoiserParams
    state: OptimizerState
    losses: list[float]
    skipped: int = 0


def _run(params, state, data: TrainingSet, cfg: TrainConfig, sched: NoiseSchedule, make_batch):
    rng = np.random.default_rng(cfg.seed)
    batches = _batch_indices(len(data), cfg.batch_size, rng)
    losses = []
    skipped = 0
    for it in range(cfg.iterations):
        idx = next(batches)
        batch = make_batch(idx, rng)
        info, grads = loss_and_grad(params, batch, cfg.loss, sched)
        if not np.isfinite(info.loss):
            raise NonFiniteLoss(-1, info.loss)
        skipped += info.skipped
        losses.append(info.loss)
        params, state = adam_step(params, grads, state, lr=cfg.lr_at(state.step))
    return TrainResult(params, state, losses, skipped)


def _fresh_state(params, cfg: TrainConfig) -> OptimizerState:
    return OptimizerState.zeros_like(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def train_diffusion(data: TrainingSet, cfg: TrainConfig, sched: NoiseSchedule | None = None,
                    params: DenoiserParams | None = None, width: int = 256,
                    embed_dim: int = 32) -> TrainResult:
    """v-matching training with uniformly sampled timesteps; noise only on the target."""
    if cfg.timestep_policy is not TimestepPolicy.UNIFORM:
        raise DomainError("train_diffusion needs the uniform timestep policy")
    sched = sched or build_schedule()
    if params is None:
        H, W = data.x.shape[1:]
        params = init_params(H, W, data.channels, width, embed_dim, seed=cfg.seed)
    state = _fresh_state(params, cfg)
    shape = data.target.shape[1:]

    def make_batch(idx, rng):
        t = rng.integers(1, sched.T + 1, size=len(idx))
        seeds = rng.integers(0, 2**63, size=len(idx))
        eps = _noise_batch(cfg.noise, shape, seeds)
        z0 = data.target[idx]
        return Batch(data.x[idx], forward_diffuse(z0, eps, t, sched), t,
                     v_target(z0, eps, t, sched), data.mask[idx])

    return _run(params, state, data, cfg, sched, make_batch)


def finetune_e2e(params: DenoiserParams | None, data: TrainingSet, cfg: TrainConfig,
                 sched: NoiseSchedule | None = None, width: int = 256,
                 embed_dim: int = 32) -> TrainResult:
    """Single-step fine-tuning at ``t = T`` against a task loss on the decoded prediction.

    ``params=None`` starts from a fresh initialisation.
    """
    if cfg.timestep_policy is not TimestepPolicy.FIXED_T:
        raise DomainError("finetune_e2e needs the fixed_t timestep policy")
    if (cfg.loss is LossKind.ANGULAR_NORMALS) != (data.task == "normals"):
        raise DomainError(f"loss {cfg.loss.value} does not match task {data.task}")
    sched = sched or build_schedule()
    if params is None:
        H, W = data.x.shape[1:]
        params = init_params(H, W, data.channels, width, embed_dim, seed=cfg.seed)
    state = _fresh_state(params, cfg)
    shape = data.target.shape[1:]

    def make_batch(idx, rng):
        seeds = rng.integers(0, 2**63, size=len(idx))
        z_T = _noise_batch(cfg.noise, shape, seeds)
        t = np.full(len(idx), sched.T)
        return Batch(data.x[idx], z_T, t, data.target[idx], data.mask[idx])

    result = _run(params, state, data, cfg, sched, make_batch)
    if result.skipped:
        log.warning("skipped %d degenerate samples during fine-tuning", result.skipped)
    return result


def predict(params: DenoiserParams, data: TrainingSet, plan: TimestepPlan, noise: NoiseSpec,
            sched: NoiseSchedule, member: int = 0) -> np.ndarray:
    """Run inference on every sample; sample ``i`` of ensemble member ``j`` draws
    noise from ``derive_seed(noise.seed, i, j)``."""
    out = []
    for i in range(len(data)):
        spec = noise.with_seed(derive_seed(noise.seed, i, member))
        out.append(run_inference(params, data.x[i], plan, spec, sched, data.channels))
    return np.stack(out)


def predict_ensemble(params, data, plan, noise, sched, n_members: int = 1) -> np.ndarray:
    members = [predict(params, data, plan, noise, sched, member=j) for j in range(n_members)]
    if n_members == 1:
        return members[0]
    if data.channels == 3:
        # normals: mean direction of the unit-normalised members
        stack = np.stack(members)
        norm = np.linalg.norm(stack, axis=-1, keepdims=True)
        mean = (stack / np.where(norm == 0, 1.0, norm)).mean(axis=0)
        mnorm = np.linalg.norm(mean, axis=-1, keepdims=True)
        return mean / np.where(mnorm == 0, 1.0, mnorm)
    out = []
    for i in range(len(data)):
        preds = [DepthMap(m[i], np.ones(m[i].shape, dtype=bool)) for m in members]
        out.append(ensemble(preds).values)
    return np.stack(out)


def evaluate_predictions(preds: np.ndarray, data: TrainingSet) -> list[MetricsReport]:
    reports = []
    for i, p in enumerate(preds):
        m = data.mask[i]
        if data.task == "depth":
            reports.append(evaluate_depth(DepthMap(p, np.ones(p.shape, bool)), DepthMap(data.depth_raw[i], m)))
        else:
            reports.append(evaluate_normals(NormalMap(p, np.ones(p.shape[:2], bool)), NormalMap(data.normals[i], m)))
    return reports
