"""Toy benchmark: dataset, diffusion training, leading/trailing sweep, E2E
fine-tuning and the noise-kind ablation, all driven by one frozen config.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

from .data import gen_scene, make_dataset, split_indices
from .diffusion import NoiseKind, NoiseSchedule, NoiseSpec, build_schedule, select_timesteps
from .geometry import MetricsReport, summarize
from .model import DenoiserParams
from .train import (
    TrainingSet, TrainResult, diffusion_config, e2e_config, evaluate_predictions, finetune_e2e,
    predict_ensemble, prepare, train_diffusion,
)

SWEEP_MODES = ("leading", "trailing")


@dataclass(frozen=True)
class BenchmarkConfig:
    n_scenes: int = 1280
    dataset_seed: int = 42
    split_fraction: float = 0.8
    H: int = 16
    W: int = 16
    width: int = 512
    embed_dim: int = 32
    batch_size: int = 32
    diffusion_iterations: int = 10000
    diffusion_lr: float = 2e-3
    diffusion_lr_decay: float = 0.9997
    diffusion_seed: int = 1
    finetune_iterations: int = 4000
    finetune_lr: float = 1e-3
    finetune_lr_decay: float = 0.999
    finetune_seed: int = 2
    inference_seed: int = 7
    steps: tuple[int, ...] = (1, 2, 4, 10)
    ensemble_sizes: tuple[int, ...] = (1, 5)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Benchmark:
    cfg: BenchmarkConfig
    train: TrainingSet
    test: TrainingSet
    sched: NoiseSchedule


def load_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), out_dir=None) -> Benchmark:
    """Same scenes and split as ``make_dataset(n_scenes, dataset_seed, split_fraction)``;
    written to ``out_dir`` when given, otherwise generated in memory."""
    if out_dir is not None:
        make_dataset(out_dir, cfg.n_scenes, cfg.dataset_seed, cfg.split_fraction, cfg.H, cfg.W)
    train_idx, test_idx = split_indices(cfg.n_scenes, cfg.dataset_seed, cfg.split_fraction)
    scenes = lambda idx: [gen_scene(cfg.dataset_seed ^ i, cfg.H, cfg.W) for i in idx]
    return Benchmark(cfg, prepare(scenes(train_idx)), prepare(scenes(test_idx)), build_schedule())


def train_base(bench: Benchmark) -> TrainResult:
    c = bench.cfg
    tc = diffusion_config(iterations=c.diffusion_iterations, batch_size=c.batch_size,
                          learning_rate=c.diffusion_lr, lr_decay=c.diffusion_lr_decay, seed=c.diffusion_seed)
    return train_diffusion(bench.train, tc, bench.sched, width=c.width, embed_dim=c.embed_dim)


def finetune(bench: Benchmark, params: DenoiserParams | None, noise: str = "zeros") -> TrainResult:
    """E2E fine-tuning; ``params=None`` starts from a fresh initialisation."""
    c = bench.cfg
    tc = e2e_config(noise=NoiseSpec(NoiseKind(noise)), iterations=c.finetune_iterations,
                    batch_size=c.batch_size, learning_rate=c.finetune_lr,
                    lr_decay=c.finetune_lr_decay, seed=c.finetune_seed)
    return finetune_e2e(params, bench.train, tc, bench.sched, width=c.width, embed_dim=c.embed_dim)


def score(params, data: TrainingSet, sched: NoiseSchedule, mode: str, k: int,
          noise: NoiseSpec, n_members: int = 1) -> MetricsReport:
    plan = select_timesteps(sched.T, k, mode)
    return summarize(evaluate_predictions(predict_ensemble(params, data, plan, noise, sched, n_members), data))


def sweep(params, data: TrainingSet, sched: NoiseSchedule, noise: NoiseSpec,
          steps=(1, 2, 4, 10), ensemble_sizes=(1, 5)) -> list[tuple]:
    """Rows ``(mode, steps, ensemble, absrel, delta1)`` over every cell."""
    rows = []
    for mode in SWEEP_MODES:
        for k in steps:
            for n in ensemble_sizes:
                r = score(params, data, sched, mode, k, noise, n)
                rows.append((mode, k, n, r.absrel, r.delta1))
    return rows


def inference_noise(bench: Benchmark, kind: str = "gaussian") -> NoiseSpec:
    return NoiseSpec(NoiseKind(kind), seed=bench.cfg.inference_seed)


def single_step(bench: Benchmark, params, noise: str = "zeros") -> MetricsReport:
    return score(params, bench.test, bench.sched, "trailing", 1, inference_noise(bench, noise))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
