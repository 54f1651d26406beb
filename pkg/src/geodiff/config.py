"""Run configuration: ``key = value`` files with ``#`` comments, validated
against a fixed schema, plus ``--set key=value`` overrides.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .diffusion import NoiseKind, NoiseSpec, PlanMode, Spacing, build_schedule, select_timesteps
from .errors import DomainError
from .train import LossKind, TrainConfig, diffusion_config, e2e_config

REPORT_ENV = "GDK_REPORT_DIR"


class ConfigError(DomainError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, source=None):
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.key = key
        self.line = line


def _positive_int(v: str) -> int:
    n = int(v)
    if n < 1:
        raise ValueError("must be >= 1")
    return n


def _nonneg_int(v: str) -> int:
    n = int(v)
    if n < 0:
        raise ValueError("must be >= 0")
    return n


def _positive_float(v: str) -> float:
    x = float(v)
    if not x > 0:
        raise ValueError("must be > 0")
    return x


def _nonneg_float(v: str) -> float:
    x = float(v)
    if not x >= 0:
        raise ValueError("must be >= 0")
    return x


def _fraction(v: str) -> float:
    x = float(v)
    if not 0.0 < x < 1.0:
        raise ValueError("must lie in (0, 1)")
    return x


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _seed(v: str) -> int:
    n = int(v, 0)
    if not 0 <= n < 2**64:
        raise ValueError("seed must fit in 64 unsigned bits")
    return n


def _text(v: str) -> str:
    if not v:
        raise ValueError("must not be empty")
    return v


def _optional_float(v: str) -> float | None:
    return None if v.lower() in ("", "none") else _positive_float(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: str
    help: str = ""


NOISE_KINDS = tuple(k.value for k in NoiseKind)

SCHEMA: dict[str, Key] = {
    "schedule.T": Key(_positive_int, "1000", "training timesteps"),
    "schedule.beta_start": Key(_positive_float, "0.00085"),
    "schedule.beta_end": Key(_positive_float, "0.012"),
    "schedule.spacing": Key(_choice(*(s.value for s in Spacing)), "scaled_linear"),
    "plan.steps": Key(_positive_int, "1", "inference steps k"),
    "plan.mode": Key(_choice(*(m.value for m in PlanMode)), "trailing"),
    "plan.ensemble": Key(_positive_int, "1", "ensemble members"),
    "noise.kind": Key(_choice(*NOISE_KINDS), "gaussian", "inference noise"),
    "noise.levels": Key(_positive_int, "4"),
    "noise.decay": Key(_positive_float, "0.5"),
    "noise.seed": Key(_seed, "0"),
    "data.n": Key(_positive_int, "16"),
    "data.seed": Key(_seed, "42"),
    "data.split": Key(_fraction, "0.75"),
    "data.H": Key(_positive_int, "16"),
    "data.W": Key(_positive_int, "16"),
    "data.task": Key(_choice("depth", "normals"), "depth"),
    "data.far_plane": Key(_optional_float, "none"),
    "model.width": Key(_positive_int, "256"),
    "model.embed_dim": Key(_positive_int, "32"),
    "train.iterations": Key(_nonneg_int, "2000"),
    "train.batch": Key(_positive_int, "32"),
    "train.lr": Key(_positive_float, "1e-3"),
    "train.warmup": Key(_nonneg_int, "100"),
    "train.lr_decay": Key(_positive_float, "0.999"),
    "train.weight_decay": Key(_nonneg_float, "0"),
    "train.noise": Key(_choice(*NOISE_KINDS), "gaussian"),
    "train.seed": Key(_seed, "0"),
    "finetune.iterations": Key(_nonneg_int, "2000"),
    "finetune.batch": Key(_positive_int, "32"),
    "finetune.lr": Key(_positive_float, "1e-3"),
    "finetune.warmup": Key(_nonneg_int, "100"),
    "finetune.lr_decay": Key(_positive_float, "0.999"),
    "finetune.weight_decay": Key(_nonneg_float, "0"),
    "finetune.noise": Key(_choice(*NOISE_KINDS), "zeros"),
    "finetune.init": Key(_choice("checkpoint", "fresh"), "checkpoint"),
    "finetune.seed": Key(_seed, "0"),
    "paths.dataset": Key(_text, "data"),
    "paths.checkpoint": Key(_text, "runs/diffusion.gdk"),
    "paths.finetuned": Key(_text, "runs/e2e.gdk"),
    "paths.report_dir": Key(_text, "reports"),
}


def _split_line(raw: str):
    body = raw.split("#", 1)[0].strip()
    if not body:
        return None
    if "=" not in body:
        raise ValueError("expected key = value")
    key, value = body.split("=", 1)
    return key.strip(), value.strip()


@dataclass
class RunConfig:
    """Validated settings. ``values`` holds parsed values for every schema key."""
    values: dict[str, object] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key, spec in SCHEMA.items():
            if key not in self.raw:
                self.raw[key] = spec.default
            if key not in self.values:
                self.values[key] = spec.parse(self.raw[key])

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value: str, line: int | None = None, source=None) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key '{key}'", key, line, source)
        try:
            parsed = SCHEMA[key].parse(value)
        except ValueError as e:
            raise ConfigError(f"invalid value {value!r} for '{key}': {e}", key, line, source) from None
        self.values[key] = parsed
        self.raw[key] = value

    @classmethod
    def parse(cls, text: str, source=None) -> "RunConfig":
        cfg = cls()
        seen = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            try:
                item = _split_line(raw)
            except ValueError as e:
                raise ConfigError(str(e), None, lineno, source) from None
            if item is None:
                continue
            key, value = item
            if key in seen:
                raise ConfigError(f"duplicate key '{key}' (first set on line {seen[key]})", key, lineno, source)
            seen[key] = lineno
            cfg.set(key, value, lineno, source)
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), env=None) -> "RunConfig":
        if path is None:
            cfg = cls()
        else:
            path = Path(path)
            try:
                text = path.read_text()
            except FileNotFoundError:
                raise FileNotFoundError(f"config file not found: {path}") from None
            cfg = cls.parse(text, path)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value", None, None, "--set")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip(), None, "--set")
        env = os.environ if env is None else env
        if env.get(REPORT_ENV):
            cfg.set("paths.report_dir", env[REPORT_ENV], None, REPORT_ENV)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in SCHEMA)

    def hash(self) -> str:
        """SHA-256 over the canonical parsed values, independent of file layout.

        Output locations are excluded so the same experiment hashes the
        same wherever its report lands.
        """
        lines = [f"{k}={self.values[k]!r}" for k in sorted(SCHEMA) if k != "paths.report_dir"]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    # builders for the core objects

    def schedule(self):
        return build_schedule(self["schedule.T"], self["schedule.beta_start"],
                              self["schedule.beta_end"], self["schedule.spacing"])

    def plan(self, steps: int | None = None, mode: str | None = None):
        return select_timesteps(self["schedule.T"], steps or self["plan.steps"], mode or self["plan.mode"])

    def noise(self, kind: str | None = None) -> NoiseSpec:
        return NoiseSpec(NoiseKind(kind or self["noise.kind"]), self["noise.levels"],
                         self["noise.decay"], self["noise.seed"])

    def _train_kw(self, section: str) -> dict:
        return dict(iterations=self[f"{section}.iterations"], batch_size=self[f"{section}.batch"],
                    learning_rate=self[f"{section}.lr"], warmup=self[f"{section}.warmup"],
                    lr_decay=self[f"{section}.lr_decay"], weight_decay=self[f"{section}.weight_decay"],
                    seed=self[f"{section}.seed"])

    def diffusion_train(self) -> TrainConfig:
        return diffusion_config(noise=self.noise(self["train.noise"]), **self._train_kw("train"))

    def finetune_train(self, noise_kind: str | None = None) -> TrainConfig:
        loss = LossKind.AFFINE_DEPTH if self["data.task"] == "depth" else LossKind.ANGULAR_NORMALS
        return e2e_config(loss=loss, noise=self.noise(noise_kind or self["finetune.noise"]),
                          **self._train_kw("finetune"))

    def path(self, key: str) -> Path:
        return Path(self[f"paths.{key}"])
