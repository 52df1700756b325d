"""Run configuration files.

A config is an INI file with one section per component::

    [experiment]  name, seed, output_dir
    [target]      kind = gaussian | gmm | double_well | lennard_jones, plus its parameters
    [reward]      kind = linear | quadratic | temperature | zero
    [schedule]    kind = linear
    [model]       backend = mlp | grid | analytic, architecture and pretraining
    [anneal]      tilt levels, loss and optimisation settings
    [metrics]     final sample count, integrator and dump format

Vectors are comma-separated; matrices are given flattened in row-major order.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .anneal import AdaptiveConfig, AnnealConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending section and key."""


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"


@dataclass
class TargetSpec:
    kind: str = "gaussian"
    mean: tuple = (0.0,)
    cov: tuple = (1.0,)
    n_modes: int = 4
    radius: float = 2.0
    std: float = 0.5
    scale: float = 0.5
    n_particles: int = 13
    epsilon: float = 2.0
    r_m: float = 1.0
    tau: float = 1.0
    harmonic: bool = True
    lj_form: str = "standard"


@dataclass
class RewardSpec:
    kind: str = "linear"
    c: tuple = (1.0,)
    Q: tuple = ()
    temperature: float = 3.0


@dataclass
class ScheduleSpec:
    kind: str = "linear"


@dataclass
class ModelSpec:
    backend: str = "mlp"
    hidden: tuple = (64, 64, 64)
    activation: str = "tanh"
    grid_n_t: int = 32
    grid_n_x: int = 64
    grid_lo: float = -5.0
    grid_hi: float = 5.0
    pretrain: str = "auto"
    pretrain_steps: int = 6000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 512
    prior_samples: int = 20000


@dataclass
class AnnealSpec:
    levels: tuple = ()
    fixed_h: Optional[float] = field(default=0.02, metadata={"type": float})
    epochs_per_level: int = 400
    batch_size: int = 1024
    loss: str = "ITM"
    cv_value: float = 1.0
    buffer_size: int = 4096
    refresh_policy: str = "every_level"
    epoch_semantics: str = "minibatch"
    mala_steps: int = 0
    mala_step_size: float = 0.05
    mala_warmup: int = 100
    adaptive: bool = False
    ess_floor: float = 0.3
    h_max: float = 0.1
    ess_hard_floor: float = 0.05
    ess_samples: int = 1024
    importance_resample: bool = False
    ode_steps: int = 100
    integrator: str = "euler"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    clip: Optional[float] = field(default=30.0, metadata={"type": float})


@dataclass
class MetricsSpec:
    n_samples: int = 10000
    ode_steps: int = 100
    integrator: str = "euler"
    dump_format: str = "bin"


SECTIONS = {
    "experiment": ExperimentSpec,
    "target": TargetSpec,
    "reward": RewardSpec,
    "schedule": ScheduleSpec,
    "model": ModelSpec,
    "anneal": AnnealSpec,
    "metrics": MetricsSpec,
}


@dataclass
class RunConfig:
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    target: TargetSpec = field(default_factory=TargetSpec)
    reward: RewardSpec = field(default_factory=RewardSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    anneal: AnnealSpec = field(default_factory=AnnealSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for name in SECTIONS:
            spec = getattr(self, name)
            parser[name] = {f.name: _format(getattr(spec, f.name)) for f in fields(spec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    def anneal_config(self) -> AnnealConfig:
        a = self.anneal
        adaptive = AdaptiveConfig(ess_floor=a.ess_floor, h_max=a.h_max) if a.adaptive else None
        try:
            return AnnealConfig(
                levels=list(a.levels) if a.levels else None,
                fixed_h=None if a.levels and not a.adaptive else a.fixed_h,
                epochs_per_level=a.epochs_per_level, batch_size=a.batch_size, loss=a.loss,
                cv_value=a.cv_value, buffer_size=a.buffer_size, refresh_policy=a.refresh_policy,
                epoch_semantics=a.epoch_semantics, mala_steps=a.mala_steps,
                mala_step_size=a.mala_step_size, mala_warmup=a.mala_warmup, adaptive=adaptive,
                ess_hard_floor=a.ess_hard_floor, ess_samples=a.ess_samples,
                importance_resample=a.importance_resample, ode_steps=a.ode_steps,
                integrator=a.integrator, lr=a.lr, lr_schedule=a.lr_schedule, clip=a.clip,
                seed=self.experiment.seed,
            )
        except ValueError as exc:
            raise ConfigError(f"[anneal] {exc}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind):
    if kind is bool:
        low = text.strip().lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    return kind(text.strip())


def _parse_value(text: str, f):
    default = f.default
    kind = f.metadata.get("type") if f.metadata else None
    if kind is not None:
        return None if text.strip().lower() == "none" else _parse_scalar(text, kind)
    if isinstance(default, tuple):
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        elem = type(default[0]) if default else float
        return tuple(_parse_scalar(p, elem) for p in parts)
    return _parse_scalar(text, type(default))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in SECTIONS.items():
        known = {f.name: f for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser[name].items():
                if key not in known:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                try:
                    values[key] = _parse_value(raw, known[key])
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"[{name}] {key}: {exc}") from None
        sections[name] = cls(**values)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def validate(cfg: RunConfig) -> None:
    choices = {
        ("target", "kind"): ("gaussian", "gmm", "double_well", "lennard_jones"),
        ("target", "lj_form"): ("standard", "as_written"),
        ("reward", "kind"): ("linear", "quadratic", "temperature", "zero"),
        ("schedule", "kind"): ("linear",),
        ("model", "backend"): ("mlp", "grid", "analytic"),
        ("model", "activation"): ("tanh", "silu"),
        ("model", "pretrain"): ("auto", "distill", "flow_matching", "none"),
        ("metrics", "integrator"): ("euler", "heun"),
        ("metrics", "dump_format"): ("bin", "csv"),
    }
    for (section, key), allowed in choices.items():
        value = getattr(getattr(cfg, section), key)
        if value not in allowed:
            raise ConfigError(f"[{section}] {key}: {value!r} not in {allowed}")
    t = cfg.target
    if t.kind == "gaussian":
        d = len(t.mean)
        if d == 0 or len(t.cov) != d * d:
            raise ConfigError(f"[target] cov: expected {d * d} entries for a {d}-dimensional mean")
    if cfg.reward.kind in ("linear", "quadratic") and t.kind == "gaussian":
        if len(cfg.reward.c) != len(t.mean):
            raise ConfigError("[reward] c: length must match the target dimension")
    if cfg.reward.kind == "quadratic" and len(cfg.reward.Q) != len(t.mean) ** 2:
        raise ConfigError("[reward] Q: expected a flattened square matrix")
    if cfg.reward.kind == "temperature" and cfg.reward.temperature <= 0:
        raise ConfigError("[reward] temperature: must be positive")
    if cfg.model.backend == "analytic" and (t.kind != "gaussian" or cfg.reward.kind == "temperature"):
        raise ConfigError("[model] backend: analytic requires a Gaussian target with a linear or quadratic reward")
    dim = {"gaussian": len(t.mean), "gmm": 2, "double_well": 1}.get(t.kind, 3 * t.n_particles)
    if cfg.model.backend == "grid" and dim > 2:
        raise ConfigError("[model] backend: grid supports dimension 1 or 2 only")
    if cfg.metrics.n_samples < 1:
        raise ConfigError("[metrics] n_samples: must be positive")
    cfg.anneal_config()
