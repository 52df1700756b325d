"""Level-by-level annealing of a velocity field from tilt ``a = 0`` to ``a = 1``.

Each level freezes the current model as the reference ``b_{t,a}``, refreshes a
buffer of endpoint samples by integrating that reference, and then trains the
(warm-started) trainee for ``epochs_per_level`` optimizer steps on the chosen
tilt objective.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .interpolant import InterpolantSchedule, make_linear_schedule, sample_interpolant_batch, sample_times
from .losses import EXP_CLIP, LOSSES, LossBatch, compute_loss, constant_cv, flow_matching_loss
from .sampler import importance_weights, integrate_ode, mala_refine
from .targets import Reward, Target
from .velocity import Adam, VelocityModel, load_checkpoint, save_checkpoint, train_step

ANNEAL_LOSSES = ("ETM", "ITM", "cITM_sg", "cITM_rw", "WFM")
_LEVEL_TOL = 1e-12


class AnnealAbort(RuntimeError):
    """Raised when the run cannot continue; ``trace`` holds the records so far."""

    def __init__(self, message: str, trace: list, state: "AnnealState | None" = None):
        super().__init__(message)
        self.trace = trace
        self.state = state


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named component, e.g. ``substream(0, "buffer", k)``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *[int(k) for k in keys]])


@dataclass
class AdaptiveConfig:
    ess_floor: float = 0.3
    h_shrink: float = 0.5
    h_grow: float = 1.25
    h_max: float = 0.1
    h_min: float = 1e-6


def adapt_step(trace: list, h: float, ess: float, adaptive: AdaptiveConfig) -> float:
    """Next tilt step from the current ESS.

    Shrinks ``h`` when ``ess < ess_floor``, unless the previous level's ESS in
    ``trace`` was lower (the run is already recovering). Grows ``h`` by
    ``h_grow`` up to ``h_max`` when ``ess > 2 ess_floor``.
    """
    prev = next((rec["ess"] for rec in reversed(trace) if rec.get("ess") is not None), None)
    if ess < adaptive.ess_floor:
        if prev is not None and ess > prev:
            return h
        return max(h * adaptive.h_shrink, adaptive.h_min)
    if ess > 2.0 * adaptive.ess_floor:
        return max(h, min(h * adaptive.h_grow, adaptive.h_max))
    return h


@dataclass
class AnnealConfig:
    """Settings for :func:`run_anneal`.

    Either ``levels`` (ascending from 0 to 1) or ``fixed_h`` must be given.
    With ``adaptive`` set, levels are generated on the fly starting from
    ``fixed_h`` (or the first gap of ``levels``).
    """

    levels: Optional[list] = None
    fixed_h: Optional[float] = None
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
    adaptive: Optional[AdaptiveConfig] = None
    ess_hard_floor: float = 0.05
    ess_samples: int = 1024
    importance_resample: bool = False
    ode_steps: int = 100
    integrator: str = "euler"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_floor: float = 0.05
    clip: Optional[float] = EXP_CLIP
    reset_optimizer: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.levels is None and self.fixed_h is None:
            raise ValueError("give either levels or fixed_h")
        if self.levels is not None:
            lv = np.asarray(self.levels, dtype=np.float64)
            if lv.ndim != 1 or lv.size < 2:
                raise ValueError("levels needs at least two entries")
            if lv[0] != 0.0:
                raise ValueError(f"levels must start at 0, got {lv[0]}")
            if abs(lv[-1] - 1.0) > _LEVEL_TOL:
                raise ValueError(f"levels must end at 1, got {lv[-1]}")
            if np.any(np.diff(lv) <= 0):
                raise ValueError("levels must be strictly increasing")
            self.levels = [float(v) for v in lv]
        if self.fixed_h is not None and not 0.0 < self.fixed_h <= 1.0:
            raise ValueError(f"fixed_h must lie in (0, 1], got {self.fixed_h}")
        if self.loss not in ANNEAL_LOSSES:
            raise ValueError(f"loss must be one of {ANNEAL_LOSSES}, got {self.loss!r}")
        if self.refresh_policy not in ("every_level", "never"):
            raise ValueError("refresh_policy must be 'every_level' or 'never'")
        if self.epoch_semantics not in ("minibatch", "full_pass"):
            raise ValueError("epoch_semantics must be 'minibatch' or 'full_pass'")
        for name in ("epochs_per_level", "batch_size", "buffer_size", "ode_steps", "ess_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.integrator not in ("euler", "heun"):
            raise ValueError("integrator must be 'euler' or 'heun'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.mala_steps < 0:
            raise ValueError("mala_steps must be non-negative")

    def initial_h(self) -> float:
        return self.fixed_h if self.fixed_h is not None else self.levels[1] - self.levels[0]


@dataclass
class TiltProblem:
    """Base law ``rho_0``, untilted endpoint ``rho_{1,0}`` and reward ``r``."""

    base: Target
    prior: Target
    reward: Reward
    schedule: InterpolantSchedule = field(default_factory=make_linear_schedule)

    @property
    def dim(self) -> int:
        return self.base.dim

    def log_target(self, a: float) -> Callable:
        return lambda x: self.prior.log_density(x) + a * self.reward(x)

    def score_target(self, a: float) -> Callable | None:
        if self.prior.score is None or self.reward.grad is None:
            return None
        return lambda x: self.prior.score(x) + a * self.reward.grad(x)


@dataclass
class AnnealState:
    k: int
    a: float
    h: float
    model: VelocityModel
    optimizer: Adam
    buffer: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)

    @classmethod
    def initial(cls, config: AnnealConfig, base_model: VelocityModel) -> "AnnealState":
        return cls(k=0, a=0.0, h=config.initial_h(), model=base_model.copy(),
                   optimizer=Adam(lr=config.lr))

    @property
    def done(self) -> bool:
        return self.a >= 1.0 - _LEVEL_TOL

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.model, d / "model.tmck")
        opt = self.optimizer.state_dict()
        np.savez(d / "arrays.npz",
                 m=opt["m"] if opt["m"] is not None else np.zeros(0),
                 v=opt["v"] if opt["v"] is not None else np.zeros(0),
                 buffer=self.buffer if self.buffer is not None else np.zeros((0, 0)))
        meta = {"k": self.k, "a": self.a, "h": self.h, "trace": self.trace,
                "has_buffer": self.buffer is not None,
                "optimizer": {key: val for key, val in opt.items() if key not in ("m", "v")},
                "has_moments": opt["m"] is not None}
        (d / "state.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory) -> "AnnealState":
        d = Path(directory)
        meta = json.loads((d / "state.json").read_text())
        arrays = np.load(d / "arrays.npz")
        opt = dict(meta["optimizer"])
        opt["m"] = arrays["m"].copy() if meta["has_moments"] else None
        opt["v"] = arrays["v"].copy() if meta["has_moments"] else None
        return cls(k=meta["k"], a=meta["a"], h=meta["h"], model=load_checkpoint(d / "model.tmck"),
                   optimizer=Adam.from_state_dict(opt),
                   buffer=arrays["buffer"].copy() if meta["has_buffer"] else None,
                   trace=meta["trace"])


@dataclass
class AnnealResult:
    model: VelocityModel
    trace: list
    state: AnnealState
    final_ess: Optional[float] = None


def _next_level(config: AnnealConfig, state: AnnealState) -> float:
    if config.levels is not None and config.adaptive is None:
        return config.levels[state.k + 1]
    nxt = state.a + state.h
    return 1.0 if nxt > 1.0 - _LEVEL_TOL else nxt


def measure_ess(model: VelocityModel, problem: TiltProblem, a: float, n: int, ode_steps: int,
                rng: np.random.Generator, integrator: str = "euler"):
    """Draw ``n`` model samples with likelihoods and weight them against ``rho_{1,a}``."""
    x0 = problem.base.sampler(rng, n)
    traj = integrate_ode(model, x0, ode_steps, with_likelihood=True, method=integrator, rng=rng)
    keep = ~traj.failed
    log_p = problem.base.log_density(traj.x0[keep]) + traj.log_det[keep]
    return importance_weights(traj.x1[keep], log_p, problem.log_target(a)(traj.x1[keep]))


def _fill_buffer(config, problem, frozen, a, k, state):
    rng = substream(config.seed, "buffer", k)
    if config.importance_resample:
        ws = measure_ess(frozen, problem, a, config.buffer_size, config.ode_steps, rng, config.integrator)
        points = ws.resample(substream(config.seed, "resample", k))
        return points, ws.ess
    traj = integrate_ode(frozen, problem.base.sampler(rng, config.buffer_size), config.ode_steps,
                         method=config.integrator, rng=rng)
    return traj.x1[~traj.failed], None


def _minibatches(config, n_buffer, rng):
    if config.epoch_semantics == "minibatch":
        for _ in range(config.epochs_per_level):
            yield rng.integers(0, n_buffer, size=config.batch_size)
        return
    for _ in range(config.epochs_per_level):
        perm = rng.permutation(n_buffer)
        for start in range(0, n_buffer, config.batch_size):
            yield perm[start:start + config.batch_size]


def _level_lr(config: AnnealConfig, step: int, n_steps: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    frac = config.lr_floor + (1.0 - config.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * step / n_steps))
    return config.lr * frac


def run_anneal(config: AnnealConfig, problem: TiltProblem, base_model: VelocityModel,
               state: AnnealState | None = None, trace_path=None, max_levels: int | None = None,
               on_step: Callable | None = None, measure_final_ess: bool = True) -> AnnealResult:
    """Run (or resume) the annealing loop.

    ``on_step(k, step, frozen_ref, trainee)`` is called after every optimizer
    step. Every stochastic choice draws from a substream keyed by the level
    index, so a run resumed from a saved :class:`AnnealState` reproduces an
    uninterrupted one.
    """
    state = state or AnnealState.initial(config, base_model)
    trace_file = Path(trace_path) if trace_path is not None else None
    cv = constant_cv(config.cv_value)
    levels_run = 0
    while not state.done and (max_levels is None or levels_run < max_levels):
        t_start = time.perf_counter()
        k, a = state.k, state.a
        frozen = state.model.copy()

        ess_value = None
        if state.buffer is None or config.refresh_policy == "every_level":
            state.buffer, ess_value = _fill_buffer(config, problem, frozen, a, k, state)
        if ess_value is None:
            ws = measure_ess(frozen, problem, a, config.ess_samples, config.ode_steps,
                             substream(config.seed, "ess", k), config.integrator)
            ess_value = ws.ess
        if config.mala_steps > 0:
            score = problem.score_target(a)
            if score is None:
                raise AnnealAbort("MALA needs a target score", state.trace, state)
            res = mala_refine(state.buffer, problem.log_target(a), score, config.mala_step_size,
                              config.mala_steps, substream(config.seed, "mala", k),
                              n_warmup=config.mala_warmup)
            state.buffer = res.points

        if config.adaptive is None:
            if ess_value < config.ess_hard_floor:
                raise AnnealAbort(f"ESS {ess_value:.4f} below hard floor {config.ess_hard_floor} at a={a}",
                                  state.trace, state)
        else:
            state.h = adapt_step(state.trace, state.h, ess_value, config.adaptive)
        a_next = _next_level(config, state)
        h = a_next - a

        if config.reset_optimizer:
            state.optimizer = Adam(lr=config.lr)
        rng = substream(config.seed, "train", k)
        losses, grad_norms, clips = [], [], 0
        batches = list(_minibatches(config, state.buffer.shape[0], rng))
        for step, idx in enumerate(batches):
            state.optimizer.lr = _level_lr(config, step, len(batches))
            x1 = state.buffer[idx]
            x0 = problem.base.sampler(rng, idx.size)
            t = sample_times(rng, idx.size)
            samples = sample_interpolant_batch(problem.schedule, x0, x1, t, problem.reward)
            batch = LossBatch(samples, state.model, h, frozen, None, config.clip)
            report = compute_loss(config.loss, batch, cv)
            train_step(state.model, report, state.optimizer)
            losses.append(report.loss_value)
            grad_norms.append(float(np.linalg.norm(report.grad)))
            clips += report.clip_count
            if on_step is not None:
                on_step(k, step, frozen, state.model)

        record = {"k": k, "a": a_next, "h": h, "ess": ess_value,
                  "mean_loss": float(np.mean(losses)), "grad_norm": float(np.mean(grad_norms)),
                  "clip_count": clips, "wall_ms": 1e3 * (time.perf_counter() - t_start)}
        state.trace.append(record)
        if trace_file is not None:
            with trace_file.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        state.k, state.a = k + 1, a_next
        levels_run += 1

    final_ess = None
    if state.done and measure_final_ess:
        final_ess = measure_ess(state.model, problem, 1.0, config.ess_samples, config.ode_steps,
                                substream(config.seed, "ess", state.k), config.integrator).ess
    return AnnealResult(state.model, state.trace, state, final_ess)


def pretrain_flow_matching(model: VelocityModel, problem: TiltProblem, n_steps: int, batch_size: int,
                           rng: np.random.Generator, lr: float = 1e-3, target_samples=None,
                           lr_decay: bool = True) -> list:
    """Fit ``b_{t,0}`` by flow matching between ``rho_0`` and ``rho_{1,0}``.

    Endpoint draws come from ``problem.prior.sampler`` or, when the prior has
    no exact sampler, from ``target_samples``. With ``lr_decay`` the learning
    rate follows a cosine schedule down to 1% of ``lr``.
    """
    if problem.prior.sampler is None and target_samples is None:
        raise ValueError("pretraining needs an exact prior sampler or target_samples")
    opt = Adam(lr=lr)
    history = []
    for step in range(n_steps):
        if lr_decay:
            opt.lr = lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * step / n_steps)))
        if problem.prior.sampler is not None:
            x1 = problem.prior.sampler(rng, batch_size)
        else:
            x1 = target_samples[rng.integers(0, target_samples.shape[0], size=batch_size)]
        x0 = problem.base.sampler(rng, batch_size)
        samples = sample_interpolant_batch(problem.schedule, x0, x1, sample_times(rng, batch_size))
        report = flow_matching_loss(LossBatch(samples, model))
        train_step(model, report, opt)
        history.append(report.loss_value)
    return history


def distill_velocity(model: VelocityModel, reference: Callable, sample_x: Callable, n_steps: int,
                     batch_size: int, rng: np.random.Generator, lr: float = 1e-3) -> list:
    """Regress ``model`` onto a known field ``reference(t, x)``.

    ``sample_x(rng, t)`` draws one point per time in ``t``. Uses a cosine
    learning-rate decay to 1% of ``lr``.
    """
    opt = Adam(lr=lr)
    history = []
    for step in range(n_steps):
        opt.lr = lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * step / n_steps)))
        t = sample_times(rng, batch_size)
        x = sample_x(rng, t)
        out, pullback = model.forward_with_pullback(t, x)
        resid = out - reference(t, x)
        opt.update(model.params, pullback(2.0 * resid / batch_size))
        history.append(float(np.mean(np.sum(resid ** 2, axis=1))))
    return history


def config_dict(config: AnnealConfig) -> dict:
    return asdict(config)

