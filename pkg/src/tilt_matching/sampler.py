"""ODE sampling, likelihoods, importance weights and MALA refinement."""

from __future__ import annotations

import csv
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .velocity import VelocityModel

FD_STEP = 1e-4
DEFAULT_PROBES = 8
EXACT_DIVERGENCE_MAX_DIM = 3
THREADS_ENV = "TM_NUM_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _evaluate(model: VelocityModel, t: float, x: np.ndarray, pool: ThreadPoolExecutor | None):
    if pool is None or x.shape[0] < 2 * pool._max_workers:
        return model(np.full(x.shape[0], t), x)
    chunks = np.array_split(np.arange(x.shape[0]), pool._max_workers)
    parts = pool.map(lambda idx: model(np.full(idx.size, t), x[idx]), chunks)
    return np.concatenate(list(parts), axis=0)


def divergence(model: VelocityModel, t: float, x: np.ndarray, method: str = "auto",
               n_probes: int = DEFAULT_PROBES, rng: np.random.Generator | None = None,
               step: float = FD_STEP, pool=None) -> np.ndarray:
    """``div_x b(t, x)`` per row of ``x``.

    ``exact`` sums central differences of each output component along its
    own axis. ``hutchinson`` averages ``eps^T (b(x + s eps) - b(x - s eps)) / 2s``
    over Rademacher probes. ``auto`` picks exact up to dimension 3.
    """
    n, d = x.shape
    if method == "auto":
        method = "exact" if d <= EXACT_DIVERGENCE_MAX_DIM else "hutchinson"
    out = np.zeros(n)
    if method == "exact":
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            out += (_evaluate(model, t, x + e, pool)[:, j] - _evaluate(model, t, x - e, pool)[:, j]) / (2 * step)
        return out
    if method != "hutchinson":
        raise ValueError(f"unknown divergence method {method!r}")
    if rng is None:
        raise ValueError("Hutchinson divergence needs an rng")
    for _ in range(n_probes):
        eps = rng.choice([-1.0, 1.0], size=(n, d))
        diff = _evaluate(model, t, x + step * eps, pool) - _evaluate(model, t, x - step * eps, pool)
        out += np.sum(eps * diff, axis=1) / (2 * step)
    return out / n_probes


@dataclass
class Trajectory:
    """Result of integrating ``dx/dt = b(t, x)`` from ``t = 0`` to ``1``.

    ``log_det`` holds ``-int div b dt`` per sample (zeros when the
    likelihood was not requested). ``failed`` marks samples whose state went
    non-finite; such samples keep their last finite state.
    """

    times: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    log_det: np.ndarray
    failed: np.ndarray
    states: Optional[np.ndarray] = None

    def log_p1(self, log_p0: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return log_p0(self.x0) + self.log_det


def integrate_ode(model: VelocityModel, x0, n_steps: int = 100, with_likelihood: bool = False,
                  method: str = "euler", divergence_method: str = "auto",
                  n_probes: int = DEFAULT_PROBES, rng: np.random.Generator | None = None,
                  keep_path: bool = False, n_threads: int | None = None) -> Trajectory:
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if method not in ("euler", "heun"):
        raise ValueError(f"unknown integrator {method!r}")
    x = np.array(x0, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    x_start = x.copy()
    n = x.shape[0]
    times = np.linspace(0.0, 1.0, n_steps + 1)
    log_det = np.zeros(n)
    failed = np.zeros(n, dtype=bool)
    path = [x.copy()] if keep_path else None
    n_threads = default_threads() if n_threads is None else n_threads
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None

    def div(t, y):
        return divergence(model, t, y, divergence_method, n_probes, rng, pool=pool)

    try:
        for k in range(n_steps):
            t, dt = times[k], times[k + 1] - times[k]
            live = ~failed
            y = x[live]
            v = _evaluate(model, t, y, pool)
            if method == "euler":
                y_new = y + dt * v
                d_int = dt * div(t, y) if with_likelihood else 0.0
            else:
                y_pred = y + dt * v
                v2 = _evaluate(model, times[k + 1], y_pred, pool)
                y_new = y + 0.5 * dt * (v + v2)
                d_int = 0.5 * dt * (div(t, y) + div(times[k + 1], y_pred)) if with_likelihood else 0.0
            ok = np.all(np.isfinite(y_new), axis=1) & np.isfinite(d_int)
            idx = np.flatnonzero(live)
            x[idx[ok]] = y_new[ok]
            if with_likelihood:
                log_det[idx[ok]] -= np.broadcast_to(d_int, ok.shape)[ok]
            failed[idx[~ok]] = True
            if keep_path:
                path.append(x.copy())
    finally:
        if pool is not None:
            pool.shutdown()
    return Trajectory(times, x_start, x, log_det, failed,
                      np.stack(path) if keep_path else None)


# --------------------------------------------------------------------------
# Importance weights


def ess(log_weights) -> float:
    """Normalised effective sample size ``(sum w)^2 / (N sum w^2)`` in ``(0, 1]``."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise ValueError("all importance weights are zero")
    value = np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)) / lw.size
    return float(min(value, 1.0))


@dataclass
class WeightedSamples:
    points: np.ndarray
    log_weights: np.ndarray
    ess: float

    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def resample(self, rng: np.random.Generator) -> np.ndarray:
        """Systematic resampling by the self-normalised weights."""
        w = self.normalized_weights()
        n = w.size
        positions = (rng.uniform() + np.arange(n)) / n
        idx = np.minimum(np.searchsorted(np.cumsum(w), positions), n - 1)
        return self.points[idx]


def importance_weights(points, log_p_model, target_log_density) -> WeightedSamples:
    """``log w = log rho_target(x) - log p_model(x)``; the target may be unnormalised.

    ``log_p_model`` and ``target_log_density`` may be arrays or callables.
    """
    points = np.asarray(points, dtype=np.float64)
    lp = np.asarray(log_p_model(points) if callable(log_p_model) else log_p_model, dtype=np.float64)
    lt = np.asarray(target_log_density(points) if callable(target_log_density) else target_log_density,
                    dtype=np.float64)
    if not np.any(np.isfinite(lt)):
        raise ValueError("target log-density is -inf at every point")
    log_w = lt - lp
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    return WeightedSamples(points, log_w, ess(log_w))


# --------------------------------------------------------------------------
# MALA


def _mala_log_q(x_to, x_from, score_from, step):
    diff = x_to - x_from - step * score_from
    return -np.sum(diff * diff, axis=1) / (4.0 * step)


def mala_log_accept_ratio(x, x_new, log_density, score, step: float) -> np.ndarray:
    """Log Metropolis-Hastings ratio for a Langevin proposal from ``x`` to ``x_new``."""
    return (log_density(x_new) - log_density(x)
            + _mala_log_q(x, x_new, score(x_new), step)
            - _mala_log_q(x_new, x, score(x), step))


@dataclass
class MalaResult:
    points: np.ndarray
    acceptance_rate: float
    step_size: float


def mala_refine(points, log_density: Callable, score: Callable, step_size: float, n_steps: int,
                rng: np.random.Generator, n_warmup: int = 0,
                target_accept=(0.5, 0.7)) -> MalaResult:
    """Run an independent MALA chain from every point.

    During ``n_warmup`` extra leading steps the step size is rescaled every
    10 steps until the acceptance rate lies in ``target_accept``. The
    reported acceptance rate covers the post-warmup steps only.
    """
    x = np.array(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if step_size == 0.0 or n_steps + n_warmup == 0:
        return MalaResult(x, 1.0, step_size)
    step = float(step_size)
    lo, hi = target_accept
    lp, sc = log_density(x), score(x)
    window, accepted_total = [], 0
    for k in range(n_warmup + n_steps):
        prop = x + step * sc + np.sqrt(2.0 * step) * rng.standard_normal(x.shape)
        lp_new, sc_new = log_density(prop), score(prop)
        log_ratio = (lp_new - lp + _mala_log_q(x, prop, sc_new, step) - _mala_log_q(prop, x, sc, step))
        accept = np.log(rng.uniform(size=x.shape[0])) < np.where(np.isfinite(log_ratio), log_ratio, -np.inf)
        x[accept], lp[accept], sc[accept] = prop[accept], lp_new[accept], sc_new[accept]
        if k < n_warmup:
            window.append(accept.mean())
            if len(window) == 10:
                rate = float(np.mean(window))
                if rate < lo:
                    step *= 0.7
                elif rate > hi:
                    step *= 1.3
                window = []
        else:
            accepted_total += int(accept.sum())
    return MalaResult(x, accepted_total / (n_steps * x.shape[0]) if n_steps else float("nan"), step)


# --------------------------------------------------------------------------
# Sample dumps
#
# Binary layout (little-endian): u32 rows, u32 cols, then rows*cols float64
# values in row-major order.


def write_samples(path, samples, fmt: str | None = None) -> None:
    path = Path(path)
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    fmt = fmt or ("csv" if path.suffix == ".csv" else "bin")
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j}" for j in range(arr.shape[1])])
            writer.writerows([[repr(float(v)) for v in row] for row in arr])
    elif fmt == "bin":
        with path.open("wb") as fh:
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))
    else:
        raise ValueError(f"unknown sample format {fmt!r}")


def read_samples(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))
    data = path.read_bytes()
    rows, cols = struct.unpack_from("<II", data, 0)
    arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=8)
    return arr.reshape(rows, cols).astype(np.float64)
