"""Regression objectives for tilting a velocity field from level ``a`` to ``a + h``.

Each loss takes a :class:`LossBatch` and returns a
:class:`~tilt_matching.velocity.GradientReport` whose ``grad`` is taken with
respect to the trainee's parameters only. Stop-gradient terms are evaluated
as plain values and never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interpolant import SampleBatch
from .velocity import GradientReport, VelocityModel

# Tilt exponents h * r are clamped to this range before exponentiation.
EXP_CLIP = 30.0


class TiltOverflowError(FloatingPointError):
    pass


def tilt_weights(h: float, reward: np.ndarray, clip: float | None = EXP_CLIP):
    """``exp(h r)`` with the exponent clamped to ``[-clip, clip]``.

    Returns ``(weights, n_clipped)``. With ``clip=None`` an exponent that
    would overflow raises :class:`TiltOverflowError` naming the reward.
    """
    reward = np.asarray(reward, dtype=np.float64)
    if not np.all(np.isfinite(reward)):
        bad = reward[~np.isfinite(reward)][0]
        raise TiltOverflowError(f"non-finite reward value {bad}")
    expo = h * reward
    if clip is None:
        over = expo > np.log(np.finfo(np.float64).max)
        if over.any():
            raise TiltOverflowError(
                f"exp(h * r) overflows for reward {reward[over][0]!r} at h={h}")
        return np.exp(expo), 0
    n_clipped = int(np.count_nonzero(np.abs(expo) > clip))
    return np.exp(np.clip(expo, -clip, clip)), n_clipped


@dataclass
class LossBatch:
    """Samples drawn at level ``a`` plus the models a tilt objective needs.

    ``trainee_detached`` supplies the stop-gradient copy of the trainee; when
    omitted the trainee's own forward values are reused without
    differentiation.
    """

    samples: SampleBatch
    trainee: VelocityModel
    h: float = 0.0
    frozen_ref: VelocityModel | None = None
    trainee_detached: VelocityModel | None = None
    clip: float | None = EXP_CLIP

    def __post_init__(self):
        if self.h < 0:
            raise ValueError(f"tilt step h must be non-negative, got {self.h}")
        if len(self.samples) == 0:
            raise ValueError("empty batch")

    def reference_values(self) -> np.ndarray:
        if self.frozen_ref is None:
            raise ValueError("this objective needs a frozen reference model")
        return self.frozen_ref(self.samples.t, self.samples.I)


@dataclass
class ControlVariate:
    """Scalar control variate ``c_t(x)``: a constant or ``offset + net(t, x)``."""

    value: float | None = 1.0
    model: VelocityModel | None = None
    offset: float = 0.0

    @property
    def learned(self) -> bool:
        return self.model is not None

    def __call__(self, t, x) -> np.ndarray:
        return self.forward_with_pullback(t, x)[0]

    def forward_with_pullback(self, t, x):
        if self.model is None:
            n = np.asarray(x).shape[0]
            return np.full(n, float(self.value)), None
        out, pullback = self.model.forward_with_pullback(t, x)
        return self.offset + out[:, 0], pullback


def constant_cv(value: float) -> ControlVariate:
    return ControlVariate(value=float(value))


def learned_cv(model: VelocityModel, offset: float = 1.0) -> ControlVariate:
    if model.out_dim != 1:
        raise ValueError("a learned control variate needs a scalar-output network")
    return ControlVariate(value=None, model=model, offset=offset)


def _report(out, resid_weighted, loss_per_sample, pullback, n, clip_count=0, cv_grad=None):
    output_grad = resid_weighted / n
    return GradientReport(
        loss_value=float(np.mean(loss_per_sample)),
        grad=pullback(output_grad),
        output_grad=output_grad,
        clip_count=clip_count,
        cv_grad=cv_grad,
    )


def flow_matching_loss(batch: LossBatch) -> GradientReport:
    """Mean ``|b_hat(t, I) - I_dot|^2``."""
    s = batch.samples
    out, pullback = batch.trainee.forward_with_pullback(s.t, s.I)
    resid = out - s.I_dot
    return _report(out, 2.0 * resid, np.sum(resid ** 2, axis=1), pullback, len(s))


def etm_target(samples: SampleBatch, frozen_ref: VelocityModel, h: float) -> np.ndarray:
    """``b_ref(I) + h r(x1) (I_dot - b_ref(I))``."""
    b_ref = frozen_ref(samples.t, samples.I)
    return b_ref + h * samples.reward[:, None] * (samples.I_dot - b_ref)


def etm_loss(batch: LossBatch) -> GradientReport:
    s = batch.samples
    target = etm_target(s, batch.frozen_ref, batch.h)
    out, pullback = batch.trainee.forward_with_pullback(s.t, s.I)
    resid = out - target
    return _report(out, 2.0 * resid, np.sum(resid ** 2, axis=1), pullback, len(s))


def _itm_target(b_ref, b_det, samples, h, clip):
    w, n_clipped = tilt_weights(h, samples.reward, clip)
    return b_ref + (w - 1.0)[:, None] * (samples.I_dot - b_det), n_clipped


def itm_target(samples: SampleBatch, frozen_ref: VelocityModel, trainee_detached: VelocityModel,
               h: float, clip: float | None = EXP_CLIP) -> np.ndarray:
    """``b_ref(I) + (exp(h r) - 1) (I_dot - stopgrad(b_hat)(I))``."""
    b_ref = frozen_ref(samples.t, samples.I)
    b_det = trainee_detached(samples.t, samples.I)
    return _itm_target(b_ref, b_det, samples, h, clip)[0]


def _detached_values(batch: LossBatch, out: np.ndarray) -> np.ndarray:
    if batch.trainee_detached is None:
        return out.copy()
    return batch.trainee_detached(batch.samples.t, batch.samples.I)


def itm_loss(batch: LossBatch) -> GradientReport:
    """Mean ``|b_hat(I) - T_ITM|^2`` with the target held fixed."""
    s = batch.samples
    out, pullback = batch.trainee.forward_with_pullback(s.t, s.I)
    target, n_clipped = _itm_target(batch.reference_values(), _detached_values(batch, out), s,
                                    batch.h, batch.clip)
    resid = out - target
    return _report(out, 2.0 * resid, np.sum(resid ** 2, axis=1), pullback, len(s), n_clipped)


def c_itm_sg_loss(batch: LossBatch, cv: ControlVariate) -> GradientReport:
    """Stop-gradient control-variate objective.

    Per sample ``|c (b_hat - b_ref) + (w - c) (stopgrad(b_hat) - I_dot)|^2``,
    evaluated as ``|c (b_hat - T_c)|^2`` with
    ``T_c = b_ref + ((w - c) / c) (I_dot - stopgrad(b_hat))``; requires ``c != 0``.
    """
    s = batch.samples
    out, pullback = batch.trainee.forward_with_pullback(s.t, s.I)
    c, cv_pullback = cv.forward_with_pullback(s.t, s.I)
    if np.any(c == 0.0):
        raise ValueError("the stop-gradient objective is undefined for a zero control variate")
    w, n_clipped = tilt_weights(batch.h, s.reward, batch.clip)
    b_ref = batch.reference_values()
    b_det = _detached_values(batch, out)
    target = b_ref + ((w - c) / c)[:, None] * (s.I_dot - b_det)
    resid = c[:, None] * (out - target)
    n = len(s)
    cv_grad = None
    if cv_pullback is not None:
        dresid_dc = (out - b_ref) - (b_det - s.I_dot)
        cv_grad = cv_pullback((2.0 * np.sum(resid * dresid_dc, axis=1) / n)[:, None])
    return _report(out, 2.0 * c[:, None] * resid, np.sum(resid ** 2, axis=1), pullback, n,
                   n_clipped, cv_grad)


def c_itm_reweighted_loss(batch: LossBatch, cv: ControlVariate) -> GradientReport:
    """Reweighted control-variate objective, valid for any ``c`` including 0.

    ``exp(-h r) |c (b_hat - b_ref) + (w - c) (b_hat - I_dot)|^2`` equals
    ``w |b_hat - T|^2`` with ``T = I_dot + (c / w) (b_ref - I_dot)``; the
    latter form is what is computed.
    """
    s = batch.samples
    out, pullback = batch.trainee.forward_with_pullback(s.t, s.I)
    c, cv_pullback = cv.forward_with_pullback(s.t, s.I)
    w, n_clipped = tilt_weights(batch.h, s.reward, batch.clip)
    b_ref = batch.reference_values()
    target = s.I_dot + (c / w)[:, None] * (b_ref - s.I_dot)
    resid = out - target
    n = len(s)
    cv_grad = None
    if cv_pullback is not None:
        cv_grad = cv_pullback((2.0 * np.sum(resid * (s.I_dot - b_ref), axis=1) / n)[:, None])
    return _report(out, 2.0 * w[:, None] * resid, w * np.sum(resid ** 2, axis=1), pullback, n,
                   n_clipped, cv_grad)


def wfm_loss(batch: LossBatch) -> GradientReport:
    """Weighted flow matching: mean ``exp(h r) |b_hat(I) - I_dot|^2``."""
    s = batch.samples
    out, pullback = batch.trainee.forward_with_pullback(s.t, s.I)
    w, n_clipped = tilt_weights(batch.h, s.reward, batch.clip)
    resid = out - s.I_dot
    return _report(out, 2.0 * w[:, None] * resid, w * np.sum(resid ** 2, axis=1), pullback,
                   len(s), n_clipped)


LOSSES = {
    "FM": flow_matching_loss,
    "ETM": etm_loss,
    "ITM": itm_loss,
    "WFM": wfm_loss,
    "cITM_sg": c_itm_sg_loss,
    "cITM_rw": c_itm_reweighted_loss,
}


def compute_loss(name: str, batch: LossBatch, cv: ControlVariate | None = None) -> GradientReport:
    if name not in LOSSES:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}")
    fn = LOSSES[name]
    if name.startswith("cITM"):
        return fn(batch, cv if cv is not None else constant_cv(1.0))
    return fn(batch)


# --------------------------------------------------------------------------
# Optimal control variates


@dataclass
class CvBins:
    """Binned control-variate estimates over equal-mass ``(t, I)`` cells.

    ``x_edges[i]`` are the edges in the first coordinate of ``I`` inside the
    ``i``-th time bin; ``cell[n] = i * n_x_bins + j`` locates sample ``n``.
    """

    t_edges: np.ndarray
    x_edges: np.ndarray
    c_star: np.ndarray
    counts: np.ndarray
    t_center: np.ndarray
    x_center: np.ndarray
    cell: np.ndarray


def cv_ratio(u: np.ndarray, v: np.ndarray, w: np.ndarray, variant: str = "rw") -> float:
    """Optimal constant control variate from conditional samples.

    ``u = I_dot - b_{t,a}``, ``v = I_dot - b_{t,a+h}``, ``w = exp(h r)``.
    ``rw``: ``E<u, v> / E[|u|^2 / w]``; ``sg``: ``E[w <v, u>] / E|u|^2``.
    Falls back to 1 when the denominator vanishes.
    """
    if variant == "rw":
        num = np.mean(np.sum(u * v, axis=1))
        den = np.mean(np.sum(u * u, axis=1) / w)
    elif variant == "sg":
        num = np.mean(w * np.sum(u * v, axis=1))
        den = np.mean(np.sum(u * u, axis=1))
    else:
        raise ValueError(f"unknown control-variate variant {variant!r}")
    if not np.isfinite(den) or den <= 1e-300:
        return 1.0
    return float(num / den)


def optimal_cv_regression(samples: SampleBatch, frozen_ref: VelocityModel, h: float,
                          n_t_bins: int = 4, n_x_bins: int = 4, variant: str = "rw",
                          next_field: VelocityModel | None = None, min_per_bin: int = 500,
                          clip: float | None = EXP_CLIP) -> CvBins:
    """Estimate the optimal control variate per equal-mass ``(t, I)`` cell.

    When ``next_field`` (``b_{t,a+h}``) is not supplied, its offset from the
    reference inside a cell is estimated as the difference between the
    ``w``-weighted and unweighted cell means of ``I_dot - b_ref``.
    """
    n = len(samples)
    if n < n_t_bins * n_x_bins * min_per_bin:
        raise ValueError(
            f"{n} samples cannot fill {n_t_bins}x{n_x_bins} cells with {min_per_bin} each")
    w, _ = tilt_weights(h, samples.reward, clip)
    u = samples.I_dot - frozen_ref(samples.t, samples.I)
    v_all = None if next_field is None else samples.I_dot - next_field(samples.t, samples.I)
    t_edges = np.quantile(samples.t, np.linspace(0.0, 1.0, n_t_bins + 1))
    t_bin = np.clip(np.searchsorted(t_edges, samples.t, side="right") - 1, 0, n_t_bins - 1)
    x_edges = np.empty((n_t_bins, n_x_bins + 1))
    c_star = np.empty((n_t_bins, n_x_bins))
    counts = np.zeros((n_t_bins, n_x_bins), dtype=np.int64)
    t_center = np.empty((n_t_bins, n_x_bins))
    x_center = np.empty((n_t_bins, n_x_bins))
    x_coord = samples.I[:, 0]
    cell = np.empty(n, dtype=np.int64)
    for i in range(n_t_bins):
        in_t = np.flatnonzero(t_bin == i)
        edges = np.quantile(x_coord[in_t], np.linspace(0.0, 1.0, n_x_bins + 1))
        x_edges[i] = edges
        x_bin = np.clip(np.searchsorted(edges, x_coord[in_t], side="right") - 1, 0, n_x_bins - 1)
        for j in range(n_x_bins):
            idx = in_t[x_bin == j]
            cell[idx] = i * n_x_bins + j
            counts[i, j] = idx.size
            t_center[i, j] = np.median(samples.t[idx])
            x_center[i, j] = np.median(x_coord[idx])
            ui, wi = u[idx], w[idx]
            if v_all is None:
                shift = np.sum(wi[:, None] * ui, axis=0) / np.sum(wi) - np.sum(ui, axis=0) / idx.size
                vi = ui - shift
            else:
                vi = v_all[idx]
            c_star[i, j] = cv_ratio(ui, vi, wi, variant)
    return CvBins(t_edges, x_edges, c_star, counts, t_center, x_center, cell)
