"""Ground-truth estimators used by tests and the ``verify`` command.

Nothing here reads trainable model parameters. Oracles see only targets,
rewards, schedules and closed forms. Monte-Carlo estimates carry a standard
error so that comparisons can be made in units of sigma.

Two ways of conditioning on ``I_t = x`` are offered:

* :class:`ExactConditional` samples ``(x0, x1) | I_t = x`` exactly when both
  endpoints are Gaussian.
* :class:`KernelConditional` draws from the unconditional coupling and
  weights each draw by a Gaussian kernel in ``I_t - x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .interpolant import T_EPS, DomainError, InterpolantSchedule, make_linear_schedule, sigma_squared
from .targets import Reward, RewardKind, gaussian_tilted_params

LOW_CONFIDENCE_NEFF = 30.0
N_BATCHES = 32


@dataclass
class ConditionalEstimate:
    value: np.ndarray
    std_error: np.ndarray
    n_effective: float
    low_confidence: bool = False

    def z_score(self, reference) -> np.ndarray:
        """Elementwise ``(value - reference) / std_error``."""
        return (self.value - np.asarray(reference)) / self.std_error


def _estimate(value, se, n_eff) -> ConditionalEstimate:
    return ConditionalEstimate(np.asarray(value, dtype=np.float64), np.asarray(se, dtype=np.float64),
                               float(n_eff), bool(n_eff < LOW_CONFIDENCE_NEFF))


def _n_effective(omega: np.ndarray) -> float:
    return float(np.sum(omega) ** 2 / np.sum(omega ** 2))


# --------------------------------------------------------------------------
# Gaussian closed forms


class GaussianProblem:
    """Independent coupling ``x0 ~ N(mu0, Sigma0)``, ``x1 ~ N(mu1, Sigma1)`` tilted by a
    linear or quadratic reward ``r(x) = -1/2 x^T Q x + c^T x``.

    All quantities at level ``a`` use the tilted endpoint
    ``N(mu1, Sigma1) exp(a r)``. Methods take a scalar time and a single point.
    """

    def __init__(self, mu0, Sigma0, mu1, Sigma1, reward: Reward,
                 schedule: InterpolantSchedule | None = None):
        if reward.kind not in (RewardKind.LINEAR, RewardKind.QUADRATIC, RewardKind.CONSTANT):
            raise ValueError("closed forms need a linear, quadratic or constant reward")
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
        self.Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=np.float64))
        self.mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
        self.Sigma1 = np.atleast_2d(np.asarray(Sigma1, dtype=np.float64))
        self.reward = reward
        self.schedule = schedule or make_linear_schedule()
        self.dim = self.mu0.shape[0]
        d = self.dim
        self.Q = np.zeros((d, d)) if reward.Q is None else reward.Q
        self.c = np.zeros(d) if reward.c is None else reward.c

    def endpoint(self, a: float):
        return gaussian_tilted_params(self.mu1, self.Sigma1, self.reward, a)

    def _coeffs(self, t):
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t={t} outside [0, 1]")
        return tuple(float(v) for v in self.schedule.coefficients(t))

    def joint_conditional(self, t: float, x, a: float):
        """Mean and covariance of ``z = (x0, x1)`` given ``I_t = x`` at level ``a``."""
        d = self.dim
        al, be, _, _ = self._coeffs(t)
        mu_a, S_a = self.endpoint(a)
        mz = np.concatenate([self.mu0, mu_a])
        Sz = np.zeros((2 * d, 2 * d))
        Sz[:d, :d] = self.Sigma0
        Sz[d:, d:] = S_a
        A = np.hstack([al * np.eye(d), be * np.eye(d)])
        C = A @ Sz @ A.T
        gain = np.linalg.solve(C, A @ Sz).T
        mean = mz + gain @ (np.asarray(x, dtype=np.float64).reshape(d) - A @ mz)
        cov = Sz - gain @ A @ Sz
        return mean, 0.5 * (cov + cov.T)

    def conditional_x1(self, t: float, x, a: float):
        mean, cov = self.joint_conditional(t, x, a)
        d = self.dim
        return mean[d:], cov[d:, d:]

    def _velocity_map(self, t):
        d = self.dim
        _, _, ad, bd = self._coeffs(t)
        return np.hstack([ad * np.eye(d), bd * np.eye(d)])

    def velocity(self, t: float, x, a: float) -> np.ndarray:
        """``b_{t,a}(x) = alpha_dot E[x0 | I] + beta_dot E[x1 | I]``."""
        mean, _ = self.joint_conditional(t, x, a)
        return self._velocity_map(t) @ mean

    def cumulant(self, order: int, t: float, x, a: float) -> np.ndarray:
        """Closed-form ``kappa^n(I_dot, r, ..., r | I_t = x)`` for ``n`` in {0, 1, 2}.

        Order 0 is the conditional mean ``b_{t,a}``. For Gaussian ``z`` and a
        quadratic reward with Hessian ``H`` and mean gradient ``g``, Stein's
        identity gives ``Cov(z, r) = S g`` and ``E[(z - m)(r - E r)^2] = 2 S H S g``.
        """
        if order == 0:
            return self.velocity(t, x, a)
        d = self.dim
        mean, cov = self.joint_conditional(t, x, a)
        D = self._velocity_map(t)
        g = np.concatenate([np.zeros(d), self.c - self.Q @ mean[d:]])
        if order == 1:
            return D @ cov @ g
        if order == 2:
            H = np.zeros((2 * d, 2 * d))
            H[d:, d:] = -self.Q
            return D @ (2.0 * cov @ H @ cov @ g)
        raise NotImplementedError("closed-form cumulants are provided up to order 2")

    def sample_conditional(self, rng: np.random.Generator, t: float, x, a: float, n: int):
        """Exact draws of ``(x0, x1) | I_t = x`` at level ``a``."""
        mean, cov = self.joint_conditional(t, x, a)
        evals, evecs = np.linalg.eigh(cov)
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))
        z = mean + rng.standard_normal((n, mean.shape[0])) @ root.T
        d = self.dim
        return z[:, :d], z[:, d:]

    def gauss_hermite(self, t: float, x, a: float, n_nodes: int = 40):
        """Quadrature nodes for ``(x0, x1) | I_t = x`` in one dimension.

        Returns ``(x0, x1, weights)`` with weights summing to one. Requires
        ``alpha(t) > 0`` so that ``x0`` is pinned by ``x1``.
        """
        if self.dim != 1:
            raise ValueError("Gauss-Hermite conditioning is implemented for d = 1")
        al, be, _, _ = self._coeffs(t)
        if al <= 0.0:
            raise DomainError("quadrature needs alpha(t) > 0")
        m, S = self.conditional_x1(t, x, a)
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
        x1 = m[0] + np.sqrt(S[0, 0]) * nodes
        x0 = (float(np.asarray(x).reshape(1)[0]) - be * x1) / al
        return x0[:, None], x1[:, None], weights / weights.sum()

    def value_function(self, t: float, x, a: float) -> float:
        """``v_{t,a}(x) = log E[exp(a r(x1)) | I_t = x]`` under the untilted coupling.

        With ``x1 | I ~ N(m, S)`` and ``g = c - Q m``::

            v = a r(m) - 1/2 log det(I + a S Q) + a^2/2 g^T (I + a S Q)^{-1} S g
        """
        m, S = self.conditional_x1(t, x, 0.0)
        M = np.eye(self.dim) + a * S @ self.Q
        g = self.c - self.Q @ m
        r_m = float(self.reward(m[None, :])[0])
        sign, logdet = np.linalg.slogdet(M)
        if sign <= 0:
            raise DomainError("conditional tilt is not normalisable at this level")
        return a * r_m - 0.5 * logdet + 0.5 * a * a * g @ np.linalg.solve(M, S @ g)

    def value_gradient(self, t: float, x, a: float) -> np.ndarray:
        """``grad_x v_{t,a}(x)``; ``m`` is affine in ``x`` with Jacobian ``beta S1 C^{-1}``."""
        d = self.dim
        al, be, _, _ = self._coeffs(t)
        m, S = self.conditional_x1(t, x, 0.0)
        C = al * al * self.Sigma0 + be * be * self.Sigma1
        J = be * self.Sigma1 @ np.linalg.inv(C)
        g = self.c - self.Q @ m
        P = np.linalg.solve(np.eye(d) + a * S @ self.Q, S)
        dv_dm = a * g - a * a * self.Q @ P @ g
        return J.T @ dv_dm


# --------------------------------------------------------------------------
# Conditional sample sources


class ExactConditional:
    """Exact ``(x0, x1) | I_t = x`` for a :class:`GaussianProblem` at level ``a``."""

    def __init__(self, problem: GaussianProblem, a: float):
        self.problem = problem
        self.a = float(a)
        self.schedule = problem.schedule

    def draw(self, rng, t, x, n):
        x0, x1 = self.problem.sample_conditional(rng, t, x, self.a, n)
        return x0, x1, np.ones(n)


class KernelConditional:
    """Unconditional coupling draws weighted by ``exp(-|I_t - x|^2 / (2 bw^2))``.

    ``bandwidth=None`` uses ``0.1`` times the mean per-coordinate standard
    deviation of ``I_t`` in the drawn batch.
    """

    def __init__(self, sample_x0: Callable, sample_x1: Callable,
                 schedule: InterpolantSchedule | None = None, bandwidth: float | None = None,
                 bandwidth_scale: float = 0.1):
        self.sample_x0 = sample_x0
        self.sample_x1 = sample_x1
        self.schedule = schedule or make_linear_schedule()
        self.bandwidth = bandwidth
        self.bandwidth_scale = bandwidth_scale

    def draw(self, rng, t, x, n):
        x0 = np.asarray(self.sample_x0(rng, n), dtype=np.float64).reshape(n, -1)
        x1 = np.asarray(self.sample_x1(rng, n), dtype=np.float64).reshape(n, -1)
        if x0.shape[1] > 3:
            raise ValueError("kernel conditioning is limited to dimension <= 3")
        al, be, _, _ = (float(v) for v in self.schedule.coefficients(t))
        I = al * x0 + be * x1
        bw = self.bandwidth
        if bw is None:
            bw = self.bandwidth_scale * float(np.mean(np.std(I, axis=0)))
        d2 = np.sum((I - np.asarray(x, dtype=np.float64).reshape(1, -1)) ** 2, axis=1)
        return x0, x1, np.exp(-0.5 * d2 / (bw * bw))


def _draw(source, rng, t, x, n, reward):
    x0, x1, omega = source.draw(rng, t, x, n)
    _, _, ad, bd = (float(v) for v in source.schedule.coefficients(t))
    I_dot = ad * x0 + bd * x1
    return I_dot, reward(x1), omega


# --------------------------------------------------------------------------
# Monte-Carlo estimators


def _ratio(omega, Y):
    s = omega.sum()
    value = (omega @ Y) / s
    se = np.sqrt((omega ** 2) @ ((Y - value) ** 2)) / s
    return value, se


def esscher_velocity_mc(source, reward: Reward, t: float, x, h: float, n_samples: int,
                        rng: np.random.Generator) -> ConditionalEstimate:
    """Self-normalised estimate of ``E[I_dot e^{h r} | I = x] / E[e^{h r} | I = x]``.

    The standard error is the delta-method one for a ratio estimator.
    """
    I_dot, r, omega = _draw(source, rng, t, x, n_samples, reward)
    hr = h * r
    omega = omega * np.exp(hr - hr.max())
    value, se = _ratio(omega, I_dot)
    return _estimate(value, se, _n_effective(omega))


def _weighted_cumulant(order, omega, Y, r):
    s = omega.sum()
    Yc = Y - (omega @ Y) / s
    if order == 0:
        return (omega @ Y) / s
    rc = r - (omega @ r) / s
    mom = lambda k: (omega * rc ** k) @ Yc / s
    if order == 1:
        return mom(1)
    if order == 2:
        return mom(2)
    if order == 3:
        return mom(3) - 3.0 * mom(1) * ((omega @ rc ** 2) / s)
    raise ValueError("cumulant order must be in {0, 1, 2, 3}")


def joint_cumulant_mc(order: int, source, reward: Reward, t: float, x, n_samples: int,
                      rng: np.random.Generator) -> ConditionalEstimate:
    """``kappa^n(I_dot, r, ..., r | I_t = x)`` with ``n`` copies of ``r``.

    ``n = 1`` is the conditional covariance of ``I_dot`` and ``r``. The
    standard error comes from batch means over 32 batches.
    """
    if order not in (0, 1, 2, 3):
        raise ValueError("cumulant order must be in {0, 1, 2, 3}")
    I_dot, r, omega = _draw(source, rng, t, x, n_samples, reward)
    value = _weighted_cumulant(order, omega, I_dot, r)
    parts = np.array_split(np.arange(n_samples), N_BATCHES)
    per_batch = np.array([_weighted_cumulant(order, omega[p], I_dot[p], r[p]) for p in parts])
    se = per_batch.std(axis=0, ddof=1) / np.sqrt(len(parts))
    return _estimate(value, se, _n_effective(omega))


def covariance_rhs_mc(source, reward: Reward, t: float, x, n_samples: int,
                      rng: np.random.Generator) -> ConditionalEstimate:
    """``Cov(I_dot, r | I_t = x)``, the right-hand side of the tilt-derivative ODE."""
    return joint_cumulant_mc(1, source, reward, t, x, n_samples, rng)


def value_function_mc(source, reward: Reward, t: float, x, a: float, n_samples: int,
                      rng: np.random.Generator) -> ConditionalEstimate:
    """``log E[exp(a r(x1)) | I_t = x]``; ``source`` must sample the untilted coupling."""
    _, r, omega = _draw(source, rng, t, x, n_samples, reward)
    log_terms = a * r + np.log(omega)
    value = logsumexp(log_terms) - logsumexp(np.log(omega))
    ratio_w = np.exp(log_terms - logsumexp(log_terms))
    n_eff = 1.0 / np.sum(ratio_w ** 2)
    # delta method on log of a ratio of means
    q = np.exp(a * r - value)
    se = np.sqrt((omega ** 2) @ ((q - 1.0) ** 2)) / omega.sum()
    return _estimate(value, se, min(n_eff, _n_effective(omega)))


def doob_identity_check(problem: GaussianProblem, t: float, x, a: float,
                        sigma_scale: float = 1.0) -> float:
    """``|b_{t,a}(x) - b_{t,0}(x) - sigma_scale * sigma_t^2 / 2 * grad v_{t,a}(x)|``.

    Exact for a standard normal base. ``sigma_scale != 1`` is a negative
    control.
    """
    if t < T_EPS:
        raise DomainError(f"sigma^2 is singular near t = 0 (t={t})")
    half_sigma2 = 0.5 * sigma_squared(problem.schedule, t) * sigma_scale
    resid = (problem.velocity(t, x, a) - problem.velocity(t, x, 0.0)
             - half_sigma2 * problem.value_gradient(t, x, a))
    return float(np.linalg.norm(resid))


# --------------------------------------------------------------------------
# Control-variate oracle


def cv_variance_curve(u: np.ndarray, v: np.ndarray, w: np.ndarray, c_grid,
                      variant: str = "rw") -> np.ndarray:
    """Conditional variance term as a function of a constant control variate.

    ``u = I_dot - b_{t,a}``, ``v = I_dot - b_{t,a+h}``, ``w = exp(h r)``.
    ``rw``: ``E[w |v - (c / w) u|^2]``. ``sg``: ``E[|c u - w v|^2]``.
    """
    c = np.asarray(c_grid, dtype=np.float64)
    uu = np.mean(np.sum(u * u, axis=1) / w) if variant == "rw" else np.mean(np.sum(u * u, axis=1))
    if variant == "rw":
        uv = np.mean(np.sum(u * v, axis=1))
        vv = np.mean(w * np.sum(v * v, axis=1))
    elif variant == "sg":
        uv = np.mean(w * np.sum(u * v, axis=1))
        vv = np.mean(w * w * np.sum(v * v, axis=1))
    else:
        raise ValueError(f"unknown control-variate variant {variant!r}")
    return c * c * uu - 2.0 * c * uv + vv


def brute_force_cv(u, v, w, variant: str = "rw", lo: float = -2.0, hi: float = 4.0,
                   n_grid: int = 2001, n_refine: int = 3) -> float:
    """Grid search for the minimiser of :func:`cv_variance_curve`, refined around the best node."""
    for _ in range(n_refine + 1):
        grid = np.linspace(lo, hi, n_grid)
        k = int(np.argmin(cv_variance_curve(u, v, w, grid, variant)))
        step = grid[1] - grid[0]
        lo, hi = grid[k] - step, grid[k] + step
    return float(grid[k])
