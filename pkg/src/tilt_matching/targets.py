"""Base distributions, rewards and energy-based targets.

Every density here is unnormalised and vectorised: callables take ``(N, d)``
arrays and return ``(N,)`` (log-densities, energies, rewards) or ``(N, d)``
(scores, gradients).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

DEFAULT_T0 = 3.0


class TargetKind(enum.Enum):
    GAUSSIAN = "gaussian"
    GAUSSIAN_MIXTURE = "gmm"
    DOUBLE_WELL = "double_well"
    LENNARD_JONES = "lj"
    TEMPERED = "tempered"


class RewardKind(enum.Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    ENERGY_DIFFERENCE = "energy_difference"
    CONSTANT = "constant"


class InvalidTiltError(ValueError):
    """The requested tilt strength leaves the Gaussian family (non-PD precision)."""


class DivergentEnergyError(ValueError):
    """Two particles coincide, so the pair energy diverges."""


def _as_batch(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, dim) if dim > 1 or x.size != 1 else x[None, :]
    return x


@dataclass
class Target:
    """An unnormalised density on ``R^dim``.

    ``log_density`` and ``score`` are optional so that sample-only targets can
    be represented; ``sampler(rng, n)`` is present only when exact sampling is
    available.
    """

    dim: int
    kind: TargetKind
    log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    score: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def energy(self, x) -> np.ndarray:
        return -self.log_density(x)


# --------------------------------------------------------------------------
# Gaussians


def gaussian_target(mean, cov) -> Target:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ValueError(f"covariance shape {cov.shape} does not match mean of dim {d}")
    chol = np.linalg.cholesky(cov)
    prec = np.linalg.inv(cov)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + logdet)

    def log_density(x):
        diff = _as_batch(x, d) - mean
        return log_norm - 0.5 * np.einsum("ni,ij,nj->n", diff, prec, diff)

    def score(x):
        return -(_as_batch(x, d) - mean) @ prec

    def sampler(rng, n):
        return mean + rng.standard_normal((n, d)) @ chol.T

    return Target(d, TargetKind.GAUSSIAN, log_density, score, sampler,
                  params={"mean": mean, "cov": cov})


def standard_normal(dim: int) -> Target:
    return gaussian_target(np.zeros(dim), np.eye(dim))


def gaussian_mixture_target(means, stds, weights=None) -> Target:
    """Isotropic Gaussian mixture with per-component standard deviations."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k, d = means.shape
    stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (k,)).copy()
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    log_w = np.log(weights) - d * np.log(stds) - 0.5 * d * np.log(2.0 * np.pi)

    def _component_logits(x):
        diff = _as_batch(x, d)[:, None, :] - means[None, :, :]
        return log_w - 0.5 * np.sum(diff ** 2, axis=-1) / stds ** 2, diff

    def log_density(x):
        logits, _ = _component_logits(x)
        return logsumexp(logits, axis=1)

    def score(x):
        logits, diff = _component_logits(x)
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return -np.einsum("nk,nkd->nd", resp / stds ** 2, diff)

    def sampler(rng, n):
        comp = rng.choice(k, size=n, p=weights)
        return means[comp] + stds[comp, None] * rng.standard_normal((n, d))

    return Target(d, TargetKind.GAUSSIAN_MIXTURE, log_density, score, sampler,
                  params={"means": means, "stds": stds, "weights": weights})


def circle_gmm(n_modes: int = 4, radius: float = 2.0, std: float = 0.5) -> Target:
    """``n_modes`` equal-weight components evenly spaced on a circle in 2D."""
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    target = gaussian_mixture_target(means, std)
    target.params.update(n_modes=n_modes, radius=radius, std=std)
    return target


def double_well_target(scale: float = 0.5) -> Target:
    """1D double well ``exp(-(x^2 - 1)^2 / scale)``."""

    def log_density(x):
        x = _as_batch(x, 1)[:, 0]
        return -((x * x - 1.0) ** 2) / scale

    def score(x):
        x = _as_batch(x, 1)
        return -4.0 * x * (x * x - 1.0) / scale

    return Target(1, TargetKind.DOUBLE_WELL, log_density, score, None, params={"scale": scale})


def tempered(target: Target, temperature: float = DEFAULT_T0) -> Target:
    """High-temperature analogue ``exp(-E / T0)`` of an energy-based target."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    base_logp, base_score = target.log_density, target.score
    return Target(
        target.dim, TargetKind.TEMPERED,
        log_density=lambda x: base_logp(x) / temperature,
        score=None if base_score is None else (lambda x: base_score(x) / temperature),
        sampler=None,
        params={"base": target, "temperature": temperature},
    )


# --------------------------------------------------------------------------
# Rewards


@dataclass
class Reward:
    """Scalar reward ``r(x)`` used for the tilt ``exp(a r(x))``.

    ``grad`` is optional; it is needed only for MALA on the tilted density.
    Linear and quadratic rewards keep their coefficients so that Gaussian
    tilts can be solved in closed form:
    ``r(x) = -1/2 x^T Q x + c^T x``.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    kind: RewardKind
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    c: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    value: Optional[float] = None

    def __call__(self, x) -> np.ndarray:
        return self.eval(x)


def linear_reward(c) -> Reward:
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    d = c.shape[0]
    return Reward(
        eval=lambda x: _as_batch(x, d) @ c,
        kind=RewardKind.LINEAR,
        grad=lambda x: np.broadcast_to(c, _as_batch(x, d).shape).copy(),
        c=c,
    )


def quadratic_reward(Q, c=None) -> Reward:
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    d = Q.shape[0]
    c = np.zeros(d) if c is None else np.atleast_1d(np.asarray(c, dtype=np.float64))
    return Reward(
        eval=lambda x: -0.5 * np.einsum("ni,ij,nj->n", _as_batch(x, d), Q, _as_batch(x, d))
        + _as_batch(x, d) @ c,
        kind=RewardKind.QUADRATIC,
        grad=lambda x: -_as_batch(x, d) @ Q + c,
        c=c, Q=Q,
    )


def constant_reward(value: float, dim: int) -> Reward:
    return Reward(
        eval=lambda x: np.full(_as_batch(x, dim).shape[0], float(value)),
        kind=RewardKind.CONSTANT,
        grad=lambda x: np.zeros_like(_as_batch(x, dim)),
        c=np.zeros(dim), Q=np.zeros((dim, dim)), value=float(value),
    )


def zero_reward(dim: int) -> Reward:
    return constant_reward(0.0, dim)


def geometric_path_reward(E0, E1, grad0=None, grad1=None) -> Reward:
    """``r = E0 - E1``: tilting ``exp(-E0)`` by ``exp(a r)`` gives ``exp(-E_a)``
    with ``E_a = (1 - a) E0 + a E1``."""
    grad = None
    if grad0 is not None and grad1 is not None:
        grad = lambda x: grad0(x) - grad1(x)
    return Reward(eval=lambda x: E0(x) - E1(x), kind=RewardKind.ENERGY_DIFFERENCE, grad=grad)


def temperature_path(target: Target, temperature: float = DEFAULT_T0):
    """Prior ``exp(-E1 / T0)`` plus the reward that anneals it to ``exp(-E1)``."""
    prior = tempered(target, temperature)
    e1 = lambda x: -target.log_density(x)
    e0 = lambda x: -target.log_density(x) / temperature
    g1 = None if target.score is None else (lambda x: -target.score(x))
    g0 = None if target.score is None else (lambda x: -target.score(x) / temperature)
    return prior, geometric_path_reward(e0, e1, g0, g1)


def tilted_log_density(base: Target, reward: Reward, a: float):
    """Unnormalised ``log rho_{1,a} = log rho_{1,0} + a r`` and its score (or None)."""
    if base.log_density is None:
        raise ValueError("tilted density requires a base log-density")
    logp = lambda x: base.log_density(x) + a * reward(x)
    score = None
    if base.score is not None and reward.grad is not None:
        score = lambda x: base.score(x) + a * reward.grad(x)
    return logp, score


def gaussian_tilted_params(mu, Sigma, reward: Reward, a: float):
    """Exact parameters of ``N(mu, Sigma) * exp(a r)`` for linear/quadratic ``r``.

    Completing the square gives ``Sigma' = (Sigma^-1 + a Q)^-1`` and
    ``mu' = Sigma' (Sigma^-1 mu + a c)``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    d = mu.shape[0]
    if reward.kind not in (RewardKind.LINEAR, RewardKind.QUADRATIC, RewardKind.CONSTANT):
        raise ValueError(f"no closed-form Gaussian tilt for reward kind {reward.kind.value}")
    Q = np.zeros((d, d)) if reward.Q is None else reward.Q
    c = np.zeros(d) if reward.c is None else reward.c
    prec = np.linalg.inv(Sigma)
    new_prec = prec + a * Q
    new_prec = 0.5 * (new_prec + new_prec.T)
    if np.min(np.linalg.eigvalsh(new_prec)) <= 0.0:
        raise InvalidTiltError(f"tilt strength a={a} makes the precision non-positive-definite")
    new_Sigma = np.linalg.inv(new_prec)
    new_Sigma = 0.5 * (new_Sigma + new_Sigma.T)
    new_mu = new_Sigma @ (prec @ mu + a * c)
    return new_mu, new_Sigma


def tilted_gaussian_target(mu, Sigma, reward: Reward, a: float) -> Target:
    return gaussian_target(*gaussian_tilted_params(mu, Sigma, reward, a))


# --------------------------------------------------------------------------
# Lennard-Jones


@dataclass(frozen=True)
class LennardJonesSpec:
    """Lennard-Jones cluster in 3D.

    ``form="standard"`` uses the pair term ``(r_m/d)^12 - 2 (r_m/d)^6`` (well
    depth 1 at ``d = r_m``); ``form="as_written"`` uses ``(r_m/d)^6 - (r_m/d)^12``.
    Both are summed over ordered pairs ``i != j`` with prefactor
    ``epsilon / (2 tau)``.
    """

    n_particles: int = 13
    epsilon: float = 2.0
    r_m: float = 1.0
    tau: float = 1.0
    harmonic: bool = True
    form: str = "standard"

    def __post_init__(self):
        if self.form not in ("standard", "as_written"):
            raise ValueError(f"unknown LJ form {self.form!r}")

    @property
    def dim(self) -> int:
        return 3 * self.n_particles


def _lj_positions(spec: LennardJonesSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1 or (x.ndim == 2 and x.shape == (spec.n_particles, 3))
    return x.reshape(-1, spec.n_particles, 3), single


def lj_energy(spec: LennardJonesSpec, x):
    """Total energy of configurations shaped ``(n, 3)``, ``(3n,)``, ``(B, n, 3)`` or ``(B, 3n)``."""
    pos, single = _lj_positions(spec, x)
    n = spec.n_particles
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    off = ~np.eye(n, dtype=bool)
    d = dist[:, off]
    if np.any(d <= 0.0):
        raise DivergentEnergyError("coincident particles: pair distance is zero")
    s6 = (spec.r_m / d) ** 6
    if spec.form == "standard":
        pair = s6 * s6 - 2.0 * s6
    else:
        pair = s6 - s6 * s6
    energy = spec.epsilon / (2.0 * spec.tau) * np.sum(pair, axis=1)
    if spec.harmonic:
        centred = pos - pos.mean(axis=1, keepdims=True)
        energy = energy + 0.5 * np.sum(centred ** 2, axis=(1, 2))
    return float(energy[0]) if single else energy


def lj_energy_grad(spec: LennardJonesSpec, x) -> np.ndarray:
    """Gradient of :func:`lj_energy` with respect to positions, same shape as ``x``."""
    x = np.asarray(x, dtype=np.float64)
    pos, _ = _lj_positions(spec, x)
    n = spec.n_particles
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    dist2 = np.sum(diff ** 2, axis=-1) + np.eye(n)[None]
    inv2 = spec.r_m ** 2 / dist2
    s6 = inv2 ** 3
    # d(pair)/d(d) / d, per ordered pair; factor 2 for the two ordered pairs sharing d_ij.
    if spec.form == "standard":
        dpair = (-12.0 * s6 * s6 + 12.0 * s6) / dist2
    else:
        dpair = (-6.0 * s6 + 12.0 * s6 * s6) / dist2
    dpair = dpair * (~np.eye(n, dtype=bool))[None]
    pref = spec.epsilon / (2.0 * spec.tau)
    grad = 2.0 * pref * np.einsum("bij,bijk->bik", dpair, diff)
    if spec.harmonic:
        grad = grad + (pos - pos.mean(axis=1, keepdims=True))
    return grad.reshape(x.shape)


def lennard_jones_target(spec: LennardJonesSpec) -> Target:
    d = spec.dim
    return Target(
        d, TargetKind.LENNARD_JONES,
        log_density=lambda x: -lj_energy(spec, _as_batch(x, d)),
        score=lambda x: -lj_energy_grad(spec, _as_batch(x, d)),
        sampler=None,
        params={"spec": spec},
    )


def interatomic_distances(spec: LennardJonesSpec, x) -> np.ndarray:
    pos, _ = _lj_positions(spec, x)
    iu = np.triu_indices(spec.n_particles, k=1)
    diff = pos[:, iu[0], :] - pos[:, iu[1], :]
    return np.sqrt(np.sum(diff ** 2, axis=-1)).ravel()


def icosahedron_cluster(radius: float) -> np.ndarray:
    """13-particle Mackay icosahedron: a centre atom plus 12 vertices at ``radius``."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            verts += [(0.0, s1, s2 * phi), (s1, s2 * phi, 0.0), (s2 * phi, 0.0, s1)]
    verts = np.array(verts)
    verts *= radius / np.linalg.norm(verts[0])
    return np.vstack([np.zeros((1, 3)), verts])
