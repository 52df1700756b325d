"""Parametric velocity fields ``b(t, x)`` with hand-written reverse-mode gradients.

Three backends share one interface:

* :class:`AnalyticGaussianVelocity` -- the exact interpolant velocity for a
  Gaussian base and a Gaussian endpoint ``N(mu1, L1 L1^T)``; the endpoint
  parameters are trainable.
* :class:`GridVelocity` -- multilinear interpolation of values on a dense
  ``(t, x)`` grid, for 1D and 2D fields.
* :class:`MlpVelocity` -- a fully connected network on ``[x, t, sin 2pi t, cos 2pi t]``.

Every model exposes ``forward(t, x)``, ``forward_with_pullback(t, x)`` (the
pullback maps output cotangents to a flat parameter gradient) and
``per_sample_grads``.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interpolant import InterpolantSchedule, ScheduleKind, make_linear_schedule
from .targets import Reward, gaussian_tilted_params


class GridExtrapolationWarning(UserWarning):
    """A grid velocity was evaluated outside its bounds and clamped."""


class NonFiniteGradientWarning(RuntimeWarning):
    pass


def _prepare(t, x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, dim) if dim > 1 else x[:, None]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return t, x


class VelocityModel:
    """Common interface; subclasses implement ``_forward`` and ``_pullback``."""

    kind: str = "base"

    def __init__(self, dim: int, out_dim: int, params: np.ndarray):
        self.dim = int(dim)
        self.out_dim = int(out_dim)
        self.params = np.asarray(params, dtype=np.float64).copy()

    @property
    def n_params(self) -> int:
        return self.params.size

    def __call__(self, t, x) -> np.ndarray:
        return self.forward(t, x)

    def forward(self, t, x) -> np.ndarray:
        t, x = _prepare(t, x, self.dim)
        out, _ = self._forward(t, x)
        return out

    def eval(self, t: float, x) -> np.ndarray:
        """Velocity at a single point."""
        return self.forward(np.array([t]), np.asarray(x, dtype=np.float64).reshape(1, self.dim))[0]

    def forward_with_pullback(self, t, x):
        t, x = _prepare(t, x, self.dim)
        out, cache = self._forward(t, x)

        def pullback(cotangent):
            cot = np.asarray(cotangent, dtype=np.float64).reshape(out.shape)
            return self._pullback(cache, cot)

        return out, pullback

    def per_sample_grads(self, t, x, cotangent) -> np.ndarray:
        """``(N, P)`` array whose rows sum to the pullback of ``cotangent``."""
        t, x = _prepare(t, x, self.dim)
        cot = np.asarray(cotangent, dtype=np.float64).reshape(x.shape[0], self.out_dim)
        rows = []
        for i in range(x.shape[0]):
            _, cache = self._forward(t[i:i + 1], x[i:i + 1])
            rows.append(self._pullback(cache, cot[i:i + 1]))
        return np.array(rows)

    def snapshot(self) -> np.ndarray:
        return self.params.copy()

    def restore(self, snapshot: np.ndarray) -> None:
        snapshot = np.asarray(snapshot, dtype=np.float64)
        if snapshot.shape != self.params.shape:
            raise ValueError("snapshot does not match the model's parameter layout")
        np.copyto(self.params, snapshot)

    def copy(self) -> "VelocityModel":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = self.params.copy()
        return clone

    def _forward(self, t, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _pullback(self, cache, cot):  # pragma: no cover - abstract
        raise NotImplementedError


# --------------------------------------------------------------------------
# Analytic Gaussian


class AnalyticGaussianVelocity(VelocityModel):
    """Exact ``E[I_dot | I = x]`` for ``x0 ~ N(mu0, Sigma0)``, ``x1 ~ N(mu1, Sigma1)``.

    With ``C = alpha^2 Sigma0 + beta^2 Sigma1`` and
    ``K = alpha alpha_dot Sigma0 + beta beta_dot Sigma1``::

        b(t, x) = alpha_dot mu0 + beta_dot mu1 + K C^{-1} (x - alpha mu0 - beta mu1)

    Parameters are ``mu1`` followed by the lower triangle of ``L1``
    (``Sigma1 = L1 L1^T``).
    """

    kind = "analytic_gaussian"

    def __init__(self, mu0, Sigma0, mu1, Sigma1, schedule: InterpolantSchedule | None = None):
        mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
        d = mu0.shape[0]
        self.mu0 = mu0
        self.Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=np.float64))
        self.schedule = schedule or make_linear_schedule()
        self._tril = np.tril_indices(d)
        L1 = np.linalg.cholesky(np.atleast_2d(np.asarray(Sigma1, dtype=np.float64)))
        mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
        super().__init__(d, d, np.concatenate([mu1, L1[self._tril]]))

    @property
    def mu1(self) -> np.ndarray:
        return self.params[: self.dim]

    @property
    def L1(self) -> np.ndarray:
        L = np.zeros((self.dim, self.dim))
        L[self._tril] = self.params[self.dim:]
        return L

    @property
    def Sigma1(self) -> np.ndarray:
        L = self.L1
        return L @ L.T

    def _forward(self, t, x):
        a, b, ad, bd = self.schedule.coefficients(t)
        S0, S1 = self.Sigma0, self.Sigma1
        C = (a * a)[:, None, None] * S0 + (b * b)[:, None, None] * S1
        K = (a * ad)[:, None, None] * S0 + (b * bd)[:, None, None] * S1
        resid = x - a[:, None] * self.mu0 - b[:, None] * self.mu1
        y = np.linalg.solve(C, resid[..., None])[..., 0]
        out = ad[:, None] * self.mu0 + bd[:, None] * self.mu1 + np.einsum("nij,nj->ni", K, y)
        return out, (b, bd, C, K, y)

    def _grad_parts(self, cache, cot):
        b, bd, C, K, y = cache
        # z = C^{-1} K g, using symmetry of C and K.
        z = np.linalg.solve(C, np.einsum("nij,nj->ni", K, cot)[..., None])[..., 0]
        g_mu = bd[:, None] * cot - b[:, None] * z
        u = (b * bd)[:, None] * cot - (b * b)[:, None] * z
        G = u[:, :, None] * y[:, None, :]  # d<g, b>/d Sigma1 per sample
        return g_mu, G

    def _pullback(self, cache, cot):
        g_mu, G = self._grad_parts(cache, cot)
        Gs = G.sum(axis=0)
        gL = (Gs + Gs.T) @ self.L1
        return np.concatenate([g_mu.sum(axis=0), gL[self._tril]])

    def per_sample_grads(self, t, x, cotangent):
        t, x = _prepare(t, x, self.dim)
        _, cache = self._forward(t, x)
        g_mu, G = self._grad_parts(cache, np.asarray(cotangent, dtype=np.float64).reshape(x.shape))
        gL = np.einsum("nij,jk->nik", G + np.transpose(G, (0, 2, 1)), self.L1)
        return np.concatenate([g_mu, gL[:, self._tril[0], self._tril[1]]], axis=1)


def analytic_gaussian_tilted(mu0, Sigma0, mu1, Sigma1, schedule: InterpolantSchedule | None,
                             a: float, reward: Reward) -> AnalyticGaussianVelocity:
    """Exact tilted velocity ``b_{t,a}`` for Gaussian endpoints and a linear or quadratic reward."""
    mu_a, Sigma_a = gaussian_tilted_params(mu1, Sigma1, reward, a)
    return AnalyticGaussianVelocity(mu0, Sigma0, mu_a, Sigma_a, schedule)


# --------------------------------------------------------------------------
# Grid


class GridVelocity(VelocityModel):
    """Multilinear interpolation over ``t in [0, 1]`` and a box in ``x``.

    ``values`` has shape ``(n_t, n_x_1, ..., n_x_d, d)``; it is stored flat in
    ``params``. Points outside the box are clamped to its boundary and a
    :class:`GridExtrapolationWarning` is emitted.
    """

    kind = "grid"

    def __init__(self, dim: int, n_t: int, n_x, lo, hi, values=None):
        if dim not in (1, 2):
            raise ValueError("grid velocity supports spatial dimension 1 or 2")
        self.n_t = int(n_t)
        self.n_x = tuple(int(n) for n in np.broadcast_to(np.asarray(n_x), (dim,)))
        self.lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (dim,)).copy()
        self.hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (dim,)).copy()
        if min((self.n_t,) + self.n_x) < 2:
            raise ValueError("every grid axis needs at least two nodes")
        self.shape = (self.n_t,) + self.n_x
        n_cells = int(np.prod(self.shape))
        if values is None:
            values = np.zeros(n_cells * dim)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != n_cells * dim:
            raise ValueError(f"expected {n_cells * dim} grid values, got {values.size}")
        super().__init__(dim, dim, values)

    @classmethod
    def from_function(cls, fn, dim, n_t, n_x, lo, hi) -> "GridVelocity":
        """Sample ``fn(t, x)`` at the grid nodes."""
        grid = cls(dim, n_t, n_x, lo, hi)
        axes = [np.linspace(0.0, 1.0, grid.n_t)] + [
            np.linspace(grid.lo[k], grid.hi[k], grid.n_x[k]) for k in range(dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        t = mesh[0].ravel()
        x = np.stack([m.ravel() for m in mesh[1:]], axis=1)
        grid.params[:] = np.asarray(fn(t, x), dtype=np.float64).reshape(-1)
        return grid

    def locate(self, t, x):
        """Corner flat indices ``(N, 2^(1+d))``, weights and the clamped mask."""
        coords = [t * (self.n_t - 1)]
        for k in range(self.dim):
            coords.append((x[:, k] - self.lo[k]) / (self.hi[k] - self.lo[k]) * (self.n_x[k] - 1))
        clamped = np.zeros(t.shape[0], dtype=bool)
        base, frac = [], []
        for u, n in zip(coords, self.shape):
            outside = (u < 0.0) | (u > n - 1)
            clamped |= outside
            u = np.clip(u, 0.0, n - 1)
            i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
            base.append(i0)
            frac.append(u - i0)
        strides = np.cumprod((self.shape[1:] + (1,))[::-1])[::-1]
        n_axes = len(self.shape)
        idx = np.zeros((t.shape[0], 2 ** n_axes), dtype=np.int64)
        w = np.ones((t.shape[0], 2 ** n_axes))
        for corner in range(2 ** n_axes):
            for ax in range(n_axes):
                bit = (corner >> ax) & 1
                idx[:, corner] += (base[ax] + bit) * strides[ax]
                w[:, corner] *= frac[ax] if bit else (1.0 - frac[ax])
        return idx, w, clamped

    def forward_with_flags(self, t, x):
        t, x = _prepare(t, x, self.dim)
        out, cache = self._forward(t, x, warn=False)
        return out, cache[2]

    def _forward(self, t, x, warn=True):
        idx, w, clamped = self.locate(t, x)
        if warn and clamped.any():
            warnings.warn(f"{int(clamped.sum())} points outside grid bounds were clamped",
                          GridExtrapolationWarning, stacklevel=3)
        vals = self.params.reshape(-1, self.dim)
        out = np.einsum("nc,ncd->nd", w, vals[idx])
        return out, (idx, w, clamped)

    def _pullback(self, cache, cot):
        idx, w, _ = cache
        n_cells = int(np.prod(self.shape))
        grad = np.empty((n_cells, self.dim))
        for k in range(self.dim):
            grad[:, k] = np.bincount(idx.ravel(), weights=(w * cot[:, k:k + 1]).ravel(),
                                     minlength=n_cells)
        return grad.reshape(-1)


# --------------------------------------------------------------------------
# MLP


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "silu": (lambda z: z / (1.0 + np.exp(-z)),
             lambda z, h: (1.0 / (1.0 + np.exp(-z))) * (1.0 + z * (1.0 - 1.0 / (1.0 + np.exp(-z))))),
}
_ACTIVATION_CODES = {"tanh": 0, "silu": 1}


def time_features(t: np.ndarray) -> np.ndarray:
    return np.stack([t, np.sin(2.0 * np.pi * t), np.cos(2.0 * np.pi * t)], axis=1)


class MlpVelocity(VelocityModel):
    """Fully connected network on ``[x, t, sin 2pi t, cos 2pi t]``.

    ``out_dim`` defaults to ``dim``; a scalar-output network (``out_dim=1``)
    is used for learned control variates.
    """

    kind = "mlp"

    def __init__(self, dim: int, hidden=(64, 64, 64), activation: str = "tanh",
                 out_dim: int | None = None, seed: int = 0, params=None, output_scale: float = 0.1):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        out_dim = dim if out_dim is None else out_dim
        self.activation = activation
        self.sizes = (dim + 3,) + tuple(int(h) for h in hidden) + (out_dim,)
        if params is None:
            rng = np.random.default_rng(seed)
            chunks = []
            n_layers = len(self.sizes) - 1
            for li, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                scale = 1.0 / math.sqrt(fan_in)
                if li == n_layers - 1:
                    scale *= output_scale
                chunks.append(rng.normal(0.0, scale, size=fan_in * fan_out))
                chunks.append(np.zeros(fan_out))
            params = np.concatenate(chunks)
        super().__init__(dim, out_dim, params)
        if self.params.size != self._count():
            raise ValueError("parameter vector does not match the layer sizes")

    def _count(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def layers(self):
        out, off = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.params[off: off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.params[off: off + fan_out]
            off += fan_out
            out.append((W, b))
        return out

    def _forward(self, t, x):
        act, _ = _ACTIVATIONS[self.activation]
        h = np.concatenate([x, time_features(t)], axis=1)
        hs, zs = [h], []
        layers = self.layers()
        for W, b in layers[:-1]:
            z = h @ W + b
            h = act(z)
            zs.append(z)
            hs.append(h)
        W, b = layers[-1]
        return h @ W + b, (hs, zs)

    def _backprop(self, cache, cot, per_sample: bool):
        _, dact = _ACTIVATIONS[self.activation]
        hs, zs = cache
        layers = self.layers()
        grads = []
        delta = cot
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            h_in = hs[li]
            if per_sample:
                grads.append(delta)
                grads.append(np.einsum("ni,no->nio", h_in, delta).reshape(h_in.shape[0], -1))
            else:
                grads.append(delta.sum(axis=0))
                grads.append((h_in.T @ delta).ravel())
            if li > 0:
                delta = (delta @ W.T) * dact(zs[li - 1], hs[li])
        return np.concatenate(grads[::-1], axis=-1)

    def _pullback(self, cache, cot):
        return self._backprop(cache, cot, per_sample=False)

    def per_sample_grads(self, t, x, cotangent):
        t, x = _prepare(t, x, self.dim)
        _, cache = self._forward(t, x)
        cot = np.asarray(cotangent, dtype=np.float64).reshape(x.shape[0], self.out_dim)
        return self._backprop(cache, cot, per_sample=True)


# --------------------------------------------------------------------------
# Optimisation


@dataclass
class GradientReport:
    """Loss value and flat parameter gradient of a batch objective.

    ``output_grad`` holds ``dL/db_hat`` per sample, ``clip_count`` the number
    of clipped tilt exponents, and ``cv_grad`` the control-variate gradient
    when a learned control variate took part.
    """

    loss_value: float
    grad: np.ndarray
    output_grad: np.ndarray | None = None
    clip_count: int = 0
    cv_grad: np.ndarray | None = None


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    nan_skips: int = 0

    def update(self, params: np.ndarray, grad: np.ndarray) -> bool:
        """Apply one step in place; returns False (and skips) on a non-finite gradient."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
        if not np.all(np.isfinite(grad)):
            self.nan_skips += 1
            warnings.warn("non-finite gradient; optimizer step skipped", NonFiniteGradientWarning,
                          stacklevel=2)
            return False
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step_count": self.step_count, "nan_skips": self.nan_skips,
                "m": None if self.m is None else self.m.copy(),
                "v": None if self.v is None else self.v.copy()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "Adam":
        return cls(**state)


def train_step(model: VelocityModel, report: GradientReport, optimizer: Adam) -> VelocityModel:
    optimizer.update(model.params, report.grad)
    return model


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (all little-endian):
#   4 bytes   magic b"TMCK"
#   u32       format version (1)
#   u32       backend code: 0 analytic_gaussian, 1 grid, 2 mlp
#   u32       dim
#   u32       out_dim
#   u32       n_meta, then n_meta x u32 backend metadata
#               analytic_gaussian: [schedule code (0 = linear)]
#               grid:              [n_t, n_x_1, ..., n_x_d]
#               mlp:               [activation code, n_sizes, size_0, ..., size_L]
#   u32       n_extra, then n_extra x f64 backend constants
#               analytic_gaussian: mu0 (d) then Sigma0 (d*d, row-major)
#               grid:              lo (d) then hi (d)
#               mlp:               none
#   u32       n_params, then n_params x f64 flat parameter vector

_MAGIC = b"TMCK"
_VERSION = 1
_BACKEND_CODES = {"analytic_gaussian": 0, "grid": 1, "mlp": 2}


def _pack_u32s(values) -> bytes:
    values = [int(v) for v in values]
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def _pack_f64s(values) -> bytes:
    values = np.asarray(values, dtype="<f8").ravel()
    return struct.pack("<I", values.size) + values.tobytes()


def checkpoint_bytes(model: VelocityModel) -> bytes:
    if isinstance(model, AnalyticGaussianVelocity):
        if model.schedule.kind is not ScheduleKind.LINEAR:
            raise ValueError("only the linear schedule can be checkpointed")
        meta, extra = [0], np.concatenate([model.mu0, model.Sigma0.ravel()])
    elif isinstance(model, GridVelocity):
        meta, extra = [model.n_t, *model.n_x], np.concatenate([model.lo, model.hi])
    elif isinstance(model, MlpVelocity):
        meta, extra = [_ACTIVATION_CODES[model.activation], len(model.sizes), *model.sizes], []
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    header = _MAGIC + struct.pack("<IIII", _VERSION, _BACKEND_CODES[model.kind], model.dim,
                                  model.out_dim)
    return header + _pack_u32s(meta) + _pack_f64s(extra) + _pack_f64s(model.params)


def model_from_bytes(data: bytes) -> VelocityModel:
    if data[:4] != _MAGIC:
        raise ValueError("not a velocity checkpoint (bad magic)")
    version, code, dim, out_dim = struct.unpack_from("<IIII", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 20

    def read_u32s():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        vals = struct.unpack_from(f"<{n}I", data, off + 4)
        off += 4 + 4 * n
        return list(vals)

    def read_f64s():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        vals = np.frombuffer(data, dtype="<f8", count=n, offset=off + 4).astype(np.float64)
        off += 4 + 8 * n
        return vals

    meta, extra, params = read_u32s(), read_f64s(), read_f64s()
    if code == 0:
        mu0, Sigma0 = extra[:dim], extra[dim:].reshape(dim, dim)
        model = AnalyticGaussianVelocity(mu0, Sigma0, np.zeros(dim), np.eye(dim))
    elif code == 1:
        model = GridVelocity(dim, meta[0], meta[1:], extra[:dim], extra[dim:])
    elif code == 2:
        activation = {v: k for k, v in _ACTIVATION_CODES.items()}[meta[0]]
        sizes = meta[2: 2 + meta[1]]
        model = MlpVelocity(dim, hidden=sizes[1:-1], activation=activation, out_dim=sizes[-1],
                            params=params)
    else:
        raise ValueError(f"unknown backend code {code}")
    model.restore(params)
    return model


def save_checkpoint(model: VelocityModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> VelocityModel:
    return model_from_bytes(Path(path).read_bytes())
