"""
Ensemble simulation of Itô SDEs and their moment statistics.

Models are written in vectorized form: ``drift`` maps an array of states with
shape ``(..., n)`` to ``(..., n)`` and ``diffusion`` maps it to
``(..., n, m)``.  A single state is just the case of an empty leading shape.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteState

#: Largest fraction of discarded trajectories tolerated by ``simulate_ensemble``.
MAX_DISCARD_FRACTION = 0.01


@dataclass(frozen=True)
class ImpactRule:
    """Rigid-wall impact at ``x[coordinate] = 0`` with velocity reset.

    A trajectory crossing the wall from the positive side has its velocity
    component replaced by ``-restitution * velocity``.
    """

    coordinate: int = 0
    velocity: int = 1
    restitution: float = 1.0


@dataclass(frozen=True)
class SdeModel:
    """Drift/diffusion pair of ``dX = f(X) dt + g(X) dW``.

    Ground-truth benchmark systems and learned surrogates share this type.
    """

    dim: int
    noise_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    impact: Optional[ImpactRule] = None
    name: str = "sde"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise ValueError("dim and noise_dim must be positive")

    def f(self, x):
        return np.asarray(self.drift(np.asarray(x, dtype=float)), dtype=float)

    def g(self, x):
        return np.asarray(self.diffusion(np.asarray(x, dtype=float)), dtype=float)

    def without_impact(self) -> "SdeModel":
        return SdeModel(self.dim, self.noise_dim, self.drift, self.diffusion,
                        None, self.name, dict(self.params))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    steps: int = 25
    ensemble_size: int = 10_000
    seed: int = 0
    milstein_correction: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 1 or self.ensemble_size < 1:
            raise ValueError("steps and ensemble_size must be positive")

    @property
    def horizon(self):
        return self.dt * self.steps

    def to_dict(self):
        return {"dt": self.dt, "steps": self.steps, "ensemble_size": self.ensemble_size,
                "seed": self.seed, "milstein_correction": self.milstein_correction}


@dataclass(frozen=True)
class TrajectoryEnsemble:
    initial_state: np.ndarray
    states: np.ndarray  # (N, L+1, n)
    config: SimConfig
    discarded: int = 0
    initial_std: float = 0.0

    @property
    def times(self):
        return self.config.dt * np.arange(self.states.shape[1])


@dataclass(frozen=True)
class MomentSeries:
    times: np.ndarray  # (L+1,)
    means: np.ndarray  # (L+1, n)
    covariances: np.ndarray  # (L+1, n, n)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def steps(self):
        return self.means.shape[0] - 1


def rng_for(seed, *stream):
    """Counter-based generator keyed by ``seed`` and an optional stream key."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def _milstein_term(model, x, dt, dw):
    g = model.g(x)
    m = model.noise_dim
    h = 1e-6
    if m == 1:
        # directional derivative of g along g handles n-dim states with scalar noise
        g0 = g[..., 0]
        scale = np.maximum(1.0, np.abs(x))
        gp = model.g(x + h * scale * g0)[..., 0]
        gm = model.g(x - h * scale * g0)[..., 0]
        dgg = (gp - gm) / (2 * h * scale)
        return 0.5 * dgg * (dw[..., :1] ** 2 - dt)
    if m == model.dim:
        diag = np.diagonal(g, axis1=-2, axis2=-1)
        eye = np.eye(m)
        corr = np.empty_like(diag)
        for j in range(m):
            gp = np.diagonal(model.g(x + h * eye[j]), axis1=-2, axis2=-1)[..., j]
            gm = np.diagonal(model.g(x - h * eye[j]), axis1=-2, axis2=-1)[..., j]
            corr[..., j] = diag[..., j] * (gp - gm) / (2 * h)
        return 0.5 * corr * (dw ** 2 - dt)
    raise ValueError("Milstein correction needs scalar or diagonal noise")


def _increment(model, x, dt, dw, milstein):
    dx = model.f(x) * dt + np.einsum("...ij,...j->...i", model.g(x), dw)
    if milstein:
        dx = dx + _milstein_term(model, x, dt, dw)
    return dx


def _apply_impact(model, x, x_new, dt, dw, milstein):
    rule = model.impact
    c, v = rule.coordinate, rule.velocity
    hit = (x_new[..., c] < 0) & (x[..., c] >= 0)
    if not np.any(hit):
        return x_new
    xo, xn = x[hit], x_new[hit]
    tau = xo[:, c] / (xo[:, c] - xn[:, c])
    xc = xo + tau[:, None] * (xn - xo)
    xc[:, c] = 0.0
    vel = xc[:, v]
    # only inward-moving crossings are reflected
    xc[:, v] = np.where(vel < 0, -rule.restitution * vel, vel)
    rem = (1.0 - tau) * dt
    dw_rem = dw[hit] * np.sqrt(1.0 - tau)[:, None]
    out = xc + _increment(model, xc, rem[:, None], dw_rem, milstein)
    out[:, c] = np.maximum(out[:, c], 0.0)
    x_new = x_new.copy()
    x_new[hit] = out
    return x_new


def euler_milstein_step(model: SdeModel, state, dt, noise_increment, milstein_correction=False):
    """Advance one step of ``X + f(X) dt + g(X) dW``.

    Works on a single state of shape ``(n,)`` or a batch ``(N, n)``.  With
    ``milstein_correction`` the ``1/2 g g' (dW^2 - dt)`` term is added
    (scalar or diagonal noise only).  Models with an impact rule have wall
    crossings located by linear interpolation, the velocity reset applied,
    and the remainder of the step integrated from the wall.

    Raises
    ------
    NonFiniteState
        If the returned state contains NaN or Inf.
    """
    x = np.asarray(state, dtype=float)
    dw = np.asarray(noise_increment, dtype=float)
    x_new = x + _increment(model, x, dt, dw, milstein_correction)
    if model.impact is not None:
        single = x.ndim == 1
        xb, nb, wb = np.atleast_2d(x), np.atleast_2d(x_new), np.atleast_2d(dw)
        x_new = _apply_impact(model, xb, nb, dt, wb, milstein_correction)
        if single:
            x_new = x_new[0]
    if not np.all(np.isfinite(x_new)):
        raise NonFiniteState("non-finite state after Euler step")
    return x_new


def _step_batch(model, x, dt, dw, milstein):
    x_new = x + _increment(model, x, dt, dw, milstein)
    if model.impact is not None:
        x_new = _apply_impact(model, x, x_new, dt, dw, milstein)
    return x_new


def simulate_ensemble(model: SdeModel, x0, config: SimConfig, stream=(), initial_std=0.0):
    """Simulate ``config.ensemble_size`` independent trajectories from ``x0``.

    Trajectory ``i`` consumes block ``i`` of a Philox stream keyed by
    ``(config.seed, *stream)``, so its noise depends only on the seed and its
    index.  ``initial_std > 0`` perturbs every trajectory's starting point by
    ``N(0, initial_std^2 I)`` drawn from a separate stream.

    Trajectories that blow up are discarded; more than 1% discarded raises
    ``NonFiniteState``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(model.dim)
    n, m = model.dim, model.noise_dim
    N, L, dt = config.ensemble_size, config.steps, config.dt
    rng = rng_for(config.seed, *stream)
    noise = rng.standard_normal((N, L, m)) * np.sqrt(dt)
    states = np.empty((N, L + 1, n))
    states[:, 0] = x0
    if initial_std > 0:
        states[:, 0] += initial_std * rng_for(config.seed, *stream, 2**31 - 1).standard_normal((N, n))
    alive = np.ones(N, dtype=bool)
    x = states[:, 0].copy()
    with np.errstate(all="ignore"):
        for k in range(L):
            x = _step_batch(model, x, dt, noise[:, k], config.milstein_correction)
            bad = ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                alive &= ~bad
                x[bad] = 0.0  # keep dead rows finite so later steps stay quiet
            states[:, k + 1] = x
    discarded = int(N - alive.sum())
    if discarded > MAX_DISCARD_FRACTION * N:
        raise NonFiniteState(f"{discarded} of {N} trajectories blew up", discarded)
    if discarded:
        states = states[alive]
    return TrajectoryEnsemble(x0, states, config, discarded, float(initial_std))


def moments_of(states):
    """Population mean and covariance of ``states`` with shape ``(N, T, n)``."""
    states = np.asarray(states, dtype=float)
    if states.shape[0] == 0:
        raise ValueError("empty ensemble")
    mu = states.mean(axis=0)
    d = states - mu
    cov = np.einsum("ntj,ntk->tjk", d, d) / states.shape[0]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mu, cov


def compute_moments(ensemble: TrajectoryEnsemble) -> MomentSeries:
    mu, cov = moments_of(ensemble.states)
    return MomentSeries(ensemble.times, mu, cov)


# ---------------------------------------------------------------- persistence

def write_ensemble_csv(path, ensemble: TrajectoryEnsemble):
    n = ensemble.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_index", "step"] + [f"x_{i + 1}" for i in range(n)])
        for i, traj in enumerate(ensemble.states):
            for k, row in enumerate(traj):
                w.writerow([i, k] + [repr(float(v)) for v in row])


def read_ensemble_csv(path):
    """Return the ``(N, L+1, n)`` state array stored by ``write_ensemble_csv``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    N = int(data[:, 0].max()) + 1
    T = int(data[:, 1].max()) + 1
    return data[:, 2:].reshape(N, T, -1)


def moment_header(n):
    return (["t"] + [f"mu_{i + 1}" for i in range(n)]
            + [f"sigma_{i + 1}{j + 1}" for i in range(n) for j in range(n)])


def write_moments_csv(path, series: MomentSeries):
    n = series.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(moment_header(n))
        for t, mu, cov in zip(series.times, series.means, series.covariances):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in mu]
                       + [repr(float(v)) for v in cov.reshape(-1)])


def read_moments_csv(path) -> MomentSeries:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    n = sum(1 for h in header if h.startswith("mu_"))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return MomentSeries(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:].reshape(-1, n, n))
