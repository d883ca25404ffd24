"""
Downstream checks of identified models: first-escape probabilities of 1-D
systems and stationary densities of 2-D impact oscillators.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import solve_banded

from .errors import IncreaseMaxTime, NonFiniteState, SingularDiffusion
from .sde_sim import SdeModel, _step_batch, rng_for

@dataclass(frozen=True)
class EscapeProblem:
    """Probability of leaving ``(lower, upper)`` through ``lower`` first.

    ``drift`` and ``sigma`` are scalar fields evaluated on 1-D arrays.
    """

    drift: object
    sigma: object
    lower: float
    upper: float
    query: np.ndarray = field(default_factory=lambda: np.array([]))

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("escape interval must satisfy lower < upper")
        q = np.asarray(self.query, dtype=float)
        object.__setattr__(self, "query", q)
        if q.size and (np.any(q <= self.lower) or np.any(q >= self.upper)):
            raise ValueError("query points must lie strictly inside the interval")

    @classmethod
    def from_model(cls, model: SdeModel, lower, upper, query=()):
        if model.dim != 1:
            raise ValueError("escape problems are one-dimensional")

        def drift(x):
            return model.f(np.asarray(x, dtype=float)[:, None])[:, 0]

        def sigma(x):
            g = model.g(np.asarray(x, dtype=float)[:, None])
            return np.sqrt(np.sum(g[:, 0, :] ** 2, axis=-1))

        return cls(drift, sigma, lower, upper, np.asarray(query, dtype=float))

    def coefficients(self, x):
        x = np.asarray(x, dtype=float)
        m = np.asarray(self.drift(x), dtype=float).reshape(x.shape)
        s = np.asarray(self.sigma(x), dtype=float).reshape(x.shape)
        return m, s * s


def _check_diffusion(x, s2):
    scale = max(float(np.max(s2)), 1e-300)
    bad = np.flatnonzero(s2[1:-1] <= 1e-14 * scale)
    if bad.size:
        loc = float(x[1 + bad[0]])
        raise SingularDiffusion(f"diffusion vanishes at x={loc:.6g}", loc)


def escape_curve_analytic(problem: EscapeProblem, mesh=20001):
    """Mesh and escape probability from the closed-form quadrature.

    ``psi(x) = exp(-int_{x_ref}^x 2 m / sigma^2)`` with ``x_ref`` the interval
    midpoint and ``P(x) = 1 - int_{lower}^x psi / int_{lower}^{upper} psi``.
    """
    x = np.linspace(problem.lower, problem.upper, mesh)
    m, s2 = problem.coefficients(x)
    _check_diffusion(x, s2)
    if s2[0] <= 0 or s2[-1] <= 0:
        # endpoints are excluded from the integrand; extrapolate linearly
        s2 = s2.copy()
        s2[0] = s2[0] if s2[0] > 0 else 2 * s2[1] - s2[2]
        s2[-1] = s2[-1] if s2[-1] > 0 else 2 * s2[-2] - s2[-3]
    q = -2.0 * m / s2
    Q = cumulative_simpson(q, x=x, initial=0.0)
    Q -= np.interp(0.5 * (problem.lower + problem.upper), x, Q)
    # shifting by the maximum keeps psi in (0, 1]; underflow only hides negligible mass
    psi = np.exp(Q - Q.max())
    integral = cumulative_simpson(psi, x=x, initial=0.0)
    P = 1.0 - integral / integral[-1]
    P[0], P[-1] = 1.0, 0.0
    return x, P


def escape_probability_analytic(problem: EscapeProblem, mesh=20001):
    x, P = escape_curve_analytic(problem, mesh)
    return np.interp(problem.query, x, P)


def escape_curve_fd(problem: EscapeProblem, nodes=1001):
    """Central-difference solution of ``m P' + sigma^2 P'' / 2 = 0``."""
    x = np.linspace(problem.lower, problem.upper, nodes)
    h = x[1] - x[0]
    m, s2 = problem.coefficients(x)
    _check_diffusion(x, s2)
    a = 0.5 * s2 / h**2
    lo, di, up = a - m / (2 * h), -2.0 * a, a + m / (2 * h)
    k = nodes - 2
    ab = np.zeros((3, k))
    ab[0, 1:] = up[1:-2]
    ab[1] = di[1:-1]
    ab[2, :-1] = lo[2:-1]
    rhs = np.zeros(k)
    rhs[0] -= lo[1] * 1.0  # P(lower) = 1; P(upper) = 0 adds nothing
    P = np.r_[1.0, solve_banded((1, 1), ab, rhs), 0.0]
    return x, P


def escape_probability_fd(problem: EscapeProblem, nodes=1001):
    x, P = escape_curve_fd(problem, nodes)
    return np.interp(problem.query, x, P)


@dataclass(frozen=True)
class MonteCarloEscape:
    estimate: np.ndarray
    stderr: np.ndarray
    censored_fraction: np.ndarray


def escape_probability_monte_carlo(problem: EscapeProblem, n_traj=10_000, max_time=100.0, dt=1e-3,
                                   seed=0, max_censored=0.01) -> MonteCarloEscape:
    """Fraction of Euler-Maruyama paths that hit ``lower`` before ``upper``.

    Boundary crossings between grid times are detected with the Brownian
    bridge probability ``exp(-2 (a - b)(c - b) / (sigma^2 dt))``, which removes
    the leading discrete-monitoring bias.  Paths alive at ``max_time`` are
    censored and count towards neither outcome.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    q = problem.query
    x = np.repeat(q, n_traj)
    owner = np.repeat(np.arange(len(q)), n_traj)
    hit_low = np.zeros(len(q))
    hit_up = np.zeros(len(q))
    rng = rng_for(seed, 7)
    sq = np.sqrt(dt)
    t = 0.0
    lo, hi = problem.lower, problem.upper
    while x.size and t < max_time:
        m, s2 = problem.coefficients(x)
        xn = x + m * dt + np.sqrt(s2) * sq * rng.standard_normal(x.size)
        u = rng.random(x.size)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            p_lo = np.exp(-2.0 * np.maximum(x - lo, 0) * np.maximum(xn - lo, 0) / (s2 * dt))
            p_hi = np.exp(-2.0 * np.maximum(hi - x, 0) * np.maximum(hi - xn, 0) / (s2 * dt))
        down = (xn <= lo) | (u < np.nan_to_num(p_lo))
        up = ~down & ((xn >= hi) | (rng.random(x.size) < np.nan_to_num(p_hi)))
        if down.any():
            hit_low += np.bincount(owner[down], minlength=len(q))
        if up.any():
            hit_up += np.bincount(owner[up], minlength=len(q))
        keep = ~(down | up)
        x, owner = xn[keep], owner[keep]
        t += dt
    censored = (n_traj - hit_low - hit_up) / n_traj
    if np.any(censored > max_censored):
        raise IncreaseMaxTime(f"censored fraction {censored.max():.3%} exceeds {max_censored:.1%}",
                              float(censored.max()))
    decided = np.maximum(hit_low + hit_up, 1)
    est = hit_low / decided
    return MonteCarloEscape(est, np.sqrt(est * (1 - est) / decided), censored)


# ----------------------------------------------------------------- densities

@dataclass(frozen=True)
class DensityGrid:
    bounds: Tuple[Tuple[float, float], ...]
    shape: Tuple[int, ...]
    counts: np.ndarray
    density: np.ndarray
    burn_in: float
    total_time: float
    outside_fraction: float = 0.0
    restarts: int = 0

    @property
    def widths(self):
        return np.array([(hi - lo) / s for (lo, hi), s in zip(self.bounds, self.shape)])

    @property
    def centers(self):
        return [lo + (np.arange(s) + 0.5) * w for (lo, _), s, w in zip(self.bounds, self.shape, self.widths)]

    @property
    def cell_volume(self):
        return float(np.prod(self.widths))

    def write_csv(self, path):
        mesh = np.meshgrid(*self.centers, indexing="ij")
        cols = [a.ravel() for a in mesh]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(len(cols))] + ["count", "density"])
            for row in zip(*cols, self.counts.ravel(), self.density.ravel()):
                w.writerow([repr(float(v)) for v in row[:-2]] + [int(row[-2]), repr(float(row[-1]))])


def density_from_counts(counts, bounds, shape, burn_in=0.0, total_time=0.0, outside=0.0, restarts=0):
    counts = np.asarray(counts, dtype=float).reshape(shape)
    widths = np.array([(hi - lo) / s for (lo, hi), s in zip(bounds, shape)])
    total = counts.sum()
    if total <= 0:
        raise ValueError("no samples fell inside the density grid")
    dens = counts / (total * np.prod(widths))
    return DensityGrid(tuple(tuple(map(float, b)) for b in bounds), tuple(shape), counts, dens,
                       burn_in, total_time, outside, restarts)


def steady_state_density(model: SdeModel, x0, burn_in, total_time, bounds, shape, dt=0.002,
                         n_traj=500, seed=0, max_restarts=None, record_every=1) -> DensityGrid:
    """Time-averaged occupancy histogram of an ensemble of long trajectories.

    Samples are pooled after ``burn_in``.  A trajectory that blows up is
    restarted from ``x0`` with fresh noise and contributes again only after
    its own burn-in; more than ``max_restarts`` restarts raise
    ``NonFiniteState``.
    """
    if not total_time > burn_in:
        raise ValueError("total_time must exceed burn_in")
    n, mdim = model.dim, model.noise_dim
    shape = tuple(int(s) for s in shape)
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    width = (hi - lo) / np.array(shape)
    max_restarts = n_traj if max_restarts is None else max_restarts
    x0 = np.asarray(x0, dtype=float).reshape(n)
    x = np.tile(x0, (n_traj, 1))
    age = np.zeros(n_traj)
    rng = rng_for(seed, 11)
    counts = np.zeros(int(np.prod(shape)), dtype=np.int64)
    outside = 0
    restarts = 0
    steps = int(round(total_time / dt))
    sq = np.sqrt(dt)
    for j in range(steps):
        with np.errstate(all="ignore"):
            x = _step_batch(model, x, dt, rng.standard_normal((n_traj, mdim)) * sq, False)
        age += dt
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            restarts += int(bad.sum())
            if restarts > max_restarts:
                raise NonFiniteState(f"{restarts} restarts exceed the limit of {max_restarts}", restarts)
            x[bad] = x0
            age[bad] = 0.0
        if j % record_every:
            continue
        live = age > burn_in
        if not live.any():
            continue
        u = np.floor((x[live] - lo) / width)
        inside = np.all((u >= 0) & (u < np.array(shape)), axis=1)
        outside += int((~inside).sum())
        if inside.any():
            idx = u[inside].astype(np.int64)
            counts += np.bincount(np.ravel_multi_index(idx.T, shape), minlength=counts.size)
    frac = outside / max(outside + counts.sum(), 1)
    return density_from_counts(counts, bounds, shape, burn_in, total_time, frac, restarts)


def radial_profile(density: DensityGrid, center=None):
    """Angular average of the density in rings one cell width thick."""
    if len(density.shape) != 2:
        raise ValueError("radial profile needs a 2-D density")
    center = np.zeros(2) if center is None else np.asarray(center, dtype=float)
    c1, c2 = density.centers
    R = np.hypot(*(np.stack(np.meshgrid(c1, c2, indexing="ij")) - center[:, None, None]))
    w = float(np.min(density.widths))
    b = np.floor(R / w).astype(int).ravel()
    sums = np.bincount(b, weights=density.density.ravel())
    cnt = np.bincount(b)
    prof = np.where(cnt > 0, sums / np.maximum(cnt, 1), 0.0)
    radii = (np.arange(len(prof)) + 0.5) * w
    return radii, prof


def p_bifurcation_diagnostic(density: DensityGrid, r_threshold_cells=2.0, center=None):
    """Radius of the most probable ring about the origin and its ring/point class."""
    if not np.any(density.density > 0):
        raise ValueError("density is identically zero")
    radii, prof = radial_profile(density, center)
    r_star = float(radii[int(np.argmax(prof))])
    thr = r_threshold_cells * float(np.min(density.widths))
    return {"r_star": r_star, "threshold": thr, "shape": "ring" if r_star > thr else "point"}
