"""
Ground-truth benchmark systems in Itô form.

Both systems carry the Wong-Zakai correction in their drift, which for the
multiplicative noise used here is ``D * x`` on the noisy components.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq

from .sde_sim import ImpactRule, SdeModel


@dataclass(frozen=True)
class GrazingParams:
    """Vegetation biomass model with saturating herbivore consumption.

    The defaults are not taken from any published parameter set; they are
    chosen so that the drift has two stable equilibria separated by an
    unstable one for ``D`` up to 0.1.
    """

    k: float = 0.1
    A: float = 10.0
    beta: float = 2.0
    c: float = 1.15
    x0: float = 1.0
    D: float = 0.05

    def __post_init__(self):
        for name in ("k", "A", "beta", "c", "x0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.D < 0:
            raise ValueError("D must be non-negative")


@dataclass(frozen=True)
class RvdpParams:
    """Rayleigh-Van der Pol oscillator with a rigid wall at zero displacement."""

    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.2
    r: float = 0.95
    D: float = 0.05
    independent_noise: bool = False

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise ValueError("restitution must lie in (0, 1]")
        if self.D < 0:
            raise ValueError("D must be non-negative")


def grazing_physical_drift(p: GrazingParams, x):
    """Noise-free growth minus consumption."""
    x = np.asarray(x, dtype=float)
    return p.k * x * (p.A - x) - p.beta * p.c * x**2 / (x**2 + p.x0**2)


def grazing_model(p: GrazingParams = GrazingParams()) -> SdeModel:
    s = np.sqrt(2.0 * p.D)

    def drift(x):
        x = np.asarray(x, dtype=float)
        return grazing_physical_drift(p, x) + p.D * x

    def diffusion(x):
        return (s * np.asarray(x, dtype=float))[..., None]

    return SdeModel(1, 1, drift, diffusion, None, "grazing", {"system": "grazing", **asdict(p)})


def grazing_equilibria(p: GrazingParams, lo=1e-6, hi=None, n=20001):
    """Positive zeros of the Itô drift, each tagged ``"stable"`` or ``"unstable"``."""
    model = grazing_model(p)
    hi = p.A if hi is None else hi
    xs = np.linspace(lo, hi, n)
    fs = model.f(xs[:, None])[:, 0]
    out = []
    for i in np.flatnonzero(np.sign(fs[:-1]) * np.sign(fs[1:]) < 0):
        root = brentq(lambda z: model.f(np.array([z]))[0], xs[i], xs[i + 1], xtol=1e-13)
        out.append((root, "stable" if fs[i] > 0 else "unstable"))
    return out


def rvdp_physical_drift(p: RvdpParams, x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, (p.alpha - p.beta * x1**2) * x2 - p.gamma * x2**3 - x1], axis=-1)


def rvdp_model(p: RvdpParams = RvdpParams()) -> SdeModel:
    """Itô form of the noisy impact oscillator.

    Both components share one Wiener process unless ``p.independent_noise``,
    in which case the diffusion matrix is diagonal with two channels.
    """
    s = np.sqrt(2.0 * p.D)

    def drift(x):
        x = np.asarray(x, dtype=float)
        out = rvdp_physical_drift(p, x)
        out[..., 1] += p.D * x[..., 1]
        return out

    if p.independent_noise:
        def diffusion(x):
            x = np.asarray(x, dtype=float)
            g = np.zeros(x.shape + (2,))
            g[..., 0, 0] = s * x[..., 0]
            g[..., 1, 1] = s * x[..., 1]
            return g
        m = 2
    else:
        def diffusion(x):
            return (s * np.asarray(x, dtype=float))[..., None]
        m = 1

    return SdeModel(2, m, drift, diffusion, ImpactRule(0, 1, p.r), "rvdp", {"system": "rvdp", **asdict(p)})


def gbm_model(mu=0.05, sigma=0.2) -> SdeModel:
    """Geometric Brownian motion, used as an analytic test case."""
    return SdeModel(1, 1, lambda x: mu * np.asarray(x, dtype=float),
                    lambda x: (sigma * np.asarray(x, dtype=float))[..., None],
                    None, "gbm", {"system": "gbm", "mu": mu, "sigma": sigma})


def ou_model(theta=1.0, D=1.0, dim=1) -> SdeModel:
    """``dx = -theta x dt + sqrt(2D) dW``; stationary law ``N(0, D/theta)``."""
    s = np.sqrt(2.0 * D)
    return SdeModel(dim, dim, lambda x: -theta * np.asarray(x, dtype=float),
                    lambda x: s * np.broadcast_to(np.eye(dim), np.shape(x)[:-1] + (dim, dim)).copy(),
                    None, "ou", {"system": "ou", "theta": theta, "D": D})


def make_model(params: dict) -> SdeModel:
    """Build a benchmark model from a ``{"system": ..., **params}`` mapping."""
    params = dict(params)
    system = params.pop("system")
    if system == "grazing":
        return grazing_model(GrazingParams(**params))
    if system == "rvdp":
        return rvdp_model(RvdpParams(**params))
    if system == "gbm":
        return gbm_model(**params)
    if system == "ou":
        return ou_model(**params)
    raise ValueError(f"unknown system {system!r}")
