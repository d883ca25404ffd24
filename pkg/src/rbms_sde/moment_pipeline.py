"""
Unscented-transform moment propagation through surrogate dynamics.

The state is augmented with the Wiener increment ``w ~ (0, dt I_m)``; each
sigma point ``[x; w]`` maps to ``Phi(x) + G(x) w`` where ``Phi`` is the flow
of the drift over one data interval (classical RK4 by default, or explicit
Euler to mirror data produced by an Euler scheme at the same step) and ``G``
the diffusion matrix.

All functions accept leading batch dimensions: a mean of shape ``(..., d)``
and covariance ``(..., d, d)`` give sigma points ``(..., 2d+1, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinitePrediction, SingularCovariance
from .surrogate_net import Mlp, backward_cached, forward_cached

DEFAULT_SUBSTEPS = 5


@dataclass(frozen=True)
class UtParams:
    alpha: float = 1e-3
    beta: float = 2.0
    lam: float = 1.0

    def check(self, n_aug):
        if not n_aug + self.lam > 0:
            raise ValueError("n_aug + lambda must be positive")

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "lam": self.lam}


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray  # (..., 2*n_aug+1, d)
    mean_weights: np.ndarray
    cov_weights: np.ndarray
    n_aug: int


def ut_weights(n_aug, params=UtParams()):
    """Mean and covariance weights of the standard unscented transform."""
    params.check(n_aug)
    lam = params.lam
    wm = np.full(2 * n_aug + 1, 1.0 / (2.0 * (n_aug + lam)))
    wc = wm.copy()
    wm[0] = lam / (n_aug + lam)
    wc[0] = wm[0] + (1.0 - params.alpha**2 + params.beta)
    return wm, wc


def _jitter(cov):
    tr = np.trace(cov, axis1=-2, axis2=-1)
    eps = np.where(tr > 0, 1e-9 * tr, 1e-9)
    return eps[..., None, None] * np.eye(cov.shape[-1])


def safe_cholesky(cov):
    """Batched lower Cholesky factor; jitter ``1e-9 * trace`` is added only
    to matrices that are not positive definite."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    flat = cov.reshape((-1,) + cov.shape[-2:]).copy()
    out = np.empty_like(flat)
    ok = np.zeros(len(flat), dtype=bool)
    # batched retry on everything, then fall back to per-matrix handling
    eig_min = np.linalg.eigvalsh(flat)[:, 0]
    scale = np.maximum(np.abs(np.trace(flat, axis1=-2, axis2=-1)), 1e-300)
    suspect = eig_min <= 1e-12 * scale
    flat[suspect] += _jitter(flat[suspect])
    try:
        return np.linalg.cholesky(flat).reshape(cov.shape)
    except np.linalg.LinAlgError:
        pass
    for i, c in enumerate(flat):
        for attempt in range(2):
            try:
                out[i] = np.linalg.cholesky(c)
                ok[i] = True
                break
            except np.linalg.LinAlgError:
                c = c + _jitter(c)
        if not ok[i]:
            raise SingularCovariance(f"covariance {i} is not factorizable after jitter")
    return out.reshape(cov.shape)


def sigma_points(mean, cov, params: UtParams = UtParams()) -> SigmaSet:
    """Sigma points ``m, m + col_i(chol((d + lam) cov)), m - col_i(...)``."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[-1]
    if cov.shape[-2:] != (d, d):
        raise ValueError("covariance shape does not match mean")
    wm, wc = ut_weights(d, params)
    S = safe_cholesky(0.5 * (cov + np.swapaxes(cov, -1, -2))) * np.sqrt(d + params.lam)
    cols = np.swapaxes(S, -1, -2)  # row i = column i of S
    m = mean[..., None, :]
    pts = np.concatenate([m, m + cols, m - cols], axis=-2)
    return SigmaSet(pts, wm, wc, d)


def reconstruct_moments(sigma: SigmaSet):
    """Weighted mean and symmetrized weighted outer-product covariance."""
    x = sigma.points
    mu = np.einsum("i,...id->...d", sigma.mean_weights, x)
    dev = x - mu[..., None, :]
    cov = np.einsum("i,...ij,...ik->...jk", sigma.cov_weights, dev, dev)
    return mu, 0.5 * (cov + np.swapaxes(cov, -1, -2))


def reconstruct_vjp(sigma: SigmaSet, d_mean, d_cov):
    """Gradient with respect to the points of ``<d_mean, mu> + <d_cov, Sigma>``."""
    x = sigma.points
    wm, wc = sigma.mean_weights, sigma.cov_weights
    mu = np.einsum("i,...id->...d", wm, x)
    dev = x - mu[..., None, :]
    S = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    Sdev = np.einsum("...jk,...ik->...ij", S, dev)  # S @ dev_i
    through_mean = d_mean - 2.0 * np.einsum("i,...ij->...j", wc, Sdev)
    return wm[:, None] * through_mean[..., None, :] + 2.0 * wc[:, None] * Sdev


# ------------------------------------------------------------------ dynamics

def rk4_flow(f, x, dt, substeps=DEFAULT_SUBSTEPS):
    """Integrate ``dz/dt = f(z)`` over ``dt`` with classical RK4."""
    h = dt / substeps
    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def rk4_flow_tape(net: Mlp, x, dt, substeps=DEFAULT_SUBSTEPS):
    """RK4 flow of an ``Mlp`` vector field that keeps the tapes for ``rk4_flow_vjp``."""
    h = dt / substeps
    tape = []
    for _ in range(substeps):
        k1, c1 = forward_cached(net, x)
        k2, c2 = forward_cached(net, x + 0.5 * h * k1)
        k3, c3 = forward_cached(net, x + 0.5 * h * k2)
        k4, c4 = forward_cached(net, x + h * k3)
        tape.append((c1, c2, c3, c4))
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x, tape


def rk4_flow_vjp(net: Mlp, tape, cotangent, dt):
    """Reverse pass of ``rk4_flow_tape``: returns ``(param_grads, input_grad)``."""
    h = dt / len(tape)
    g = np.asarray(cotangent, dtype=float)
    total = None

    def acc(pg):
        nonlocal total
        if total is None:
            total = [p.copy() for p in pg]
        else:
            for t, p in zip(total, pg):
                t += p

    for c1, c2, c3, c4 in reversed(tape):
        gx = g.copy()
        gk1, gk2, gk3, gk4 = (h / 6.0) * g, (h / 3.0) * g, (h / 3.0) * g, (h / 6.0) * g
        pg, gin = backward_cached(net, c4, gk4)
        acc(pg)
        gx += gin
        gk3 = gk3 + h * gin
        pg, gin = backward_cached(net, c3, gk3)
        acc(pg)
        gx += gin
        gk2 = gk2 + 0.5 * h * gin
        pg, gin = backward_cached(net, c2, gk2)
        acc(pg)
        gx += gin
        gk1 = gk1 + 0.5 * h * gin
        pg, gin = backward_cached(net, c1, gk1)
        acc(pg)
        gx += gin
        g = gx
    return total, g


def euler_flow(f, x, dt, substeps=1):
    """Integrate ``dz/dt = f(z)`` over ``dt`` with explicit Euler steps."""
    h = dt / substeps
    for _ in range(substeps):
        x = x + h * f(x)
    return x


def euler_flow_tape(net: Mlp, x, dt, substeps=1):
    h = dt / substeps
    tape = []
    for _ in range(substeps):
        k, c = forward_cached(net, x)
        tape.append(c)
        x = x + h * k
    return x, tape


def euler_flow_vjp(net: Mlp, tape, cotangent, dt):
    """Reverse pass of ``euler_flow_tape``: returns ``(param_grads, input_grad)``."""
    h = dt / len(tape)
    g = np.asarray(cotangent, dtype=float)
    total = None
    for c in reversed(tape):
        pg, gin = backward_cached(net, c, h * g)
        total = [p.copy() for p in pg] if total is None else [t + p for t, p in zip(total, pg)]
        g = g + gin
    return total, g


# scheme name -> (flow, flow with tape, reverse pass)
FLOWS = {
    "rk4": (rk4_flow, rk4_flow_tape, rk4_flow_vjp),
    "euler": (euler_flow, euler_flow_tape, euler_flow_vjp),
}


def flow_scheme(name):
    try:
        return FLOWS[name]
    except KeyError:
        raise ValueError(f"unknown integrator {name!r}; expected one of {sorted(FLOWS)}") from None


def diffusion_matrix(diffusion, x, n, m):
    """Evaluate a diffusion field and reshape it to ``(..., n, m)``."""
    return np.asarray(diffusion(x), dtype=float).reshape(x.shape[:-1] + (n, m))


def propagate_sigma(drift, diffusion, sigma: SigmaSet, dt, n=None, substeps=DEFAULT_SUBSTEPS,
                    scheme="rk4") -> SigmaSet:
    """Map augmented points ``[x; w]`` to ``Phi(x) + G(x) w``.

    ``drift`` and ``diffusion`` are callables (an ``Mlp`` or the fields of an
    ``SdeModel``); ``diffusion`` may return ``(..., n*m)`` or ``(..., n, m)``.
    ``n`` is the state dimension; the remaining coordinates are the noise block.
    """
    flow = flow_scheme(scheme)[0]
    pts = sigma.points
    n = pts.shape[-1] if n is None else n
    m = pts.shape[-1] - n
    x, w = pts[..., :n], pts[..., n:]
    with np.errstate(all="ignore"):
        out = flow(drift, x, dt, substeps) if dt > 0 else x.copy()
        if m > 0 and diffusion is not None:
            out = out + np.einsum("...ij,...j->...i", diffusion_matrix(diffusion, x, n, m), w)
    if not np.all(np.isfinite(out)):
        raise NonFinitePrediction("propagated sigma point is not finite")
    return SigmaSet(out, sigma.mean_weights, sigma.cov_weights, sigma.n_aug)


def augmented_sigma_points(mean, cov, dt, noise_dim, params: UtParams = UtParams()) -> SigmaSet:
    """Sigma points of ``[x; w]`` with ``w ~ (0, dt I_m)`` independent of ``x``."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[-1]
    lead = mean.shape[:-1]
    d = n + noise_dim
    m_aug = np.concatenate([mean, np.zeros(lead + (noise_dim,))], axis=-1)
    c_aug = np.zeros(lead + (d, d))
    c_aug[..., :n, :n] = cov
    c_aug[..., n:, n:] = dt * np.eye(noise_dim)
    return sigma_points(m_aug, c_aug, params)


def predict_one_step(drift, diffusion, mean, cov, dt, params: UtParams = UtParams(),
                     noise_dim=1, substeps=DEFAULT_SUBSTEPS, scheme="rk4"):
    """Predicted ``(mean, cov)`` one data interval ahead."""
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[-1]
    sig = augmented_sigma_points(mean, cov, dt, noise_dim, params)
    return reconstruct_moments(propagate_sigma(drift, diffusion, sig, dt, n, substeps, scheme))
