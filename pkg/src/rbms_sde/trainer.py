"""
Two-stage moment-matching identification with residual-driven sampling.

Training pairs are ``(node, k)``: the data moments at ``t_k`` of one grid
node are turned into sigma points (teacher forcing) and the prediction at
``t_{k+1}`` is compared with the data.  Stage one fits the drift network to
the means; stage two fits the diffusion network to the covariances with the
drift frozen.

The drift map across one data interval defaults to a single explicit Euler
step, the scheme that produced the data.  An exact (RK4) flow fitted to
Euler data converges to ``f - dt/2 Df f`` rather than ``f``; the
``integrator`` option selects either.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .errors import NonFinitePrediction, SaturatedRegion, TrainingDiverged
from .moment_pipeline import (SigmaSet, UtParams, augmented_sigma_points, flow_scheme,
                              reconstruct_moments, reconstruct_vjp)
from .rbms_sampler import (RbmsConfig, ResidualField, SampleGrid, SampleSet,
                           build_residual_field, rbms_sample)
from .sde_sim import SdeModel, SimConfig, compute_moments, simulate_ensemble
from .surrogate_net import Mlp, OptimState, backward_cached, forward_cached, init_mlp, optimizer_step

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------- data

@dataclass
class GridData:
    """Moment series of every grid node, simulated once per experiment."""

    grid: SampleGrid
    times: np.ndarray
    means: np.ndarray  # (G, L+1, n)
    covs: np.ndarray  # (G, L+1, n, n)
    noise_dim: int
    sim: SimConfig
    initial_std: float = 0.0
    _sigma_cache: dict = field(default_factory=dict, repr=False)

    @property
    def dt(self):
        return self.sim.dt

    @property
    def dim(self):
        return self.means.shape[-1]

    @property
    def steps(self):
        return self.means.shape[1] - 1

    def sigma_set(self, ut: UtParams) -> SigmaSet:
        """Augmented sigma points of the data moments at ``t_0 .. t_{L-1}`` for every node."""
        key = (ut.alpha, ut.beta, ut.lam)
        if key not in self._sigma_cache:
            self._sigma_cache[key] = augmented_sigma_points(
                self.means[:, :-1], self.covs[:, :-1], self.dt, self.noise_dim, ut)
        return self._sigma_cache[key]

    def subset(self, nodes):
        nodes = np.asarray(nodes, dtype=int)
        return self.means[nodes], self.covs[nodes]


def simulate_grid(model: SdeModel, grid: SampleGrid, sim: SimConfig, initial_std=0.0) -> GridData:
    """Ensemble moments for every grid node; node ``i`` uses noise stream ``(seed, i)``."""
    nodes = grid.nodes
    G, n, L = grid.size, model.dim, sim.steps
    means = np.empty((G, L + 1, n))
    covs = np.empty((G, L + 1, n, n))
    times = None
    for i, x0 in enumerate(nodes):
        ms = compute_moments(simulate_ensemble(model, x0, sim, stream=(i,), initial_std=initial_std))
        means[i], covs[i] = ms.means, ms.covariances
        times = ms.times
    return GridData(grid, times, means, covs, model.noise_dim, sim, float(initial_std))


# --------------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (32, 32)
    initial_sample_count: int = 20
    epochs_per_round: int = 300
    agf_iterations: int = 3000
    batch_size: int = 256
    lr_drift: float = 3e-3
    lr_diffusion: float = 3e-3
    lr_floor: float = 0.1
    gradient_clip: Optional[float] = None
    stop_threshold: Optional[float] = None
    max_rounds: int = 30
    sample_budget: Optional[int] = None
    rbms: RbmsConfig = RbmsConfig()
    ut: UtParams = UtParams()
    integrator: str = "euler"
    substeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stop_threshold is not None and not self.stop_threshold > 0:
            raise ValueError("stop_threshold must be positive")
        if self.initial_sample_count < 1:
            raise ValueError("initial_sample_count must be positive")
        flow_scheme(self.integrator)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        if "rbms" in d and isinstance(d["rbms"], dict):
            d["rbms"] = RbmsConfig(**d["rbms"])
        if "ut" in d and isinstance(d["ut"], dict):
            d["ut"] = UtParams(**d["ut"])
        return cls(**d)


@dataclass
class Surrogate:
    """Drift and diffusion networks of one identified model."""

    drift: Mlp
    diffusion: Mlp
    noise_dim: int

    @property
    def dim(self):
        return self.drift.n_in

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return self.diffusion(x).reshape(x.shape[:-1] + (self.dim, self.noise_dim))

    def as_model(self, impact=None, name="surrogate") -> SdeModel:
        return SdeModel(self.dim, self.noise_dim, self.drift, self.g, impact, name)

    def copy(self):
        return Surrogate(self.drift.copy(), self.diffusion.copy(), self.noise_dim)


def _output_scales(data: GridData, nodes):
    mu, cov = data.subset(nodes)
    dmu = np.diff(mu, axis=1) / data.dt
    drift = np.sqrt(np.mean(dmu**2, axis=(0, 1)))
    dvar = np.diagonal(np.diff(cov, axis=1), axis1=-2, axis2=-1) / data.dt
    diff = np.sqrt(np.sqrt(np.mean(np.maximum(dvar, 0.0) ** 2, axis=(0, 1))))
    drift = np.maximum(drift, 1e-3)
    diff = np.maximum(diff, 1e-3)
    return drift, np.repeat(diff, data.noise_dim)


def init_surrogate(data: GridData, nodes, cfg: TrainConfig) -> Surrogate:
    n, m = data.dim, data.noise_dim
    lo = np.array([b[0] for b in data.grid.bounds])
    hi = np.array([b[1] for b in data.grid.bounds])
    shift = 0.5 * (lo + hi)
    scale = np.where(hi > lo, 0.5 * (hi - lo), 1.0)
    s_drift, s_diff = _output_scales(data, nodes)
    drift = init_mlp([n, *cfg.hidden, n], seed=cfg.seed * 2 + 1, in_shift=shift, in_scale=scale,
                     out_scale=s_drift)
    diffusion = init_mlp([n, *cfg.hidden, n * m], seed=cfg.seed * 2 + 2, in_shift=shift,
                         in_scale=scale, out_scale=s_diff)
    return Surrogate(drift, diffusion, m)


# ------------------------------------------------------------------- training

def _pairs(data: GridData, nodes):
    nodes = np.asarray(nodes, dtype=int)
    L = data.steps
    return np.repeat(nodes, L), np.tile(np.arange(L), len(nodes))


def _state_points(n, m):
    """Indices of the distinct state sigma points and the gather map back.

    Points that only perturb the noise block share the centre's state, so the
    drift flow is evaluated on ``2n + 1`` points instead of ``2(n+m) + 1``.
    """
    d = n + m
    unique = np.r_[0, 1:n + 1, d + 1:d + n + 1]
    gather = np.zeros(2 * d + 1, dtype=int)
    gather[1:n + 1] = np.arange(1, n + 1)
    gather[d + 1:d + n + 1] = np.arange(n + 1, 2 * n + 1)
    return unique, gather


def flow_points(drift, sig, n, m, dt, substeps, sel=None, scheme="euler"):
    """Drift flow of the state part of (a selection of) sigma points."""
    unique, gather = _state_points(n, m)
    pts = sig.points if sel is None else sig.points[sel]
    return flow_scheme(scheme)[0](drift, pts[..., unique, :n], dt, substeps)[..., gather, :]


def _drift_loss_grad(net, data, sig, nodes, ks, substeps, need_grad=True, scheme="euler"):
    n, m, dt = data.dim, data.noise_dim, data.dt
    unique, gather = _state_points(n, m)
    x = sig.points[nodes, ks][:, unique, :n]
    target = data.means[nodes, ks + 1]
    B = len(nodes)
    flow, flow_tape, flow_vjp = flow_scheme(scheme)
    if need_grad:
        xn, tape = flow_tape(net, x, dt, substeps)
    else:
        xn = flow(net, x, dt, substeps)
    wm = np.zeros(len(unique))
    np.add.at(wm, gather, sig.mean_weights)
    mu_hat = np.einsum("i,bid->bd", wm, xn)
    r = target - mu_hat
    loss = float(np.sum(r * r)) / (B * dt * dt)
    if not need_grad:
        return loss, None
    dmu = -2.0 * r / (B * dt * dt)
    dx = wm[None, :, None] * dmu[:, None, :]
    grads, _ = flow_vjp(net, tape, dx, dt)
    return loss, grads


def _diffusion_loss_grad(net, data, sig, phi, nodes, ks, rows, need_grad=True):
    n, m, dt = data.dim, data.noise_dim, data.dt
    pts = sig.points[nodes, ks]
    x, w = pts[..., :n], pts[..., n:]
    B = len(nodes)
    gflat, cache = forward_cached(net, x)
    G = gflat.reshape(x.shape[:-1] + (n, m))
    xn = phi[rows] + np.einsum("bijk,bik->bij", G, w)
    prop = SigmaSet(xn, sig.mean_weights, sig.cov_weights, sig.n_aug)
    _, cov_hat = reconstruct_moments(prop)
    R = data.covs[nodes, ks + 1] - cov_hat
    loss = float(np.sum(R * R)) / (B * dt * dt)
    if not need_grad:
        return loss, None
    dcov = -2.0 * R / (B * dt * dt)
    dxn = reconstruct_vjp(prop, np.zeros((B, n)), dcov)
    dG = dxn[..., :, None] * w[..., None, :]
    grads, _ = backward_cached(net, cache, dG.reshape(gflat.shape))
    return loss, grads


def _cosine_lr(lr, it, total, floor):
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * it / max(total, 1))))


def _optimize(net, loss_grad, n_pairs, iters, lr, cfg: TrainConfig, rng):
    opt = OptimState.for_net(net, learning_rate=lr, gradient_clip=cfg.gradient_clip)
    B = min(cfg.batch_size, n_pairs)
    first = None
    above = 0
    for it in range(iters):
        batch = rng.choice(n_pairs, size=B, replace=False) if B < n_pairs else np.arange(n_pairs)
        loss, grads = loss_grad(batch, True)
        if first is None:
            first = loss
        above = above + 1 if (not np.isfinite(loss) or loss > 10.0 * first) else 0
        if above >= 50:
            raise TrainingDiverged(f"loss {loss:.3g} exceeded 10x initial {first:.3g} for 50 steps")
        optimizer_step(net, grads, opt, _cosine_lr(lr, it, iters, cfg.lr_floor))
    return opt


def _full_loss(loss_grad, n_pairs, chunk=4096, limit=4096):
    """Mean loss over all pairs, or over a fixed even stride of ``limit`` pairs."""
    sel = np.arange(n_pairs)
    if n_pairs > limit:
        sel = np.linspace(0, n_pairs - 1, limit).round().astype(int)
    total, count = 0.0, 0
    for s in range(0, len(sel), chunk):
        idx = sel[s:s + chunk]
        loss, _ = loss_grad(idx, False)
        total += loss * len(idx)
        count += len(idx)
    return total / count


def train_drift(sur: Surrogate, data: GridData, nodes, cfg: TrainConfig, iters, rng):
    """Fit the drift network to one-step mean predictions; returns (start, end) loss."""
    sig = data.sigma_set(cfg.ut)
    pn, pk = _pairs(data, nodes)

    def lg(batch, need_grad):
        return _drift_loss_grad(sur.drift, data, sig, pn[batch], pk[batch], cfg.substeps, need_grad,
                                cfg.integrator)

    start = _full_loss(lg, len(pn))
    _optimize(sur.drift, lg, len(pn), iters, cfg.lr_drift, cfg, rng)
    return start, _full_loss(lg, len(pn))


def train_diffusion(sur: Surrogate, data: GridData, nodes, cfg: TrainConfig, iters, rng):
    """Fit the diffusion network to one-step covariances with the drift frozen."""
    sig = data.sigma_set(cfg.ut)
    pn, pk = _pairs(data, nodes)
    phi = flow_points(sur.drift, sig, data.dim, data.noise_dim, data.dt, cfg.substeps, (pn, pk), cfg.integrator)

    def lg(batch, need_grad):
        return _diffusion_loss_grad(sur.diffusion, data, sig, phi, pn[batch], pk[batch], batch, need_grad)

    start = _full_loss(lg, len(pn))
    _optimize(sur.diffusion, lg, len(pn), iters, cfg.lr_diffusion, cfg, rng)
    return start, _full_loss(lg, len(pn))


def predict_all(sur: Surrogate, data: GridData, nodes=None, ut=UtParams(), substeps=1, scheme="euler",
                chunk=256):
    """Teacher-forced one-step predictions ``(mu_hat, cov_hat)`` for ``t_1..t_L``."""
    sig = data.sigma_set(ut)
    nodes = np.arange(data.grid.size) if nodes is None else np.asarray(nodes, dtype=int)
    n, m = data.dim, data.noise_dim
    mu_out = np.empty((len(nodes), data.steps, n))
    cov_out = np.empty((len(nodes), data.steps, n, n))
    with np.errstate(all="ignore"):
        for s in range(0, len(nodes), chunk):
            sel = nodes[s:s + chunk]
            pts = sig.points[sel]
            x, w = pts[..., :n], pts[..., n:]
            xn = flow_points(sur.drift, sig, n, m, data.dt, substeps, sel, scheme)
            xn = xn + np.einsum("...ij,...j->...i", sur.g(x), w)
            mu, cov = reconstruct_moments(SigmaSet(xn, sig.mean_weights, sig.cov_weights, sig.n_aug))
            mu_out[s:s + len(sel)], cov_out[s:s + len(sel)] = mu, cov
    return mu_out, cov_out


def evaluate_residuals(sur: Surrogate, data: GridData, nodes=None, ut=UtParams(), substeps=1, scheme="euler"):
    """Per-node residual ``sqrt(sum_k |mu - mu_hat|^2 + |Sigma - Sigma_hat|_F^2) / L``."""
    nodes = np.arange(data.grid.size) if nodes is None else np.asarray(nodes, dtype=int)
    mu, cov = predict_all(sur, data, nodes, ut, substeps, scheme)
    em = np.sum((data.means[nodes, 1:] - mu) ** 2, axis=(1, 2))
    ec = np.sum((data.covs[nodes, 1:] - cov) ** 2, axis=(1, 2, 3))
    with np.errstate(invalid="ignore"):
        eps = np.sqrt(em + ec) / data.steps
    bad = ~np.isfinite(eps)
    if bad.any():
        good = eps[~bad]
        eps[bad] = 10.0 * (good.max() if good.size else 1.0)
    return eps


# -------------------------------------------------------------------- metrics

def field_errors(sur: Surrogate, model: SdeModel, points):
    """Drift errors and absolute-diffusion errors at ``points``."""
    x = np.asarray(points, dtype=float)
    true_f = model.f(x)
    true_g = np.abs(model.g(x)).reshape(len(x), -1)
    with np.errstate(all="ignore"):
        ef = sur.drift(x) - true_f
        eg = np.abs(sur.diffusion(x)) - true_g
    return ef, eg, true_f, true_g


def compute_metrics(sur: Surrogate, model: SdeModel, grid: SampleGrid):
    """Pooled RMSE, RRMSE and the maximum absolute diffusion error over the grid."""
    ef, eg, tf, tg = field_errors(sur, model, grid.nodes)
    err = np.concatenate([ef.ravel(), eg.ravel()])
    ref = np.concatenate([tf.ravel(), tg.ravel()])
    rmse = float(np.sqrt(np.mean(err**2)))
    ref_rms = float(np.sqrt(np.mean(ref**2)))
    return {
        "rmse": rmse,
        "rrmse": rmse / ref_rms if ref_rms > 0 else float("inf"),
        "max_sigma_error": float(np.max(np.abs(eg))),
        "drift_rmse": float(np.sqrt(np.mean(ef**2))),
        "diffusion_rmse": float(np.sqrt(np.mean(eg**2))),
    }


def max_sigma_error(true_sigma, learned_sigma):
    """Largest absolute difference between two diffusion fields on a grid."""
    return float(np.max(np.abs(np.abs(np.asarray(true_sigma)) - np.abs(np.asarray(learned_sigma)))))


# --------------------------------------------------------------------- report

@dataclass
class TrainReport:
    mode: str
    rounds: List[dict]
    surrogate: Surrogate
    samples: Optional[SampleSet]
    threshold: Optional[float]
    stop_reason: str
    config: dict
    system: dict
    last_field: Optional[ResidualField] = None

    @property
    def final(self):
        return self.rounds[-1]

    @property
    def stop_round(self):
        """Index of the first round whose RMSE is at or below the threshold."""
        if self.threshold is None:
            return None
        for i, r in enumerate(self.rounds):
            if r["rmse"] <= self.threshold:
                return i
        return None

    def to_dict(self):
        return {
            "mode": self.mode,
            "rounds": self.rounds,
            "threshold": self.threshold,
            "stop_reason": self.stop_reason,
            "stop_round": self.stop_round,
            "n_samples": self.final["n_samples"],
            "samples": sorted(self.samples.indices) if self.samples is not None else None,
            "sample_history": [list(h) for h in self.samples.history] if self.samples is not None else None,
            "config": self.config,
            "system": self.system,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def write_curves_csv(self, path):
        with open(path, "w") as fh:
            fh.write("round,n_samples,rmse,rrmse,max_sigma_err\n")
            for r in self.rounds:
                fh.write(f"{r['round']},{r['n_samples']},{r['rmse']!r},{r['rrmse']!r},{r['max_sigma_error']!r}\n")


def _round_record(i, nodes, l1, l2, metrics, t0):
    return {"round": i, "n_samples": int(len(nodes)), "stage1_loss_start": l1[0], "stage1_loss": l1[1],
            "stage2_loss_start": l2[0], "stage2_loss": l2[1], "wall_time": time.perf_counter() - t0,
            **metrics}


def train_agf(model: SdeModel, data: GridData, cfg: TrainConfig) -> TrainReport:
    """Baseline: train on every grid node."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 1])
    nodes = np.arange(data.grid.size)
    sur = init_surrogate(data, nodes, cfg)
    l1 = train_drift(sur, data, nodes, cfg, cfg.agf_iterations, rng)
    l2 = train_diffusion(sur, data, nodes, cfg, cfg.agf_iterations, rng)
    rec = _round_record(0, nodes, l1, l2, compute_metrics(sur, model, data.grid), t0)
    return TrainReport("agf", [rec], sur, None, None, "complete", cfg.to_dict(), dict(model.params))


def adaptive_train(model: SdeModel, data: GridData, cfg: TrainConfig, threshold=None) -> TrainReport:
    """Residual-driven identification loop.

    Starts from ``initial_sample_count`` random nodes, then alternates
    training rounds with RBMS augmentation until the RMSE reaches
    ``threshold`` (or ``cfg.stop_threshold``), the sample budget is spent,
    ``max_rounds`` is hit, or every peak neighbourhood is saturated.
    """
    t0 = time.perf_counter()
    threshold = cfg.stop_threshold if threshold is None else threshold
    grid = data.grid
    budget = min(cfg.sample_budget or grid.size, grid.size)
    rng = np.random.default_rng([cfg.seed, 2])
    init = rng.choice(grid.size, size=min(cfg.initial_sample_count, budget), replace=False)
    samples = SampleSet.from_indices(sorted(int(i) for i in init))
    sur = init_surrogate(data, samples.sorted(), cfg)
    rbms = cfg.rbms
    widened = False
    rounds, stop, field_ = [], "max_rounds", None
    mode = "rbms1" if rbms.variant == "I" else "rbms2"
    for i in range(cfg.max_rounds):
        nodes = samples.sorted()
        l1 = train_drift(sur, data, nodes, cfg, cfg.epochs_per_round, rng)
        l2 = train_diffusion(sur, data, nodes, cfg, cfg.epochs_per_round, rng)
        rounds.append(_round_record(i, nodes, l1, l2, compute_metrics(sur, model, grid), t0))
        log.info("%s round %d: %d samples, rmse %.4g", mode, i, len(nodes), rounds[-1]["rmse"])
        if threshold is not None and rounds[-1]["rmse"] <= threshold:
            stop = "threshold"
            break
        if len(samples) >= budget:
            stop = "budget"
            break
        if i == cfg.max_rounds - 1:
            break
        eps = evaluate_residuals(sur, data, ut=cfg.ut, substeps=cfg.substeps, scheme=cfg.integrator)
        field_ = build_residual_field(grid, eps, rbms.smooth, rbms.smooth_sigma)
        try:
            new = rbms_sample(field_, samples, rbms)
        except SaturatedRegion:
            if widened:
                stop = "saturated"
                break
            widened = True
            rbms = replace(rbms, r=rbms.r + 2)
            try:
                new = rbms_sample(field_, samples, rbms)
            except SaturatedRegion:
                stop = "saturated"
                break
        added = list(new.history[-1])[: budget - len(samples)]
        samples = samples.add(added)
    return TrainReport(mode, rounds, sur, samples, threshold, stop, cfg.to_dict(), dict(model.params), field_)


def identify(model: SdeModel, data: GridData, cfg: TrainConfig, mode="rbms2", threshold=None) -> TrainReport:
    if mode == "agf":
        return train_agf(model, data, cfg)
    variant = {"rbms1": "I", "rbms2": "II"}[mode]
    return adaptive_train(model, data, replace(cfg, rbms=replace(cfg.rbms, variant=variant)), threshold)


# ----------------------------------------------------------------- robustness

def moment_inflation(clean: GridData, noisy: GridData):
    """Mean relative change of the final mean and covariance across nodes."""
    mu_c, mu_n = clean.means[:, -1], noisy.means[:, -1]
    cov_c, cov_n = clean.covs[:, -1], noisy.covs[:, -1]
    dmu = np.linalg.norm(mu_n - mu_c, axis=-1) / np.linalg.norm(mu_c, axis=-1)
    dcov = np.linalg.norm(cov_n - cov_c, axis=(-2, -1)) / np.linalg.norm(cov_c, axis=(-2, -1))
    return float(np.mean(dmu)), float(np.mean(dcov))


def robustness_experiment(model: SdeModel, grid: SampleGrid, sim: SimConfig, cfg: TrainConfig,
                          perturbation_std, repetitions=10, clean: GridData = None):
    """Paired AGF / RBMS-II runs on data with perturbed initial values.

    Each repetition re-simulates the grid with its own seed and initial
    perturbation ``N(0, std^2 I)``.  Returns a list of per-repetition dicts.
    """
    if perturbation_std < 0:
        raise ValueError("perturbation_std must be non-negative")
    out = []
    for rep in range(repetitions):
        s = replace(sim, seed=sim.seed + 1000 * rep)
        c = replace(cfg, seed=cfg.seed + rep)
        noisy = simulate_grid(model, grid, s, initial_std=perturbation_std)
        ref = clean if clean is not None else simulate_grid(model, grid, s)
        dmu, dcov = moment_inflation(ref, noisy)
        agf = train_agf(model, noisy, c)
        rb = identify(model, noisy, c, "rbms2", threshold=agf.final["rmse"])
        out.append({"repetition": rep, "mean_change": dmu, "cov_change": dcov,
                    "agf": {k: agf.final[k] for k in ("rmse", "rrmse", "max_sigma_error", "n_samples")},
                    "rbms": {k: rb.final[k] for k in ("rmse", "rrmse", "max_sigma_error", "n_samples")},
                    "rbms_stop": rb.stop_reason})
    return out
