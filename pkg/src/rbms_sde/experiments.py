"""
Reusable end-to-end pipelines shared by the CLI and the acceptance tests.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .bench_systems import GrazingParams, RvdpParams, grazing_equilibria, grazing_model, rvdp_model
from .dynamics_analysis import (EscapeProblem, escape_probability_analytic, escape_probability_fd,
                                escape_probability_monte_carlo, p_bifurcation_diagnostic,
                                steady_state_density)
from .rbms_sampler import SampleGrid
from .sde_sim import SdeModel, SimConfig
from .trainer import TrainConfig, simulate_grid, train_agf


def escape_lower_boundary(p: GrazingParams):
    """Unstable equilibrium separating the two basins of the grazing drift."""
    unstable = [x for x, kind in grazing_equilibria(p) if kind == "unstable"]
    if not unstable:
        raise ValueError("grazing drift has no unstable equilibrium for these parameters")
    return float(unstable[0])


def escape_query(lower, upper, n_query):
    return np.linspace(lower, upper, n_query + 2)[1:-1]


def escape_comparison(model: SdeModel, lower, upper, n_query=15, surrogate: SdeModel = None,
                      n_traj=0, max_time=100.0, dt=5e-3, seed=0):
    """Escape curves of a model by quadrature, finite differences and optionally Monte Carlo.

    A surrogate model, when given, is evaluated by quadrature on the same
    query points.
    """
    q = escape_query(lower, upper, n_query)
    prob = EscapeProblem.from_model(model, lower, upper, q)
    out = {"x": q, "analytic": escape_probability_analytic(prob), "fd": escape_probability_fd(prob)}
    if surrogate is not None:
        out["surrogate"] = escape_probability_analytic(EscapeProblem.from_model(surrogate, lower, upper, q))
    if n_traj:
        mc = escape_probability_monte_carlo(prob, n_traj, max_time, dt, seed)
        out["mc"], out["mc_se"] = mc.estimate, mc.stderr
    return out


def escape_surface(base: GrazingParams, param, values, upper, n_query):
    """Analytic escape probability over ``x`` and one swept parameter.

    Each parameter value has its own lower boundary, so rows are returned with
    their own ``x`` grids.
    """
    rows = []
    for v in values:
        p = replace(base, **{param: float(v)})
        lo = escape_lower_boundary(p)
        q = escape_query(lo, upper, n_query)
        pe = escape_probability_analytic(EscapeProblem.from_model(grazing_model(p), lo, upper, q))
        rows += [(float(v), float(x), float(y)) for x, y in zip(q, pe)]
    return rows


def train_sweep_surrogate(p: RvdpParams, grid: SampleGrid, sim: SimConfig, cfg: TrainConfig) -> SdeModel:
    """AGF surrogate of the smooth part of the oscillator with the known impact rule attached."""
    model = rvdp_model(p)
    data = simulate_grid(model.without_impact(), grid, sim)
    report = train_agf(model, data, cfg)
    return report.surrogate.as_model(impact=model.impact, name=f"surrogate(D={p.D})")


def density_for(model: SdeModel, spec: dict, seed=0):
    return steady_state_density(model, spec["x0"], spec["burn_in"], spec["total_time"], spec["bounds"],
                                spec["shape"], dt=spec["dt"], n_traj=spec["n_traj"], seed=seed)


def bifurcation_sweep(base: RvdpParams, D_values, density_spec: dict, train_grid: SampleGrid = None,
                      sim: SimConfig = None, cfg: TrainConfig = None, seed=0, keep_densities=False):
    """Radial shape statistic of the stationary density for each noise level.

    With ``train_grid`` a surrogate is identified per noise level and its
    density is diagnosed alongside the true one.
    """
    rows, dens = [], {}
    thr = density_spec.get("r_threshold_cells", 2.0)
    for D in D_values:
        p = replace(base, D=float(D))
        true_d = density_for(rvdp_model(p), density_spec, seed)
        row = {"D": float(D), **{f"{k}_true": v for k, v in p_bifurcation_diagnostic(true_d, thr).items()}}
        if keep_densities:
            dens[("true", float(D))] = true_d
        if train_grid is not None:
            sur = train_sweep_surrogate(p, train_grid, sim, cfg)
            sur_d = density_for(sur, density_spec, seed)
            row.update({f"{k}_surrogate": v for k, v in p_bifurcation_diagnostic(sur_d, thr).items()})
            if keep_densities:
                dens[("surrogate", float(D))] = sur_d
        rows.append(row)
    return (rows, dens) if keep_densities else rows


def is_collapse_sequence(r_stars, shapes):
    """Non-increasing ``r*`` whose classes switch once from ring to point."""
    r = np.asarray(r_stars, dtype=float)
    shapes = list(shapes)
    if not shapes or shapes[0] != "ring" or shapes[-1] != "point":
        return False
    switch = shapes.index("point")
    return bool(np.all(np.diff(r) <= 0)) and all(s == "point" for s in shapes[switch:])
