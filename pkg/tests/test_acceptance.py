"""
End-to-end acceptance checks at full scale.

Each test prints one ``PASS``/``FAIL`` line through the terminal reporter
and a summary table is written when the module finishes.  The whole module
takes roughly half an hour on one core; deselect it with
``-m "not acceptance"``.
"""
import json
import os

import numpy as np
import pytest

from rbms_sde import cli
from rbms_sde.bench_systems import GrazingParams, gbm_model, grazing_model
from rbms_sde.config import ExperimentConfig, default_config
from rbms_sde.experiments import bifurcation_sweep, escape_comparison, escape_lower_boundary, is_collapse_sequence
from rbms_sde.moment_pipeline import SigmaSet, reconstruct_moments, sigma_points
from rbms_sde.rbms_sampler import (RbmsConfig, SampleGrid, SampleSet, build_residual_field, find_peaks,
                                   rbms_i_sample, rbms_sample)
from rbms_sde.errors import SaturatedRegion
from rbms_sde.sde_sim import SimConfig, compute_moments, simulate_ensemble
from rbms_sde.surrogate_net import backward, forward, init_mlp
from rbms_sde.trainer import identify, robustness_experiment, simulate_grid, train_agf

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
RESULTS = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is None or not RESULTS:
        return
    tr.write_line("")
    tr.write_sep("=", "acceptance summary")
    for k in sorted(RESULTS):
        ok, name, detail = RESULTS[k]
        tr.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def verdict(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(k, name, ok, detail):
        RESULTS[k] = (bool(ok), name, detail)
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        assert ok, line
    return emit


def nodes_to_threshold(report):
    return report.final["n_samples"] if report.stop_reason == "threshold" else np.inf


def run_system(system, seed, modes):
    cfg = default_config(system, seed=seed)
    model, tc = cfg.model(), cfg.train_config()
    data = simulate_grid(model, cfg.sample_grid(), cfg.sim_config())
    agf = train_agf(model, data, tc)
    out = {"agf": agf}
    for mode in modes:
        out[mode] = identify(model, data, tc, mode, threshold=agf.final["rmse"])
    return out


@pytest.fixture(scope="module")
def grazing_runs():
    return [run_system("grazing", s, ["rbms2"]) for s in SEEDS]


@pytest.fixture(scope="module")
def rvdp_runs():
    return [run_system("rvdp", s, ["rbms2", "rbms1"]) for s in SEEDS]


class TestSampleEfficiency:
    def test_grazing(self, grazing_runs, verdict):
        n = [nodes_to_threshold(r["rbms2"]) for r in grazing_runs]
        med = float(np.median(n))
        verdict(1, "grazing RBMS-II nodes to AGF RMSE", med <= 0.3 * 1600,
                f"median {med:g} <= 480 (per seed {n})")

    def test_rvdp(self, rvdp_runs, verdict):
        two = [nodes_to_threshold(r["rbms2"]) for r in rvdp_runs]
        one = [nodes_to_threshold(r["rbms1"]) for r in rvdp_runs]
        med = float(np.median(two))
        wins = sum(a <= b for a, b in zip(two, one))
        verdict(2, "RVDP RBMS-II nodes to AGF RMSE", med <= 0.4 * 1600 and wins >= 4,
                f"median {med:g} <= 640, II <= I in {wins}/5 seeds (II {two}, I {one})")


def spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + 0.1 * np.eye(d)


def test_unscented_transform(verdict):
    rng = np.random.default_rng(3)
    affine, trip = 0.0, 0.0
    for _ in range(200):
        d, k = rng.integers(1, 7), rng.integers(1, 6)
        m, P = rng.normal(size=d), spd(rng, d)
        A, b = rng.normal(size=(k, d)), rng.normal(size=k)
        s = sigma_points(m, P)
        mu, cov = reconstruct_moments(s)
        trip = max(trip, np.abs(mu - m).max() / (np.abs(m).max() + 1), np.abs(cov - P).max() / np.abs(P).max())
        mu2, cov2 = reconstruct_moments(SigmaSet(s.points @ A.T + b, s.mean_weights, s.cov_weights, s.n_aug))
        ref = A @ P @ A.T
        affine = max(affine, np.abs(mu2 - A @ m - b).max() / (np.abs(A @ m + b).max() + 1),
                     np.abs(cov2 - ref).max() / np.abs(ref).max())
    h = sigma_points(np.array([0.0]), np.array([[1.0]]))
    hand = (np.allclose(h.points[:, 0], [0.0, np.sqrt(2), -np.sqrt(2)], rtol=0, atol=1e-15)
            and np.allclose(h.mean_weights, [0.5, 0.25, 0.25], rtol=0, atol=1e-15))
    verdict(3, "unscented transform", affine < 1e-8 and trip < 1e-10 and hand,
            f"affine {affine:.1e} < 1e-8, round trip {trip:.1e} < 1e-10, hand example {hand}")


def test_simulator_weak_accuracy(verdict):
    mu, s = 0.05, 0.2
    cfg = SimConfig(dt=0.01, steps=25, ensemble_size=100_000, seed=7)
    ens = simulate_ensemble(gbm_model(mu, s), [1.0], cfg)
    ms = compute_moments(ens)
    t = ms.times
    x = ens.states[:, :, 0]
    z_mean = np.abs(ms.means[:, 0] - np.exp(mu * t))[1:] / (x.std(axis=0)[1:] / np.sqrt(cfg.ensemble_size))
    var = np.exp(2 * mu * t) * (np.exp(s * s * t) - 1)
    se_var = np.sqrt(np.var((x - x.mean(0)) ** 2, axis=0) / cfg.ensemble_size)
    z_var = np.abs(ms.covariances[1:, 0, 0] - var[1:]) / se_var[1:]
    worst = max(z_mean.max(), z_var.max())
    verdict(4, "GBM weak accuracy", worst <= 3, f"worst deviation {worst:.2f} standard errors <= 3")


def fd_grads(net, z, cot, h=1e-5):
    def value():
        return float(np.sum(forward(net, z) * cot))

    out = []
    for p in net.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = value()
            p[idx] = old - h
            g[idx] = (up - value()) / (2 * h)
            p[idx] = old
        out.append(g)
    gz = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        gz[i] = (np.sum(forward(net, z + e) * cot) - np.sum(forward(net, z - e) * cot)) / (2 * h)
    return out + [gz]


def test_gradient_checks(verdict):
    rng = np.random.default_rng(99)
    worst = 0.0
    for trial in range(100):
        n_in, n_out = rng.integers(1, 4), rng.integers(1, 4)
        sizes = [n_in, *rng.integers(2, 9, size=rng.integers(1, 3)), n_out]
        net = init_mlp(sizes, seed=1000 + trial, in_shift=rng.normal(size=n_in),
                       in_scale=rng.uniform(0.5, 2, n_in), out_scale=rng.uniform(0.5, 2, n_out))
        z, cot = rng.normal(size=n_in), rng.normal(size=n_out)
        pg, gz = backward(net, z, cot)
        a = np.concatenate([g.ravel() for g in pg + [gz]])
        b = np.concatenate([g.ravel() for g in fd_grads(net, z, cot)])
        worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
    verdict(5, "finite-difference gradient checks", worst < 1e-4, f"max relative error {worst:.1e} < 1e-4 over 100")


def chebyshev(grid, i, j):
    return int(np.max(np.abs(np.array(grid.multi_index(i)) - np.array(grid.multi_index(j)))))


def test_rbms_properties(verdict):
    rng = np.random.default_rng(17)
    grid = SampleGrid(((0, 1), (0, 1)), (12, 10))
    failures = []
    for case in range(200):
        variant, r = ("I", "II")[case % 2], int(rng.integers(1, 5))
        eps = rng.random(grid.size) ** 3
        start = SampleSet.from_indices(rng.choice(grid.size, 10, replace=False))
        cfg = RbmsConfig(variant, m=3, n=2, r=r)
        field = build_residual_field(grid, eps)
        try:
            out = rbms_sample(field, start, cfg)
        except SaturatedRegion:
            continue
        added = out.history[-1]
        peaks = find_peaks(field)
        scaled = rbms_sample(build_residual_field(grid, eps * 10 ** rng.uniform(-3, 3)), start, cfg)
        if not (start.indices <= out.indices and len(out) == len(start) + len(set(added))
                and len(set(added)) == len(added)
                and all(min(chebyshev(grid, a, p) for p in peaks) <= r for a in added)
                and scaled.history[-1] == added):
            failures.append(case)
    # two constructed modes, m=7, n=2, r=5
    g2 = SampleGrid(((0.0, 1.0), (0.0, 1.0)), (30, 30))
    ii, jj = np.meshgrid(np.arange(30), np.arange(30), indexing="ij")
    eps = sum(w * np.exp(-((ii - a) ** 2 + (jj - b) ** 2) / 12.5) for (a, b), w in (((7, 8), 1.0), ((21, 22), 0.8)))
    field = build_residual_field(g2, eps.ravel())
    added = rbms_i_sample(field, SampleSet.from_indices([0, 899]), RbmsConfig("I", m=7, n=2, r=5)).history[-1]
    near = [min(chebyshev(g2, a, g2.flat_index(c)) for c in ((7, 8), (21, 22))) for a in added]
    two_mode = len(added) == 14 and len(set(added)) == 14 and max(near) <= 5
    verdict(6, "RBMS unit properties", not failures and two_mode,
            f"{200 - len(failures)}/200 random cases hold, two-mode field adds {len(set(added))} nodes")


def test_escape_probability(grazing_runs, verdict):
    p = GrazingParams()
    lo = escape_lower_boundary(p)
    sur = grazing_runs[0]["rbms2"].surrogate.as_model()
    res = escape_comparison(grazing_model(p), lo, 9.9, 15, surrogate=sur, n_traj=10_000, max_time=100.0,
                            dt=5e-3, seed=0)
    fd = np.abs(res["fd"] - res["analytic"]).max()
    mc = np.abs(res["mc"] - res["analytic"]).max()
    su = np.abs(res["surrogate"] - res["analytic"]).max()
    verdict(7, "escape probability", fd < 1e-4 and mc < 0.03 and su < 0.05,
            f"FD {fd:.1e} < 1e-4, MC {mc:.3f} < 0.03, surrogate {su:.3f} < 0.05")


def test_p_bifurcation(verdict):
    cfg = default_config("rvdp", seed=0)
    spec = cfg.analysis
    b = spec["bifurcation"]
    train_grid = SampleGrid(tuple(tuple(x) for x in b["train_grid"]["bounds"]), tuple(b["train_grid"]["shape"]))
    sim = SimConfig(**{**cfg.sim, "seed": cfg.seed, "ensemble_size": b["ensemble_size"]})
    rows = bifurcation_sweep(cfg.rvdp_params(), b["D_values"], spec["density"], train_grid, sim,
                             cfg.train_config(), cfg.seed)
    true = is_collapse_sequence([r["r_star_true"] for r in rows], [r["shape_true"] for r in rows])
    sur = is_collapse_sequence([r["r_star_surrogate"] for r in rows], [r["shape_surrogate"] for r in rows])
    same = [r["shape_true"] for r in rows] == [r["shape_surrogate"] for r in rows]
    table = ", ".join(f"D={r['D']:g}: true {r['r_star_true']:.3f} {r['shape_true']} / surrogate "
                      f"{r['r_star_surrogate']:.3f} {r['shape_surrogate']}" for r in rows)
    verdict(8, "P-bifurcation", true and sur and same, table)


def test_robustness(verdict):
    cfg = default_config("rvdp", seed=0)
    runs = robustness_experiment(cfg.model(), cfg.sample_grid(), cfg.sim_config(), cfg.train_config(),
                                 cfg.robustness["perturbation_std"], cfg.robustness["repetitions"])
    ratios = [r["cov_change"] / r["mean_change"] for r in runs]
    metrics = ("rmse", "rrmse", "max_sigma_error")
    better = sum(all(r["rbms"][k] <= r["agf"][k] for k in metrics) for r in runs)
    per_metric = {k: sum(r["rbms"][k] <= r["agf"][k] for r in runs) for k in metrics}
    verdict(9, "robustness to perturbed initial values", min(ratios) > 5 and better >= 7,
            f"min inflation ratio {min(ratios):.1f} > 5, RBMS-II <= AGF on all metrics in {better}/10 "
            f"(per metric {per_metric}, RBMS-II nodes {[r['rbms']['n_samples'] for r in runs]}, "
            f"stops {[r['rbms_stop'] for r in runs]})")


def small_config(system, out):
    d = default_config(system, str(out), 3).to_dict()
    d["sim"].update(ensemble_size=200, steps=10)
    d["train"].update(agf_iterations=200, epochs_per_round=50, max_rounds=4, initial_sample_count=5)
    d["robustness"]["repetitions"] = 2
    if system == "grazing":
        d["grid"]["shape"] = [60]
        d["analysis"]["escape"].update(n_traj=500, max_time=50.0)
    else:
        d["grid"]["shape"] = [6, 6]
        d["analysis"]["density"].update(shape=[12, 24], burn_in=1.0, total_time=5.0, n_traj=20, dt=0.01)
        d["analysis"]["bifurcation"].update(D_values=[0.01, 0.1], ensemble_size=50,
                                            train_grid={"bounds": [[0.0, 2.5], [-2.5, 2.5]], "shape": [6, 6]})
    return ExperimentConfig.from_dict(d)


def test_determinism(tmp_path, verdict):
    commands = (["simulate"], ["train", "--mode", "agf"], ["train", "--mode", "rbms1"],
                ["train", "--mode", "rbms2"], ["analyze"], ["robustness"])
    diffs, codes, compared = [], [], 0
    for system in ("grazing", "rvdp"):
        hashes = []
        for run in ("a", "b"):
            cfg = small_config(system, tmp_path / system / run / "out")
            path = str(tmp_path / system / run / "cfg.json")
            os.makedirs(os.path.dirname(path))
            cfg.save(path)
            codes += [cli.main(argv + ["--config", path]) for argv in commands]
            h = {}
            for sub in sorted(os.listdir(cfg.output_dir)):
                with open(os.path.join(cfg.output_dir, sub, cli.MANIFEST)) as fh:
                    files = json.load(fh)["files"]
                # config.json records its own output directory
                h.update({f"{sub}/{k}": v["sha256"] for k, v in files.items()
                          if not v["volatile"] and k != "config.json"})
            hashes.append(h)
        compared += len(hashes[0])
        diffs += [f"{system}:{k}" for k in hashes[0] if hashes[0][k] != hashes[1].get(k)]
        diffs += [f"{system}:{k}" for k in set(hashes[1]) - set(hashes[0])]
    ok = not diffs and all(c == 0 for c in codes) and compared > 0
    verdict(10, "determinism", ok, f"{compared} artifacts hash-identical across reruns, "
            f"mismatches {diffs or 'none'}, exit codes {sorted(set(codes))}")
