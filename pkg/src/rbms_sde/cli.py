"""
Command-line entry point.

    rbms-sde simulate   --config exp.json
    rbms-sde train      --config exp.json --mode rbms2
    rbms-sde analyze    --config exp.json [--checkpoint weights.json]
    rbms-sde robustness --config exp.json
    rbms-sde report     --config exp.json

Exit codes: 0 success, 1 validation or IO error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import svgplot
from .bench_systems import GrazingParams
from .config import ExperimentConfig, default_config
from .errors import ConfigError, RbmsError
from .experiments import (bifurcation_sweep, escape_comparison, escape_lower_boundary, escape_surface)
from .rbms_sampler import SampleGrid, write_field_csv, write_samples_csv
from .sde_sim import MomentSeries, read_moments_csv, write_moments_csv
from .surrogate_net import load_checkpoint, save_checkpoint
from .trainer import (GridData, Surrogate, TrainReport, compute_metrics, identify, robustness_experiment,
                      simulate_grid)

log = logging.getLogger("rbms_sde")

MANIFEST = "manifest.json"
VOLATILE = ("timings.json",)


class DataMissing(ConfigError):
    pass


# ------------------------------------------------------------------ manifest

def sha256_of(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, files, extra=None):
    """Hash ``files`` (paths relative to ``directory``) into ``manifest.json``.

    Returns the relative paths whose hashes differ from a previous manifest.
    """
    path = os.path.join(directory, MANIFEST)
    old = {}
    if os.path.exists(path):
        with open(path) as fh:
            old = json.load(fh).get("files", {})
    entries = {}
    for rel in sorted(files):
        entries[rel] = {"sha256": sha256_of(os.path.join(directory, rel)),
                        "volatile": os.path.basename(rel) in VOLATILE}
    changed = [r for r, e in entries.items()
               if r in old and not e["volatile"] and old[r]["sha256"] != e["sha256"]]
    doc = {"files": entries, **(extra or {})}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    for r in changed:
        log.warning("artifact %s changed since the previous run", r)
    return changed


def verify_manifest(directory):
    """Relative paths whose current hash disagrees with the manifest (volatile files skipped)."""
    with open(os.path.join(directory, MANIFEST)) as fh:
        doc = json.load(fh)
    bad = []
    for rel, e in doc["files"].items():
        p = os.path.join(directory, rel)
        if e.get("volatile"):
            continue
        if not os.path.exists(p) or sha256_of(p) != e["sha256"]:
            bad.append(rel)
    return bad


# ---------------------------------------------------------------------- data

def _subdir(cfg: ExperimentConfig, name):
    d = os.path.join(cfg.output_dir, name)
    os.makedirs(d, exist_ok=True)
    return d


def _node_file(i):
    return os.path.join("moments", f"node_{i:05d}.csv")


def cmd_simulate(cfg: ExperimentConfig):
    """Simulate every grid node and write one moment CSV per node."""
    out = _subdir(cfg, "data")
    os.makedirs(os.path.join(out, "moments"), exist_ok=True)
    model, grid, sim = cfg.model(), cfg.sample_grid(), cfg.sim_config()
    data = simulate_grid(model, grid, sim)
    files = []
    for i in range(grid.size):
        write_moments_csv(os.path.join(out, _node_file(i)),
                          MomentSeries(data.times, data.means[i], data.covs[i]))
        files.append(_node_file(i))
    cfg.save(os.path.join(out, "config.json"))
    files.append("config.json")
    nodes = [{"index": i, "coords": [float(c) for c in x], "file": _node_file(i)}
             for i, x in enumerate(grid.nodes)]
    write_manifest(out, files, {"nodes": nodes, "noise_dim": model.noise_dim, "sim": sim.to_dict(),
                                "grid": grid.to_dict()})
    return data


def load_grid_data(cfg: ExperimentConfig) -> GridData:
    out = os.path.join(cfg.output_dir, "data")
    mpath = os.path.join(out, MANIFEST)
    if not os.path.exists(mpath):
        raise DataMissing(f"no data manifest at {mpath}; run 'simulate' first")
    with open(mpath) as fh:
        doc = json.load(fh)
    grid = SampleGrid(tuple(tuple(b) for b in doc["grid"]["bounds"]), tuple(doc["grid"]["shape"]))
    if grid != cfg.sample_grid():
        raise ConfigError("simulated grid does not match the config")
    sim = cfg.sim_config()
    if doc["sim"] != sim.to_dict():
        raise ConfigError("simulated ensemble settings do not match the config")
    series = [read_moments_csv(os.path.join(out, n["file"])) for n in doc["nodes"]]
    means = np.stack([s.means for s in series])
    covs = np.stack([s.covariances for s in series])
    return GridData(grid, series[0].times, means, covs, doc["noise_dim"], sim)


def surrogate_from_checkpoint(path) -> Surrogate:
    nets, meta = load_checkpoint(path)
    return Surrogate(nets["drift"], nets["diffusion"], int(meta["noise_dim"]))


# --------------------------------------------------------------------- train

def _agf_threshold(cfg, data, tc):
    path = os.path.join(cfg.output_dir, "train_agf", "report.json")
    if os.path.exists(path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc["config"] == tc.to_dict():
            return doc["rounds"][-1]["rmse"]
    return cmd_train(cfg, "agf", data).final["rmse"]


def cmd_train(cfg: ExperimentConfig, mode="rbms2", data: GridData = None) -> TrainReport:
    """Identify a surrogate; rbms modes stop at the AGF baseline unless a threshold is configured."""
    if mode not in ("agf", "rbms1", "rbms2"):
        raise ConfigError(f"unknown mode {mode!r}")
    data = load_grid_data(cfg) if data is None else data
    model, tc = cfg.model(), cfg.train_config()
    threshold = None
    if mode != "agf":
        threshold = tc.stop_threshold if tc.stop_threshold is not None else _agf_threshold(cfg, data, tc)
    report = identify(model, data, tc, mode, threshold)
    out = _subdir(cfg, f"train_{mode}")
    timings = [r.pop("wall_time") for r in report.rounds]
    report.to_json(os.path.join(out, "report.json"))
    report.write_curves_csv(os.path.join(out, "curves.csv"))
    save_checkpoint(os.path.join(out, "weights.json"), {"drift": report.surrogate.drift,
                                                        "diffusion": report.surrogate.diffusion},
                    noise_dim=report.surrogate.noise_dim, mode=mode, system=cfg.system, seed=cfg.seed)
    with open(os.path.join(out, "timings.json"), "w") as fh:
        json.dump({"wall_time": timings}, fh)
    for r, t in zip(report.rounds, timings):
        r["wall_time"] = t
    files = ["report.json", "curves.csv", "weights.json", "timings.json"]
    if mode != "agf":
        write_samples_csv(os.path.join(out, "samples.csv"), data.grid, report.samples, report.last_field)
        files.append("samples.csv")
        if report.last_field is not None:
            write_field_csv(os.path.join(out, "field.csv"), report.last_field, report.samples)
            files.append("field.csv")
        n = [r["n_samples"] for r in report.rounds]
        series = {"rmse": (n, [r["rmse"] for r in report.rounds])}
        if threshold is not None:
            series["AGF baseline"] = ([n[0], n[-1]], [threshold, threshold])
        svgplot.line_plot(os.path.join(out, "curves.svg"), series, f"{mode} training error",
                          "number of samples", "RMSE")
        files.append("curves.svg")
    write_manifest(out, files)
    return report


# ------------------------------------------------------------------- analyze

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _analyze_grazing(cfg, sur, out):
    spec = cfg.analysis.get("escape", {})
    p = GrazingParams(**{k: v for k, v in cfg.system.items() if k != "system"})
    lower, upper = escape_lower_boundary(p), spec.get("upper", cfg.sample_grid().bounds[0][1])
    res = escape_comparison(cfg.model(), lower, upper, spec.get("n_query", 15),
                            surrogate=sur.as_model() if sur is not None else None,
                            n_traj=spec.get("n_traj", 0), max_time=spec.get("max_time", 100.0),
                            dt=spec.get("dt", 5e-3), seed=cfg.seed)
    cols = [k for k in ("x", "analytic", "fd", "surrogate", "mc", "mc_se") if k in res]
    _write_rows(os.path.join(out, "escape.csv"), cols, zip(*[map(float, res[c]) for c in cols]))
    series = {k: (res["x"], res[k]) for k in ("analytic", "surrogate", "mc") if k in res}
    svgplot.line_plot(os.path.join(out, "escape.svg"), series, "escape probability", "x", "P_E")
    files = ["escape.csv", "escape.svg"]
    param, values = spec.get("sweep_param"), spec.get("sweep_values")
    if param and values:
        rows = escape_surface(p, param, values, upper, spec.get("n_query", 15))
        _write_rows(os.path.join(out, "escape_surface.csv"), [param, "x", "P_E"], rows)
        z = np.array([r[2] for r in rows]).reshape(len(values), -1).T
        svgplot.heatmap(os.path.join(out, "escape_surface.svg"), z,
                        ((min(r[1] for r in rows), upper), (min(values), max(values))),
                        f"escape probability over x and {param}", "x (row-wise grid)", param)
        files += ["escape_surface.csv", "escape_surface.svg"]
    return files


def _analyze_rvdp(cfg, out):
    dspec = cfg.analysis["density"]
    bspec = cfg.analysis.get("bifurcation", {})
    tg = bspec.get("train_grid")
    train_grid = SampleGrid(tuple(tuple(b) for b in tg["bounds"]), tuple(tg["shape"])) if tg else None
    sim = replace(cfg.sim_config(), ensemble_size=bspec.get("ensemble_size", cfg.sim["ensemble_size"]))
    rows, dens = bifurcation_sweep(cfg.rvdp_params(), bspec.get("D_values", [cfg.system["D"]]), dspec,
                                   train_grid, sim, cfg.train_config(), cfg.seed, keep_densities=True)
    header = list(rows[0].keys())
    _write_rows(os.path.join(out, "bifurcation.csv"), header, [[r[h] for h in header] for r in rows])
    files = ["bifurcation.csv"]
    for (kind, D), d in sorted(dens.items()):
        stem = f"density_{kind}_D{D:g}"
        d.write_csv(os.path.join(out, stem + ".csv"))
        svgplot.heatmap(os.path.join(out, stem + ".svg"), d.density, d.bounds,
                        f"stationary density, {kind}, D={D:g}", "x1", "x2")
        files += [stem + ".csv", stem + ".svg"]
    return files


def cmd_analyze(cfg: ExperimentConfig, checkpoint=None):
    """Escape curves (grazing) or stationary densities and the noise sweep (RVDP)."""
    out = _subdir(cfg, "analysis")
    if cfg.system_name == "grazing":
        path = checkpoint or os.path.join(cfg.output_dir, "train_rbms2", "weights.json")
        if not os.path.exists(path):
            raise DataMissing(f"checkpoint {path} not found; run 'train' first")
        files = _analyze_grazing(cfg, surrogate_from_checkpoint(path), out)
    else:
        files = _analyze_rvdp(cfg, out)
    write_manifest(out, files)
    return files


# ---------------------------------------------------------------- robustness

METRICS = ("rmse", "rrmse", "max_sigma_error")


def cmd_robustness(cfg: ExperimentConfig):
    """Paired clean and perturbed runs; per-repetition rows and mean/std bands."""
    out = _subdir(cfg, "robustness")
    spec = cfg.robustness
    reps = spec.get("repetitions", 10)
    model, grid, sim, tc = cfg.model(), cfg.sample_grid(), cfg.sim_config(), cfg.train_config()
    files = []
    results = {}
    for label, std in (("clean", 0.0), ("noisy", spec.get("perturbation_std", 0.25))):
        runs = robustness_experiment(model, grid, sim, tc, std, reps)
        results[label] = runs
        header = ["repetition", "mean_change", "cov_change"] + [f"{m}_{k}" for m in ("agf", "rbms")
                                                                for k in (*METRICS, "n_samples")]
        rows = [[r["repetition"], r["mean_change"], r["cov_change"]]
                + [r[m][k] for m in ("agf", "rbms") for k in (*METRICS, "n_samples")] for r in runs]
        _write_rows(os.path.join(out, f"runs_{label}.csv"), header, rows)
        bands = []
        for k in METRICS:
            a = np.array([r["agf"][k] for r in runs])
            b = np.array([r["rbms"][k] for r in runs])
            bands.append([k, float(a.mean()), float(a.std()), float(b.mean()), float(b.std())])
        _write_rows(os.path.join(out, f"bands_{label}.csv"),
                    ["metric", "agf_mean", "agf_std", "rbms_mean", "rbms_std"], bands)
        files += [f"runs_{label}.csv", f"bands_{label}.csv"]
    write_manifest(out, files)
    return results


# -------------------------------------------------------------------- report

def cmd_report(cfg: ExperimentConfig, stream=sys.stdout):
    """Verify every manifest under the output directory and summarise reports."""
    bad = []
    for sub in sorted(os.listdir(cfg.output_dir)) if os.path.isdir(cfg.output_dir) else []:
        d = os.path.join(cfg.output_dir, sub)
        if not os.path.exists(os.path.join(d, MANIFEST)):
            continue
        mism = verify_manifest(d)
        bad += [os.path.join(sub, m) for m in mism]
        print(f"{sub}: {'OK' if not mism else 'HASH MISMATCH ' + ', '.join(mism)}", file=stream)
        rpath = os.path.join(d, "report.json")
        if os.path.exists(rpath):
            with open(rpath) as fh:
                doc = json.load(fh)
            last = doc["rounds"][-1]
            print(f"  {doc['mode']}: {last['n_samples']} samples, rmse {last['rmse']:.4g}, "
                  f"rrmse {last['rrmse']:.4g}, max sigma error {last['max_sigma_error']:.4g}, "
                  f"stop {doc['stop_reason']}", file=stream)
    return bad


# ---------------------------------------------------------------------- main

def build_parser():
    ap = argparse.ArgumentParser(prog="rbms-sde", description=__doc__.split("\n")[1])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "analyze", "robustness", "report", "init"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "init")
        p.add_argument("--seed", type=int)
        if name == "train":
            p.add_argument("--mode", choices=("agf", "rbms1", "rbms2"), default="rbms2")
        if name == "analyze":
            p.add_argument("--checkpoint")
        if name == "init":
            p.add_argument("--system", choices=("grazing", "rvdp"), default="grazing")
            p.add_argument("--output-dir", default="out")
            p.add_argument("path")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init":
            cfg = default_config(args.system, args.output_dir, args.seed or 0)
            cfg.save(args.path)
            return 0
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        os.makedirs(cfg.output_dir, exist_ok=True)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.mode)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.checkpoint)
        elif args.command == "robustness":
            cmd_robustness(cfg)
        elif args.command == "report":
            return 1 if cmd_report(cfg) else 0
        return 0
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RbmsError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
