"""
Experiment configuration: one JSON document that fixes every artifact.

The master ``seed`` overrides the seeds of the simulation and training
sections, so a whole experiment is re-seeded by one number.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace

from .bench_systems import RvdpParams, make_model
from .errors import ConfigError
from .rbms_sampler import RbmsConfig, SampleGrid
from .sde_sim import SimConfig
from .trainer import TrainConfig

SYSTEMS = ("grazing", "rvdp")


def _grazing_analysis():
    return {
        "escape": {"upper": 9.9, "n_query": 15, "n_traj": 10_000, "max_time": 100.0, "dt": 5e-3,
                   "sweep_param": "D", "sweep_values": [0.05, 0.075, 0.1]},
    }


def _rvdp_analysis():
    return {
        "density": {"bounds": [[0.0, 3.0], [-3.0, 3.0]], "shape": [60, 120], "x0": [1.0, 0.0],
                    "burn_in": 20.0, "total_time": 120.0, "dt": 0.002, "n_traj": 500,
                    "r_threshold_cells": 2.0},
        "bifurcation": {"D_values": [0.01, 0.05, 0.1],
                        "train_grid": {"bounds": [[0.0, 2.5], [-2.5, 2.5]], "shape": [40, 40]},
                        "ensemble_size": 1000},
    }


_DEFAULTS = {
    "grazing": {
        "system": {"system": "grazing", "k": 0.1, "A": 10.0, "beta": 2.0, "c": 1.15, "x0": 1.0, "D": 0.05},
        "grid": {"bounds": [[0.1, 9.9]], "shape": [1600]},
        "sim": {"dt": 0.01, "steps": 25, "ensemble_size": 2000, "milstein_correction": False},
        "train": {"rbms": {"variant": "II", "m": 7, "n": 2, "r": 5, "smooth": True, "smooth_sigma": 8.0},
                  "max_rounds": 40},
        "analysis": _grazing_analysis(),
        "robustness": {"perturbation_std": 0.25, "repetitions": 10},
    },
    "rvdp": {
        "system": {"system": "rvdp", "alpha": 0.5, "beta": 1.0, "gamma": 0.2, "r": 0.95, "D": 0.05,
                   "independent_noise": False},
        "grid": {"bounds": [[1.0, 3.0], [-3.0, -1.0]], "shape": [40, 40]},
        "sim": {"dt": 0.01, "steps": 25, "ensemble_size": 1000, "milstein_correction": False},
        "train": {"rbms": {"variant": "II", "m": 7, "n": 2, "r": 5, "smooth": True, "smooth_sigma": 3.0},
                  "max_rounds": 40},
        "analysis": _rvdp_analysis(),
        "robustness": {"perturbation_std": 0.25, "repetitions": 10},
    },
}


@dataclass
class ExperimentConfig:
    system: dict
    grid: dict
    sim: dict
    train: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    robustness: dict = field(default_factory=dict)
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------- accessors
    @property
    def system_name(self):
        return self.system.get("system")

    def model(self):
        return make_model(self.system)

    def sample_grid(self) -> SampleGrid:
        return SampleGrid(tuple(tuple(b) for b in self.grid["bounds"]), tuple(self.grid["shape"]))

    def sim_config(self) -> SimConfig:
        return SimConfig(**{**self.sim, "seed": self.seed})

    def train_config(self) -> TrainConfig:
        return replace(TrainConfig.from_dict(self.train), seed=self.seed)

    def rvdp_params(self) -> RvdpParams:
        p = dict(self.system)
        p.pop("system")
        return RvdpParams(**p)

    def with_seed(self, seed):
        c = copy.deepcopy(self)
        c.seed = int(seed)
        return c

    def validate(self):
        try:
            if self.system_name not in SYSTEMS:
                raise ValueError(f"system must be one of {SYSTEMS}, got {self.system_name!r}")
            self.model()
            grid = self.sample_grid()
            if len(grid.shape) != self.model().dim:
                raise ValueError("grid dimension does not match the system")
            self.sim_config()
            tc = self.train_config()
            if tc.sample_budget is not None and tc.sample_budget > grid.size:
                raise ValueError("sample_budget exceeds the grid size")
            if not isinstance(self.seed, int) or self.seed < 0:
                raise ValueError("seed must be a non-negative integer")
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    # ------------------------------------------------------- serialization
    def to_dict(self):
        return copy.deepcopy({"system": self.system, "grid": self.grid, "sim": self.sim, "train": self.train,
                              "analysis": self.analysis, "robustness": self.robustness,
                              "output_dir": self.output_dir, "seed": self.seed})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d):
        known = {"system", "grid", "sim", "train", "analysis", "robustness", "output_dir", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("system", "grid", "sim"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def default_config(system="grazing", output_dir="out", seed=0) -> ExperimentConfig:
    if system not in _DEFAULTS:
        raise ConfigError(f"no defaults for system {system!r}")
    d = copy.deepcopy(_DEFAULTS[system])
    return ExperimentConfig(output_dir=output_dir, seed=seed, **d)


def default_rbms(system):
    return RbmsConfig(**_DEFAULTS[system]["train"]["rbms"])
