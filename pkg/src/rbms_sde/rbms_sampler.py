"""
Residual-driven selection of new initial conditions on a uniform grid.

Residuals live on grid nodes only, so maxima are discrete: a node is a peak
when its pdf value is >= every Moore neighbour and > at least one of them.
Neighbourhoods ``U(x, r)`` are Chebyshev balls measured in grid cells.
Every tie is broken towards the lowest flat node index.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from itertools import product
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import SaturatedRegion

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleGrid:
    bounds: Tuple[Tuple[float, float], ...]
    shape: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.bounds) != len(self.shape):
            raise ValueError("bounds and shape disagree on dimension")
        if any(s < 1 for s in self.shape) or any(hi < lo for lo, hi in self.bounds):
            raise ValueError("invalid grid specification")

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def axes(self):
        return [np.linspace(lo, hi, s) for (lo, hi), s in zip(self.bounds, self.shape)]

    @property
    def spacing(self):
        return np.array([(hi - lo) / (s - 1) if s > 1 else 1.0 for (lo, hi), s in zip(self.bounds, self.shape)])

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=-1)

    def multi_index(self, idx):
        return np.unravel_index(idx, self.shape)

    def flat_index(self, multi):
        return np.ravel_multi_index(multi, self.shape)

    def ball(self, idx, r):
        """Flat indices within Chebyshev distance ``r`` cells of node ``idx``, ascending."""
        centre = self.multi_index(idx)
        ranges = [np.arange(max(0, c - r), min(s, c + r + 1)) for c, s in zip(centre, self.shape)]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.sort(self.flat_index(tuple(a.ravel() for a in mesh)))

    def to_dict(self):
        return {"bounds": [list(b) for b in self.bounds], "shape": list(self.shape)}


@dataclass(frozen=True)
class ResidualField:
    grid: SampleGrid
    epsilon: np.ndarray
    pdf: np.ndarray
    smoothing_applied: bool = False
    uniform_fallback: bool = False


@dataclass(frozen=True)
class SampleSet:
    indices: frozenset = frozenset()
    history: Tuple[Tuple[int, ...], ...] = ()

    @classmethod
    def from_indices(cls, idx):
        idx = tuple(int(i) for i in idx)
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate sample indices")
        return cls(frozenset(idx), (idx,))

    def add(self, new: Sequence[int]) -> "SampleSet":
        new = tuple(int(i) for i in new)
        if set(new) & self.indices or len(set(new)) != len(new):
            raise ValueError("attempt to add an already sampled node")
        return SampleSet(self.indices | frozenset(new), self.history + (new,))

    def sorted(self):
        return np.array(sorted(self.indices), dtype=int)

    def epoch_of(self):
        """Mapping node index -> epoch in which it was added."""
        return {i: e for e, batch in enumerate(self.history) for i in batch}

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class RbmsConfig:
    variant: str = "II"
    m: int = 7
    n: int = 2
    r: int = 5
    smooth: bool = True
    smooth_sigma: float = 1.0

    def __post_init__(self):
        if self.variant not in ("I", "II"):
            raise ValueError("variant must be 'I' or 'II'")
        if self.m < 1 or self.n < 1 or self.r < 1:
            raise ValueError("m, n and r must be at least 1")

    def to_dict(self):
        return {"variant": self.variant, "m": self.m, "n": self.n, "r": self.r,
                "smooth": self.smooth, "smooth_sigma": self.smooth_sigma}


def build_residual_field(grid: SampleGrid, residuals, smooth=False, smooth_sigma=1.0) -> ResidualField:
    """Normalize residuals into a pdf with ``sum(pdf) * cell_volume == 1``.

    With ``smooth`` the residuals are first convolved with a Gaussian of
    ``smooth_sigma`` grid cells.  All-zero residuals give a uniform pdf with
    ``uniform_fallback`` set.
    """
    eps = np.asarray(residuals, dtype=float).reshape(-1)
    if eps.size != grid.size:
        raise ValueError("one residual per grid node is required")
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise ValueError("residuals must be finite and non-negative")
    w = eps
    if smooth:
        w = ndimage.gaussian_filter(eps.reshape(grid.shape), smooth_sigma, mode="nearest").ravel()
    total = w.sum()
    if total <= 0:
        log.warning("all residuals are zero; falling back to a uniform pdf")
        pdf = np.full(grid.size, 1.0 / (grid.size * grid.cell_volume))
        return ResidualField(grid, eps, pdf, bool(smooth), True)
    return ResidualField(grid, eps, w / (total * grid.cell_volume), bool(smooth), False)


def find_peaks(field: ResidualField) -> List[int]:
    """Flat indices of discrete local maxima, ascending.

    Boundary nodes compare only against the neighbours that exist.  A
    connected plateau of maxima contributes its lowest index.  If no node
    qualifies the global argmax is returned.
    """
    grid = field.grid
    p = field.pdf.reshape(grid.shape)
    # missing neighbours never fail ">=" and never satisfy ">"
    lo = np.pad(p, 1, mode="constant", constant_values=-np.inf)
    hi = np.pad(p, 1, mode="constant", constant_values=np.inf)
    ge_all = np.ones(grid.shape, dtype=bool)
    gt_any = np.zeros(grid.shape, dtype=bool)
    for off in product((-1, 0, 1), repeat=grid.ndim):
        if not any(off):
            continue
        sl = tuple(slice(1 + o, s + 1 + o) for o, s in zip(off, grid.shape))
        ge_all &= p >= lo[sl]
        gt_any |= p > hi[sl]
    # adjacent nodes that both dominate their neighbours hold equal values, so
    # components of ge_all are plateaus; one is a maximum if it drops somewhere
    labels, _ = ndimage.label(ge_all, structure=np.ones((3,) * grid.ndim))
    flat, strict = labels.ravel(), gt_any.ravel()
    keep = set(np.unique(flat[strict & (flat > 0)]).tolist())
    if not keep:
        return [int(np.argmax(field.pdf))]
    first = {}
    for i in np.flatnonzero(flat):
        if flat[i] in keep:
            first.setdefault(flat[i], int(i))
    return sorted(first.values())


def _by_pdf(field, nodes):
    """Sort nodes by descending pdf, ties by ascending index."""
    nodes = np.asarray(nodes, dtype=int)
    order = np.lexsort((nodes, -field.pdf[nodes]))
    return nodes[order]


def rbms_i_sample(field: ResidualField, samples: SampleSet, cfg: RbmsConfig) -> SampleSet:
    """Add the ``m`` best unsampled nodes around each of the ``n`` highest peaks."""
    peaks = _by_pdf(field, find_peaks(field))[: cfg.n]
    taken = set(samples.indices)
    added = []
    for pk in peaks:
        ball = field.grid.ball(int(pk), cfg.r)
        avail = [i for i in ball if i not in taken]
        best = _by_pdf(field, avail)[: cfg.m] if avail else []
        for i in best:
            taken.add(int(i))
            added.append(int(i))
    if not added:
        raise SaturatedRegion("no unsampled node near any selected peak", samples)
    return samples.add(added)


def rbms_ii_sample(field: ResidualField, samples: SampleSet, r: int = 5) -> SampleSet:
    """Add one node, the local pdf argmax, near every detected peak."""
    peaks = _by_pdf(field, find_peaks(field))
    taken = set(samples.indices)
    added = []
    for pk in peaks:
        avail = [i for i in field.grid.ball(int(pk), r) if i not in taken]
        if not avail:
            log.info("peak %d has no unsampled node within radius %d", pk, r)
            continue
        best = int(_by_pdf(field, avail)[0])
        taken.add(best)
        added.append(best)
    if not added:
        raise SaturatedRegion("every peak neighbourhood is already sampled", samples)
    return samples.add(added)


def rbms_sample(field: ResidualField, samples: SampleSet, cfg: RbmsConfig) -> SampleSet:
    if cfg.variant == "I":
        return rbms_i_sample(field, samples, cfg)
    return rbms_ii_sample(field, samples, cfg.r)


def write_field_csv(path, field: ResidualField, samples: SampleSet = None):
    grid = field.grid
    nodes = grid.nodes
    epochs = samples.epoch_of() if samples is not None else {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index"] + [f"coord_{i + 1}" for i in range(grid.ndim)]
                   + ["epsilon", "pdf", "sampled_epoch"])
        for i in range(grid.size):
            w.writerow([i] + [repr(float(c)) for c in nodes[i]]
                       + [repr(float(field.epsilon[i])), repr(float(field.pdf[i])), epochs.get(i, -1)])


def write_samples_csv(path, grid: SampleGrid, samples: SampleSet, field: ResidualField = None):
    nodes = grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "node_index"] + [f"coord_{i + 1}" for i in range(grid.ndim)] + ["epsilon", "pdf"])
        for e, batch in enumerate(samples.history):
            for i in batch:
                eps = repr(float(field.epsilon[i])) if field is not None else ""
                pdf = repr(float(field.pdf[i])) if field is not None else ""
                w.writerow([e, i] + [repr(float(c)) for c in nodes[i]] + [eps, pdf])
