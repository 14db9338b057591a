"""Scaling fits, radius histograms and cross-landscape tables."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import MCConfig, VolumeEstimate, volume_of_minimum


@dataclass(frozen=True)
class ScalingFit:
    alpha: float
    slope: float
    intercept: float
    r_squared: float
    n_params: int
    points: tuple[tuple[float, float], ...]
    excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n_params": self.n_params,
            "points": [list(p) for p in self.points],
            "excluded_collapsed": self.excluded,
        }


def fit_power_law(points: Sequence[tuple[float, float | None]], n_params: int,
                  average_seeds: bool = True) -> ScalingFit:
    """Least squares of log-volume on ln(dataset size).

    The slope divided by the parameter count is the scaling constant alpha in
    r_max ~ D**alpha. Collapsed (None or -inf) volumes are dropped and counted.
    With ``average_seeds`` repeated sizes are first merged by their mean
    log-volume.
    """
    usable = [(float(d), float(v)) for d, v in points if v is not None and math.isfinite(v)]
    excluded = len(points) - len(usable)
    if average_seeds:
        groups = defaultdict(list)
        for d, v in usable:
            groups[d].append(v)
        usable = [(d, math.fsum(vs) / len(vs)) for d, vs in sorted(groups.items())]
    if len(usable) < 2:
        raise ValueError("need at least two finite points")
    D = np.array([d for d, _ in usable])
    V = np.array([v for _, v in usable])
    if np.any(D <= 0):
        raise ValueError("dataset sizes must be positive")
    x = np.log(D)
    if np.ptp(x) == 0:
        raise ValueError("all dataset sizes are equal")
    xm, vm = x.mean(), V.mean()
    sxx = float(np.sum((x - xm) ** 2))
    slope = float(np.sum((x - xm) * (V - vm))) / sxx
    intercept = float(vm - slope * xm)
    resid = V - (intercept + slope * x)
    sst = float(np.sum((V - vm) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / sst if sst > 0 else 1.0
    return ScalingFit(slope / n_params, slope, intercept, r2, n_params, tuple(usable), excluded)


def radii_histogram(estimate: VolumeEstimate, bins: int) -> list[dict]:
    """Equal-width bins over [0, max radius]; censored radii get their own column."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not estimate.radii:
        raise ValueError("estimate has no radii")
    r = estimate.radius_values()
    cens = np.array([s.censored for s in estimate.radii])
    top = float(r.max())
    edges = np.linspace(0.0, top, bins + 1) if top > 0 else np.zeros(bins + 1)
    if top > 0:
        idx = np.minimum((r / top * bins).astype(np.int64), bins - 1)
    else:
        idx = np.zeros(r.size, dtype=np.int64)
    counts = np.bincount(idx[~cens], minlength=bins)
    ccounts = np.bincount(idx[cens], minlength=bins)
    return [
        {"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
         "count": int(counts[i]), "censored": int(ccounts[i])}
        for i in range(bins)
    ]


def summarize_radii(estimate: VolumeEstimate) -> dict:
    if estimate.K < 1 or not estimate.radii:
        raise ValueError("estimate has no radii")
    r = estimate.radius_values()
    n_cens = sum(s.censored for s in estimate.radii)
    return {
        "min": float(r.min()),
        "max": float(r.max()),
        "mean": math.fsum(r) / r.size,
        "median": float(np.median(r)),
        "censored_fraction": n_cens / r.size,
        "all_censored": n_cens == r.size,
    }


@dataclass(frozen=True)
class CrossLandscape:
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    estimates: tuple[tuple[VolumeEstimate, ...], ...]

    def log_volumes(self) -> np.ndarray:
        return np.array([[e.log_volume for e in row] for row in self.estimates])

    def collapsed(self) -> np.ndarray:
        return np.array([[e.collapsed for e in row] for row in self.estimates])

    def to_dict(self) -> dict:
        return {
            "rows": list(self.row_labels),
            "cols": list(self.col_labels),
            "log_volume": [[None if e.collapsed else e.log_volume for e in row] for row in self.estimates],
            "collapsed": [[e.collapsed for e in row] for row in self.estimates],
            "censored_fraction": [[e.censored_fraction for e in row] for row in self.estimates],
        }


def cross_landscape_matrix(models: Sequence[tuple[str, object, object]], landscapes: Sequence[tuple[str, object]],
                           mc: MCConfig) -> CrossLandscape:
    """Volume of every (model, landscape) pair.

    ``models`` holds (label, spec, params) and ``landscapes`` (label, dataset).
    """
    if not models:
        raise ValueError("no models")
    spec0 = models[0][1]
    for _, spec, _ in models:
        if spec != spec0:
            raise ValueError("all models must share one NetworkSpec")
    rows = tuple(
        tuple(volume_of_minimum(spec, params, ds, mc) for _, ds in landscapes)
        for _, spec, params in models
    )
    return CrossLandscape(tuple(m[0] for m in models), tuple(l[0] for l in landscapes), rows)
