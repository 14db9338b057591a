"""Exact targets for the volume estimator.

The toy basin is the band 1 - s <= x*y <= 1 + s around the point (b, 1/b),
i.e. the sublevel set {|xy - 1| <= s} of a two-parameter product model. Its
star-convex area has a closed form that does not depend on b.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .nn import Group, ParameterVector
from .volume import MCConfig, VolumeEstimate, measure_log_volume

TOY_LAYOUT = (Group(0, "weight", 0, 0, (1,)), Group(1, "weight", 1, 1, (1,)))


def _check(s: float, b: float = 1.0) -> None:
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    if not b > 0:
        raise ValueError("b must be positive")


def toy_loss(x, y):
    return np.abs(np.multiply(x, y) - 1.0)


def toy_critical_points(s: float, b: float) -> tuple[float, float]:
    _check(s, b)
    k = math.sqrt(s / (1 + s))
    return b * (1 + s) * (1 - k), b * (1 + s) * (1 + k)


def toy_extent(s: float, b: float) -> tuple[float, float]:
    x_c1, x_c2 = toy_critical_points(s, b)
    k = math.sqrt(2 * s / (1 + s))
    return x_c1 * (1 - k), x_c2 * (1 + k)


def toy_volume_closed_form(s: float) -> float:
    _check(s)
    a = math.sqrt(s / (1 + s))
    c = math.sqrt(2 * s / (1 + s))
    return (2 * math.sqrt(2 * s * (1 + s))
            + 2 * s * math.log((1 + a) / (1 - a))
            - (1 - s) * math.log((1 + c) / (1 - c)))


def toy_params(b: float) -> ParameterVector:
    return ParameterVector(np.array([b, 1.0 / b]), TOY_LAYOUT)


def toy_mc_volume(s: float, b: float, mc: MCConfig) -> VolumeEstimate:
    """Run the shared Monte Carlo estimator on the toy model; area is exp(log_volume)."""
    _check(s, b)
    if mc.threshold != s:
        raise ValueError("MC threshold must equal the basin half-width s")
    return measure_log_volume(lambda th: abs(th[0] * th[1] - 1.0), toy_params(b), mc, "toy")


def grid_volume(loss_fn: Callable, threshold: float, bounds, resolution: int,
                anchor=(0.0, 0.0), star_convex: bool = False) -> float:
    """Area of {loss <= threshold} by counting grid cells.

    ``loss_fn`` takes broadcastable x, y arrays. With ``star_convex`` a cell
    also needs the segment from ``anchor`` to its centre to stay inside the
    set, checked at cell-diagonal spacing.
    """
    if resolution < 10:
        raise ValueError("resolution must be >= 10")
    (x0, x1), (y0, y1) = bounds
    ax, ay = anchor
    if not (x0 <= ax <= x1 and y0 <= ay <= y1):
        raise ValueError("anchor outside bounds")
    hx = (x1 - x0) / resolution
    hy = (y1 - y0) / resolution
    xs = x0 + hx * (np.arange(resolution) + 0.5)
    ys = y0 + hy * (np.arange(resolution) + 0.5)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = loss_fn(X, Y) <= threshold
    if not star_convex:
        return float(np.count_nonzero(inside)) * hx * hy

    cx = X[inside]
    cy = Y[inside]
    diag = math.hypot(hx, hy)
    m = np.maximum(1, np.ceil(np.hypot(cx - ax, cy - ay) / diag)).astype(np.int64)
    alive = np.ones(cx.size, dtype=bool)
    if loss_fn(np.float64(ax), np.float64(ay)) > threshold:
        return 0.0
    # walk every segment outward one sample at a time
    for k in range(1, int(m.max())):
        sel = np.flatnonzero(alive & (m > k))
        if sel.size == 0:
            break
        t = k / m[sel]
        px = ax + t * (cx[sel] - ax)
        py = ay + t * (cy[sel] - ay)
        alive[sel[loss_fn(px, py) > threshold]] = False
    return float(np.count_nonzero(alive)) * hx * hy


def toy_grid_volume(s: float, b: float, resolution: int = 2000, star_convex: bool = True) -> float:
    x_i, x_f = toy_extent(s, b)
    # (x, y) -> (x/b, y*b) maps the region onto the b=1 one, which is symmetric in x and y
    y_i, y_f = toy_extent(s, 1.0 / b)
    pad_x = 0.02 * (x_f - x_i)
    pad_y = 0.02 * (y_f - y_i)
    bounds = ((x_i - pad_x, x_f + pad_x), (y_i - pad_y, y_f + pad_y))
    return grid_volume(toy_loss, s, bounds, resolution, (b, 1.0 / b), star_convex)


def oracle_report(s: float, b_values, mc: MCConfig, resolution: int = 2000) -> dict:
    closed = toy_volume_closed_form(s)
    rows = []
    for b in b_values:
        est = toy_mc_volume(s, b, mc)
        mc_area = math.exp(est.log_volume)
        grid = toy_grid_volume(s, b, resolution)
        rows.append({
            "b": float(b),
            "mc": mc_area,
            "mc_censored_fraction": est.censored_fraction,
            "grid": grid,
            "mc_rel_error": abs(mc_area - closed) / closed,
            "grid_rel_error": abs(grid - closed) / closed,
            "critical_points": list(toy_critical_points(s, b)),
            "extent": list(toy_extent(s, b)),
        })
    report = {"s": float(s), "closed_form": closed, "K": mc.K, "seed": mc.seed, "per_b": rows}
    if len(rows) > 1:
        mcs = [r["mc"] for r in rows]
        report["mc_scale_spread"] = (max(mcs) - min(mcs)) / closed
    return report
