"""Monte Carlo star-convex basin volume.

A minimum at theta0 is probed along K random directions. Each direction is a
standard-normal vector, rescaled to unit length so that it is uniform on the
sphere, then multiplied entry-wise by the filter norms of theta0.
Along a direction we find the first c at which the loss rises above the
threshold; the volume is then

    log V = log|unit n-ball| + log( mean_i r_i**n )

evaluated entirely in log space.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import NetworkSpec, ParameterVector, filter_norms, loss_raw


@dataclass(frozen=True)
class MCConfig:
    K: int = 500
    threshold: float = 0.1
    c_max: float = 50.0
    scan_steps: int = 100
    bisect_iters: int = 20
    seed: int = 0
    filter_normalize: bool = True
    # unit-length raw directions make c a distance; False keeps raw normals
    normalize_directions: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not self.c_max > 0:
            raise ValueError("c_max must be positive")
        if self.scan_steps < 2:
            raise ValueError("scan_steps must be >= 2")
        if self.bisect_iters < 0:
            raise ValueError("bisect_iters must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "threshold": self.threshold,
            "c_max": self.c_max,
            "scan_steps": self.scan_steps,
            "bisect_iters": self.bisect_iters,
            "seed": self.seed,
            "filter_normalize": self.filter_normalize,
            "normalize_directions": self.normalize_directions,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class Direction:
    index: int
    raw: ParameterVector
    scaled: ParameterVector
    seed: int

    @classmethod
    def from_vector(cls, template: ParameterVector, vector: np.ndarray, index: int = -1) -> "Direction":
        """An explicit (unscaled) direction, e.g. a basis vector of a plane."""
        v = template.with_values(vector)
        return cls(index, v, v, -1)


@dataclass(frozen=True)
class RadiusSample:
    direction_index: int
    radius: float
    censored: bool
    scan_points: int
    # scan step holding the first crossing; 0 when the start is already outside, -1 if censored
    crossing_step: int


@dataclass(frozen=True)
class VolumeEstimate:
    n_params: int
    threshold: float
    K: int
    radii: tuple[RadiusSample, ...]
    log_volume: float
    landscape_dataset_id: str = ""
    c_max: float = math.nan

    @property
    def collapsed(self) -> bool:
        return self.log_volume == -math.inf

    @property
    def censored_fraction(self) -> float:
        return sum(r.censored for r in self.radii) / self.K

    def radius_values(self) -> np.ndarray:
        return np.array([r.radius for r in self.radii])

    def to_dict(self) -> dict:
        return {
            "n_params": self.n_params,
            "threshold": self.threshold,
            "K": self.K,
            "log_volume": None if self.collapsed else self.log_volume,
            "collapsed": self.collapsed,
            "censored_fraction": self.censored_fraction,
            "c_max": self.c_max,
            "landscape_dataset_id": self.landscape_dataset_id,
            "radii": [r.radius for r in self.radii],
            "censored": [r.censored for r in self.radii],
        }


def direction_rng(master_seed: int, index: int) -> np.random.Generator:
    # Philox is counter-based: the stream for (seed, index) never depends on other directions
    return np.random.Generator(np.random.Philox(key=[master_seed, index]))


def sample_direction(params: ParameterVector, master_seed: int, index: int,
                     filter_normalize: bool = True, normalize: bool = True) -> Direction:
    raw = direction_rng(master_seed, index).standard_normal(len(params))
    if normalize:
        raw = raw / np.linalg.norm(raw)
    raw_pv = params.with_values(raw)
    if filter_normalize:
        scaled = params.with_values(raw * filter_norms(params).values)
    else:
        scaled = raw_pv
    return Direction(index, raw_pv, scaled, master_seed)


def find_radius_fn(loss_at: Callable[[float], float], threshold: float, c_max: float,
                   scan_steps: int, bisect_iters: int, index: int = 0) -> RadiusSample:
    """First-crossing search along one ray, given loss as a function of c."""

    def outside(c):
        # NaN and inf both count as outside
        return not loss_at(c) <= threshold

    evals = 1
    if outside(0.0):
        return RadiusSample(index, 0.0, False, evals, 0)
    prev = 0.0
    for k in range(1, scan_steps + 1):
        c = c_max * (k / scan_steps)
        evals += 1
        if outside(c):
            lo, hi = prev, c
            for _ in range(bisect_iters):
                mid = 0.5 * (lo + hi)
                evals += 1
                if outside(mid):
                    hi = mid
                else:
                    lo = mid
            return RadiusSample(index, hi, False, evals, k)
        prev = c
    return RadiusSample(index, float(c_max), True, evals, -1)


def _ray_loss(loss_fn: Callable[[np.ndarray], float], theta0: np.ndarray, step: np.ndarray):
    def loss_at(c: float) -> float:
        value = loss_fn(theta0 + c * step) if c != 0.0 else loss_fn(theta0)
        return value if math.isfinite(value) else math.inf
    return loss_at


def _network_loss(spec: NetworkSpec, dataset) -> Callable[[np.ndarray], float]:
    X, y = dataset.features, dataset.labels

    def f(theta):
        with np.errstate(over="ignore", invalid="ignore"):
            return loss_raw(spec, theta, X, y)
    return f


def loss_along(spec: NetworkSpec, params: ParameterVector, direction: Direction, c: float, dataset) -> float:
    if c < 0:
        raise ValueError("c must be non-negative")
    return _ray_loss(_network_loss(spec, dataset), params.values, direction.scaled.values)(c)


def find_radius(spec: NetworkSpec, params: ParameterVector, direction: Direction, dataset,
                threshold: float, c_max: float, scan_steps: int = 100, bisect_iters: int = 20) -> RadiusSample:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if scan_steps < 2:
        raise ValueError("scan_steps must be >= 2")
    loss_at = _ray_loss(_network_loss(spec, dataset), params.values, direction.scaled.values)
    return find_radius_fn(loss_at, threshold, c_max, scan_steps, bisect_iters, direction.index)


def log_unit_ball(n: int) -> float:
    if n < 0:
        raise ValueError("dimension must be non-negative")
    return 0.5 * n * math.log(math.pi) - math.lgamma(0.5 * n + 1.0)


def logsumexp(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=np.float64)
    finite = x[np.isfinite(x)]
    if finite.size == 0:
        return -math.inf
    m = float(finite.max())
    return m + math.log(math.fsum(np.exp(finite - m)))


def estimate_log_volume(radii: Sequence[float], n: int, K: int | None = None) -> float:
    """log V_n - log K + logsumexp(n log r_i); zero radii count in K only."""
    r = np.array([getattr(x, "radius", x) for x in radii], dtype=np.float64)
    K = r.size if K is None else K
    if K < 1 or r.size == 0:
        raise ValueError("need at least one radius")
    if r.size != K:
        raise ValueError(f"K={K} but {r.size} radii given")
    if np.any(r < 0):
        raise ValueError("radii must be non-negative")
    positive = r[r > 0]
    if positive.size == 0:
        return -math.inf
    return log_unit_ball(n) - math.log(K) + logsumexp(n * np.log(positive))


def measure_log_volume(loss_fn: Callable[[np.ndarray], float], params: ParameterVector, mc: MCConfig,
                       landscape_id: str = "", indices: Sequence[int] | None = None) -> VolumeEstimate:
    """Volume estimate for an arbitrary loss over the parameter vector."""
    theta0 = params.values
    indices = range(mc.K) if indices is None else indices

    def one(i: int) -> RadiusSample:
        d = sample_direction(params, mc.seed, i, mc.filter_normalize, mc.normalize_directions)
        return find_radius_fn(_ray_loss(loss_fn, theta0, d.scaled.values), mc.threshold,
                              mc.c_max, mc.scan_steps, mc.bisect_iters, i)

    if mc.workers > 1:
        with ThreadPoolExecutor(max_workers=mc.workers) as pool:
            radii = tuple(pool.map(one, indices))
    else:
        radii = tuple(one(i) for i in indices)
    K = len(radii)
    return VolumeEstimate(
        n_params=len(params),
        threshold=mc.threshold,
        K=K,
        radii=radii,
        log_volume=estimate_log_volume([r.radius for r in radii], len(params), K),
        landscape_dataset_id=landscape_id,
        c_max=mc.c_max,
    )


def volume_of_minimum(spec: NetworkSpec, params: ParameterVector, landscape, mc: MCConfig) -> VolumeEstimate:
    if len(landscape) == 0:
        raise ValueError("empty landscape dataset")
    return measure_log_volume(_network_loss(spec, landscape), params, mc, getattr(landscape, "id", ""))


def landscape_slice(spec: NetworkSpec, anchor: ParameterVector, dir_a: Direction, dir_b: Direction,
                    dataset, half_width: float, steps: int) -> np.ndarray:
    """Loss on the (2*steps+1)^2 grid anchor + a*dir_a + b*dir_b; rows index a."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = _network_loss(spec, dataset)
    coords = slice_coords(half_width, steps)
    theta0, da, db = anchor.values, dir_a.scaled.values, dir_b.scaled.values
    out = np.empty((coords.size, coords.size))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            out[i, j] = f(theta0 + a * da + b * db)
    return out


def slice_coords(half_width: float, steps: int) -> np.ndarray:
    return half_width * (np.arange(-steps, steps + 1) / steps)


def plane_through(a: ParameterVector, b: ParameterVector, c: ParameterVector):
    """Orthonormal plane basis through three points (Gram-Schmidt on b-a, c-a).

    Returns (u, v, coords) with coords the in-plane positions of a, b, c.
    """
    e1 = b.values - a.values
    n1 = np.linalg.norm(e1)
    if n1 == 0:
        raise ValueError("points a and b coincide")
    u = e1 / n1
    e2 = c.values - a.values
    e2 = e2 - (e2 @ u) * u
    n2 = np.linalg.norm(e2)
    if n2 == 0:
        raise ValueError("points are collinear")
    v = e2 / n2
    coords = [(0.0, 0.0), (float(n1), 0.0), (float((c.values - a.values) @ u), float(n2))]
    return Direction.from_vector(a, u, 0), Direction.from_vector(a, v, 1), coords
