"""Dataset generation, loading and subsetting with replayable provenance.

Every dataset carries a ``recipe``: a nested dict naming the operation that
produced it and the recipes of its inputs. ``rebuild(recipe)`` replays the
chain and yields bit-identical arrays.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    recipe: dict
    # row indices into the root source, used to prove disjointness
    origin: np.ndarray = field(repr=False)
    poisoned: np.ndarray = field(repr=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError("features must be 2-D with one row per label")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError("labels outside class range")
        origin = np.asarray(self.origin, dtype=np.int64)
        poisoned = np.asarray(self.poisoned, dtype=bool)
        for a in (X, y, origin, poisoned):
            a.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "poisoned", poisoned)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def id(self) -> str:
        return recipe_id(self.recipe)

    @property
    def source(self) -> str:
        return root_recipe(self.recipe)["op"]

    @property
    def parent_id(self) -> str | None:
        parent = self.recipe.get("parent")
        return recipe_id(parent) if parent else None

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def recipe_id(recipe: dict) -> str:
    blob = json.dumps(recipe, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def root_recipe(recipe: dict) -> dict:
    while "parent" in recipe:
        recipe = recipe["parent"]
    return recipe


def _root(X, y, n_classes, recipe) -> Dataset:
    n = y.size
    return Dataset(X, y, n_classes, recipe, np.arange(n), np.zeros(n, dtype=bool))


def swiss_roll_curve(t: np.ndarray, cls: int) -> np.ndarray:
    phase = t + cls * np.pi
    return np.stack([t * np.cos(phase), t * np.sin(phase)], axis=1)


def _swiss_roll_raw(n: int, noise: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    t = rng.uniform(np.pi / 2, 3.5 * np.pi, size=n)
    raw = np.empty((n, 2))
    for c in (0, 1):
        mask = labels == c
        raw[mask] = swiss_roll_curve(t[mask], c)
    raw += noise * rng.standard_normal((n, 2))
    return raw, labels


def gen_swiss_roll(n: int, noise: float = 0.0, seed: int = 0) -> Dataset:
    """Two interleaved spirals, classes 0 and 1, standardized features.

    Class 0 receives the extra point when n is odd.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    raw, labels = _swiss_roll_raw(n, noise, seed)
    X = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    recipe = {"op": "swiss_roll", "n": int(n), "noise": float(noise), "seed": int(seed)}
    return _root(X, labels, 2, recipe)


def swiss_roll_standardization(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std used to standardize the root swiss roll of ``ds``."""
    root = root_recipe(ds.recipe)
    if root["op"] != "swiss_roll":
        raise ValueError("not a swiss roll dataset")
    raw, _ = _swiss_roll_raw(root["n"], root["noise"], root["seed"])
    return raw.mean(axis=0), raw.std(axis=0)


def gen_modulo(p: int) -> Dataset:
    """All p*p pairs (a, b) as concatenated one-hots, labelled (a + b) mod p."""
    if p < 2:
        raise ValueError("modulus must be >= 2")
    a, b = np.divmod(np.arange(p * p), p)
    X = np.zeros((p * p, 2 * p))
    rows = np.arange(p * p)
    X[rows, a] = 1.0
    X[rows, p + b] = 1.0
    return _root(X, (a + b) % p, p, {"op": "modulo", "p": int(p)})


def _read_idx(path: Path, magic: int) -> tuple[list[int], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataError(f"{path}: truncated header")
    (found,) = struct.unpack(">i", data[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic {found}, expected {magic}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated header")
    dims = list(struct.unpack(f">{ndim}i", data[4:header]))
    expected = math.prod(dims)
    payload = data[header:]
    if len(payload) < expected:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return dims, payload[:expected]


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (MNIST layout) with pixels scaled to [0, 1]."""
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lab_dims, lab_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise DataError(f"count mismatch: {img_dims[0]} images vs {lab_dims[0]} labels")
    n = img_dims[0]
    X = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n, -1).astype(np.float64) / 255.0
    y = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)
    n_classes = max(10, int(y.max()) + 1) if n else 10
    recipe = {
        "op": "idx",
        "images": str(images_path),
        "labels": str(labels_path),
        "n": int(n),
    }
    return _root(X, y, n_classes, recipe)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as an IDX file; used to build fixtures."""
    a = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">i", magic) + struct.pack(f">{a.ndim}i", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


@dataclass(frozen=True)
class SubsetSpec:
    """Which rows of a parent to keep.

    Rows come from a seeded permutation of the parent: the first ``skip`` rows
    of the permutation are passed over, then ``count`` (or ``fraction`` of the
    parent) are taken. Equal seeds therefore give nested subsets, and a
    non-zero ``skip`` gives a disjoint one.
    """

    count: int | None = None
    fraction: float | None = None
    split_seed: int = 0
    skip: int = 0
    class_proportions: dict | None = None

    def resolve(self, parent_size: int) -> int:
        if (self.count is None) == (self.fraction is None):
            raise ValueError("give exactly one of count or fraction")
        if self.count is not None:
            k = int(self.count)
        else:
            k = int(round(self.fraction * parent_size))
        if k < 0 or k + self.skip > parent_size:
            raise ValueError(f"subset of {k} (+{self.skip} skipped) exceeds parent size {parent_size}")
        return k

    def to_dict(self) -> dict:
        d = {"split_seed": int(self.split_seed), "skip": int(self.skip)}
        if self.count is not None:
            d["count"] = int(self.count)
        if self.fraction is not None:
            d["fraction"] = float(self.fraction)
        if self.class_proportions is not None:
            d["class_proportions"] = {str(k): float(v) for k, v in self.class_proportions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetSpec":
        cp = d.get("class_proportions")
        return cls(
            count=d.get("count"),
            fraction=d.get("fraction"),
            split_seed=int(d.get("split_seed", 0)),
            skip=int(d.get("skip", 0)),
            class_proportions={int(k): float(v) for k, v in cp.items()} if cp else None,
        )


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("class proportions must be non-negative with positive sum")
    exact = weights / weights.sum() * total
    quota = np.floor(exact).astype(np.int64)
    short = total - int(quota.sum())
    # ties broken by lower class index
    order = np.lexsort((np.arange(weights.size), -(exact - quota)))
    quota[order[:short]] += 1
    return quota


def permutation(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def subset(parent: Dataset, spec: SubsetSpec) -> Dataset:
    k = spec.resolve(len(parent))
    perm = permutation(len(parent), spec.split_seed)[spec.skip:]
    if spec.class_proportions is None:
        idx = perm[:k]
    else:
        weights = np.zeros(parent.n_classes)
        for c, w in spec.class_proportions.items():
            weights[int(c)] = w
        quota = largest_remainder(weights, k)
        picked = []
        labels = parent.labels[perm]
        for c in range(parent.n_classes):
            rows = perm[labels == c][: quota[c]]
            if rows.size < quota[c]:
                raise ValueError(f"class {c} has {rows.size} rows, quota {quota[c]}")
            picked.append(rows)
        chosen = np.concatenate(picked)
        # keep permutation order so the result does not cluster by class
        rank = np.empty(len(parent), dtype=np.int64)
        rank[perm] = np.arange(perm.size)
        idx = chosen[np.argsort(rank[chosen], kind="stable")]
    recipe = {"op": "subset", "parent": parent.recipe, **spec.to_dict()}
    return Dataset(
        parent.features[idx], parent.labels[idx], parent.n_classes, recipe,
        parent.origin[idx], parent.poisoned[idx],
    )


def poison(base: Dataset, source: Dataset, n_poison: int, seed: int) -> Dataset:
    """Append ``n_poison`` rows of ``source`` with labels moved to a random wrong class."""
    if n_poison < 0 or n_poison > len(source):
        raise ValueError(f"n_poison={n_poison} exceeds source size {len(source)}")
    if base.n_classes != source.n_classes:
        raise ValueError("base and source disagree on class count")
    if recipe_id(root_recipe(base.recipe)) == recipe_id(root_recipe(source.recipe)):
        if np.intersect1d(base.origin, source.origin).size:
            raise ValueError("poison source overlaps the base dataset")
    if n_poison == 0:
        return base
    rng = np.random.default_rng(seed)
    C = base.n_classes
    orig = source.labels[:n_poison]
    wrong = (orig + rng.integers(1, C, size=n_poison)) % C
    recipe = {
        "op": "poison",
        "parent": base.recipe,
        "source": source.recipe,
        "n_poison": int(n_poison),
        "seed": int(seed),
    }
    return Dataset(
        np.concatenate([base.features, source.features[:n_poison]]),
        np.concatenate([base.labels, wrong]),
        C,
        recipe,
        np.concatenate([base.origin, source.origin[:n_poison]]),
        np.concatenate([base.poisoned, np.ones(n_poison, dtype=bool)]),
    )


def rebuild(recipe: dict) -> Dataset:
    """Replay a recipe chain from its raw source."""
    op = recipe["op"]
    if op == "swiss_roll":
        return gen_swiss_roll(recipe["n"], recipe["noise"], recipe["seed"])
    if op == "modulo":
        return gen_modulo(recipe["p"])
    if op == "idx":
        return load_idx(recipe["images"], recipe["labels"])
    if op == "subset":
        return subset(rebuild(recipe["parent"]), SubsetSpec.from_dict(recipe))
    if op == "poison":
        return poison(rebuild(recipe["parent"]), rebuild(recipe["source"]), recipe["n_poison"], recipe["seed"])
    raise ValueError(f"unknown dataset op {op!r}")
