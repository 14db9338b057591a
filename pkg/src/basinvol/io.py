"""File formats: checkpoints, dataset caches, result documents and CSV tables.

Checkpoints and dataset caches share one layout: a single JSON header line,
then one decimal float64 per line (``repr`` round-trips exactly).
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .datasets import Dataset, DataError
from .nn import NetworkSpec, ParameterVector


def _write_values(fh, values: np.ndarray) -> None:
    fh.write("\n".join(repr(float(v)) for v in values))
    fh.write("\n")


def _read_values(lines, n: int, path) -> np.ndarray:
    vals = np.array([float(x) for x in lines if x.strip()], dtype=np.float64)
    if vals.size != n:
        raise DataError(f"{path}: header says {n} values, found {vals.size}")
    return vals


def write_checkpoint(path, spec: NetworkSpec, params: ParameterVector, epoch: int, seeds: dict | None = None) -> None:
    header = {
        "format": "basinvol-checkpoint/1",
        "spec": spec.to_dict(),
        "seeds": seeds or {},
        "epoch": int(epoch),
        "n": len(params),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        _write_values(fh, params.values)


def read_checkpoint(path) -> tuple[NetworkSpec, ParameterVector, dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty checkpoint")
    header = json.loads(lines[0])
    spec = NetworkSpec.from_dict(header["spec"])
    if header["n"] != spec.n_params:
        raise DataError(f"{path}: n={header['n']} does not match spec ({spec.n_params})")
    values = _read_values(lines[1:], header["n"], path)
    return spec, ParameterVector(values, spec.layout()), header


def write_dataset(path, ds: Dataset) -> None:
    header = {
        "format": "basinvol-dataset/1",
        "rows": len(ds),
        "cols": int(ds.features.shape[1]),
        "n_classes": ds.n_classes,
        "id": ds.id,
        "recipe": ds.recipe,
        "labels": ds.labels.tolist(),
        "origin": ds.origin.tolist(),
        "poisoned": np.flatnonzero(ds.poisoned).tolist(),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        _write_values(fh, ds.features.ravel())


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    rows, cols = header["rows"], header["cols"]
    X = _read_values(lines[1:], rows * cols, path).reshape(rows, cols)
    poisoned = np.zeros(rows, dtype=bool)
    poisoned[header["poisoned"]] = True
    return Dataset(X, np.array(header["labels"], dtype=np.int64), header["n_classes"], header["recipe"],
                   np.array(header["origin"], dtype=np.int64), poisoned)


def jsonable(obj):
    """Recursively swap non-finite floats for None and numpy scalars for Python ones."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=1, sort_keys=True, allow_nan=False)


def csv_text(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else v) for k, v in jsonable(row).items()})
    return buf.getvalue()


def radii_rows(estimate) -> list[dict]:
    return [
        {"index": r.direction_index, "radius": repr(r.radius), "censored": int(r.censored),
         "crossing_step": r.crossing_step}
        for r in estimate.radii
    ]


def write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
