"""Persist an experiment run: resolved config echo, result document, tables."""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

from . import __version__
from . import experiments
from .config import ExperimentConfig, dump
from .io import csv_text, dumps_json, radii_rows, write_checkpoint, write_text

OUTPUT_ENV = "BASINVOL_OUTPUT"


class RunExists(FileExistsError):
    pass


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def run_dir(cfg: ExperimentConfig) -> Path:
    return output_root(cfg) / f"{cfg.kind}-{cfg.hash()}"


def execute(cfg: ExperimentConfig, **kwargs) -> tuple[dict, experiments.RunOutput]:
    """Run in memory. Returns the result document (minus nothing) and the raw output."""
    t0 = time.perf_counter()
    out = experiments.RUNNERS[cfg.kind](cfg, **kwargs)
    doc = {
        "config_hash": cfg.hash(),
        "kind": cfg.kind,
        "toolkit_version": __version__,
        "flagged": out.flagged,
        "payload": out.payload,
        "wall_clock_seconds": time.perf_counter() - t0,
    }
    return doc, out


def payload_json(doc: dict) -> str:
    """Canonical text of everything that must be reproducible (timing excluded)."""
    return dumps_json({k: v for k, v in doc.items() if k != "wall_clock_seconds"})


def run(cfg: ExperimentConfig, force: bool = False, **kwargs) -> tuple[Path, dict]:
    target = run_dir(cfg)
    if (target / "result.json").exists() and not force:
        raise RunExists(f"{target} already holds a result; pass --force to overwrite")
    doc, out = execute(cfg, **kwargs)
    target.mkdir(parents=True, exist_ok=True)
    write_text(target / "config.resolved.yaml", dump(cfg))
    for name, rows in out.tables.items():
        write_text(target / f"{name}.csv", csv_text(rows))
    for name, est in out.radii.items():
        write_text(target / "radii" / f"{name}.csv", csv_text(radii_rows(est)))
    for name, spec, params, epoch, seeds in out.checkpoints:
        (target / "checkpoints").mkdir(exist_ok=True)
        write_checkpoint(target / "checkpoints" / f"{name}.ckpt", spec, params, epoch, seeds)
    write_text(target / "result.json", dumps_json(doc) + "\n")
    return target, doc


def read_result(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    return json.loads(path.read_text())
