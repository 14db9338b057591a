"""Experiment kinds: each takes a resolved config and returns a RunOutput.

Nothing here touches the filesystem except to read input data; the runner
owns persistence.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import datasets as dsets
from .analysis import cross_landscape_matrix, fit_power_law, radii_histogram, summarize_radii
from .config import ExperimentConfig
from .datasets import Dataset, SubsetSpec
from .io import radii_rows
from .nn import NetworkSpec, init_params, loss_mean
from .optim import TrainingDiverged, TrainResult, evaluate_accuracy, train
from .oracle import oracle_report
from .volume import (Direction, MCConfig, VolumeEstimate, landscape_slice, plane_through,
                     sample_direction, slice_coords, volume_of_minimum)

log = logging.getLogger(__name__)


@dataclass
class RunOutput:
    payload: dict
    tables: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)  # (name, spec, params, epoch, seeds)
    radii: dict = field(default_factory=dict)  # name -> VolumeEstimate
    flagged: int = 0


# --- data plumbing -------------------------------------------------------

def load_pool(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.source == "swiss_roll":
        return dsets.gen_swiss_roll(d.n, d.noise, d.seed)
    if d.source == "modulo":
        return dsets.gen_modulo(d.p)
    return dsets.load_idx(d.images, d.labels)


def _resolve_size(cfg: ExperimentConfig, pool: Dataset, size=None, fraction=None) -> int:
    if size is not None:
        return int(size)
    if fraction is not None:
        return int(round(float(fraction) * len(pool)))
    d = cfg.dataset
    if d.train_size is not None:
        return d.train_size
    if d.train_fraction is not None:
        return int(round(d.train_fraction * len(pool)))
    return len(pool) // 2


def _test_size(cfg: ExperimentConfig, pool: Dataset, largest_train: int) -> int:
    if cfg.dataset.test_size is not None:
        return cfg.dataset.test_size
    return len(pool) - largest_train


def test_set(cfg: ExperimentConfig, pool: Dataset, split_seed: int, largest_train: int) -> Dataset | None:
    """Held-out rows: the tail of the split permutation, or the separate IDX test files."""
    d = cfg.dataset
    if d.source == "idx" and d.test_images and d.test_labels:
        test = dsets.load_idx(d.test_images, d.test_labels)
        if d.test_size is not None:
            test = dsets.subset(test, SubsetSpec(count=d.test_size, split_seed=split_seed))
        return test
    k = _test_size(cfg, pool, largest_train)
    if k <= 0:
        return None
    if k + largest_train > len(pool):
        raise ValueError(f"train ({largest_train}) plus test ({k}) rows exceed the pool ({len(pool)})")
    return dsets.subset(pool, SubsetSpec(count=k, split_seed=split_seed, skip=len(pool) - k))


def train_subset(pool: Dataset, count: int, split_seed: int, class_proportions=None) -> Dataset:
    return dsets.subset(pool, SubsetSpec(count=count, split_seed=split_seed, class_proportions=class_proportions))


def spec_for(cfg: ExperimentConfig, data: Dataset) -> NetworkSpec:
    return cfg.network_spec(int(data.features.shape[1]), data.n_classes)


def fit_model(cfg: ExperimentConfig, spec: NetworkSpec, train_ds: Dataset, test_ds: Dataset | None,
              model_seed: int, split_seed: int) -> TrainResult | None:
    try:
        return train(spec, train_ds, test_ds, init_params(spec, model_seed), cfg.optimizer_config(),
                     cfg.train_config(shuffle_seed=1000003 * model_seed + split_seed))
    except TrainingDiverged as exc:
        log.warning("model seed %d / split seed %d: %s", model_seed, split_seed, exc)
        return None


def train_summary(res: TrainResult | None) -> dict:
    if res is None:
        return {"diverged": True}
    return {
        "diverged": False,
        "epochs": res.epochs_completed,
        "final_train_loss": res.final_train_loss,
        "test_loss": res.test_loss_curve[-1] if res.test_loss_curve else None,
        "test_accuracy": res.test_accuracy_curve[-1] if res.test_accuracy_curve else None,
        "reached_target": res.reached_target,
    }


def _median(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return statistics.median(vals) if vals else None


def _seed_tag(m: int, s: int) -> str:
    return f"m{m}_s{s}"


# --- experiment kinds ----------------------------------------------------

def run_train(cfg: ExperimentConfig) -> RunOutput:
    pool = load_pool(cfg)
    out = RunOutput({"seeds": []})
    curves = []
    for m, s in cfg.seeds.grid():
        n_train = _resolve_size(cfg, pool)
        tr = train_subset(pool, n_train, s, cfg.dataset.class_proportions)
        te = test_set(cfg, pool, s, n_train)
        spec = spec_for(cfg, tr)
        res = fit_model(cfg, spec, tr, te, m, s)
        out.payload["seeds"].append({"model_seed": m, "split_seed": s, "train_size": len(tr),
                                     "dataset_id": tr.id, **train_summary(res)})
        if res is None:
            out.flagged += 1
            continue
        seeds = {"model_seed": m, "split_seed": s}
        for epoch, params in res.checkpoints:
            out.checkpoints.append((f"{_seed_tag(m, s)}_e{epoch}", spec, params, epoch, seeds))
        out.checkpoints.append((f"{_seed_tag(m, s)}_final", spec, res.final_params, res.epochs_completed, seeds))
        for e, (a, b, c) in enumerate(zip(res.train_loss_curve, res.test_loss_curve, res.test_accuracy_curve), 1):
            curves.append({"model_seed": m, "split_seed": s, "epoch": e, "train_loss": a,
                           "test_loss": b, "test_accuracy": c})
    out.payload["n_params"] = spec.n_params
    out.tables["curves"] = curves
    return out


def _volume_record(est: VolumeEstimate) -> dict:
    d = est.to_dict()
    d["summary"] = summarize_radii(est)
    return d


def run_volume(cfg: ExperimentConfig, checkpoint=None) -> RunOutput:
    """Train (or load) a minimum per seed and measure it in its training landscape."""
    pool = load_pool(cfg)
    mc = cfg.mc_config()
    out = RunOutput({"seeds": []})
    hist_rows = []
    for m, s in cfg.seeds.grid():
        n_train = _resolve_size(cfg, pool)
        tr = train_subset(pool, n_train, s, cfg.dataset.class_proportions)
        te = test_set(cfg, pool, s, n_train)
        if checkpoint is not None:
            spec, params, _ = checkpoint
            summary = {"checkpoint": True}
        else:
            spec = spec_for(cfg, tr)
            res = fit_model(cfg, spec, tr, te, m, s)
            if res is None:
                out.flagged += 1
                out.payload["seeds"].append({"model_seed": m, "split_seed": s, "diverged": True})
                continue
            params = res.final_params
            summary = train_summary(res)
        est = volume_of_minimum(spec, params, tr, mc)
        tag = _seed_tag(m, s)
        out.radii[tag] = est
        out.payload["seeds"].append({"model_seed": m, "split_seed": s, "train": summary,
                                     "volume": _volume_record(est)})
        for row in radii_histogram(est, 20):
            hist_rows.append({"model_seed": m, "split_seed": s, **row})
    out.payload["n_params"] = spec.n_params
    out.tables["radii_histogram"] = hist_rows
    return out


def run_poison_scan(cfg: ExperimentConfig) -> RunOutput:
    pool = load_pool(cfg)
    mc = cfg.mc_config()
    counts = sorted({int(c) for c in cfg.dataset.poison_counts} | {0})
    out = RunOutput({"poison_counts": counts, "seeds": []})
    rows = []
    for m, s in cfg.seeds.grid():
        n_base = _resolve_size(cfg, pool)
        base = train_subset(pool, n_base, s)
        source = dsets.subset(pool, SubsetSpec(count=max(counts), split_seed=s, skip=n_base))
        te = test_set(cfg, pool, s, n_base + max(counts))
        spec = spec_for(cfg, base)
        arms = []
        for k in counts:
            data = dsets.poison(base, source, k, seed=s)
            res = fit_model(cfg, spec, data, te, m, s)
            entry = {"poison_count": k, "train": train_summary(res)}
            flagged = res is None
            if res is not None:
                base_loss = loss_mean(spec, res.final_params, base)
                entry["base_loss"] = base_loss
                # a poisoned arm must still sit inside the base-data basin
                flagged = not base_loss <= mc.threshold
            entry["flagged"] = flagged
            if flagged:
                out.flagged += 1
                entry["volume"] = None
            else:
                est = volume_of_minimum(spec, res.final_params, base, mc)
                out.radii[f"{_seed_tag(m, s)}_p{k}"] = est
                entry["volume"] = _volume_record(est)
            arms.append(entry)
            vol = entry["volume"]
            rows.append({
                "model_seed": m, "split_seed": s, "poison_count": k,
                "log_volume": vol["log_volume"] if vol else None,
                "test_accuracy": entry["train"].get("test_accuracy"),
                "flagged": int(flagged),
            })
        out.payload["seeds"].append({"model_seed": m, "split_seed": s, "arms": arms})
    medians = []
    for k in counts:
        vals = [r["log_volume"] for r in rows if r["poison_count"] == k and not r["flagged"]]
        excluded = sum(1 for r in rows if r["poison_count"] == k and r["flagged"])
        medians.append({"poison_count": k, "median_log_volume": _median(vals), "n": len(vals), "excluded": excluded})
    out.payload["n_params"] = spec.n_params
    out.payload["median_by_count"] = medians
    out.tables["poison_volumes"] = rows
    out.tables["poison_summary"] = medians
    return out


def _scan_sizes(cfg: ExperimentConfig, pool: Dataset) -> list[int]:
    d = cfg.dataset
    if d.sizes:
        return sorted(int(x) for x in d.sizes)
    if d.fractions:
        return sorted(int(round(float(f) * len(pool))) for f in d.fractions)
    raise ValueError("dataset.sizes or dataset.fractions required")


def run_data_scan(cfg: ExperimentConfig) -> RunOutput:
    """Train at nested dataset sizes and measure every minimum in every landscape."""
    pool = load_pool(cfg)
    mc = cfg.mc_config()
    sizes = _scan_sizes(cfg, pool)
    out = RunOutput({"sizes": sizes, "seeds": []})
    matrix_rows, size_rows = [], []
    points = []
    for m, s in cfg.seeds.grid():
        te = test_set(cfg, pool, s, sizes[-1])
        subsets = [train_subset(pool, n, s) for n in sizes]
        spec = spec_for(cfg, subsets[0])
        models, summaries = [], []
        for n, tr in zip(sizes, subsets):
            res = fit_model(cfg, spec, tr, te, m, s)
            summaries.append(train_summary(res))
            if res is None:
                out.flagged += 1
                continue
            models.append((str(n), spec, res.final_params))
        landscapes = [(str(n), tr) for n, tr in zip(sizes, subsets)]
        cross = cross_landscape_matrix(models, landscapes, mc)
        for i, (label, _, _) in enumerate(models):
            for j, (lab2, _) in enumerate(landscapes):
                est = cross.estimates[i][j]
                matrix_rows.append({
                    "model_seed": m, "split_seed": s, "trained_size": int(label), "landscape_size": int(lab2),
                    "log_volume": None if est.collapsed else est.log_volume, "collapsed": int(est.collapsed),
                    "censored_fraction": est.censored_fraction,
                    "median_radius": float(np.median(est.radius_values())),
                })
                out.radii[f"{_seed_tag(m, s)}_n{label}_on{lab2}"] = est
                if label == lab2:
                    points.append((int(label), est.log_volume))
        for n, summ in zip(sizes, summaries):
            own = next((r for r in matrix_rows if r["model_seed"] == m and r["split_seed"] == s
                        and r["trained_size"] == n and r["landscape_size"] == n), None)
            size_rows.append({"model_seed": m, "split_seed": s, "size": n,
                              "log_volume": own["log_volume"] if own else None,
                              "test_accuracy": summ.get("test_accuracy"),
                              "final_train_loss": summ.get("final_train_loss")})
        out.payload["seeds"].append({"model_seed": m, "split_seed": s, "train": summaries,
                                     "cross_landscape": cross.to_dict()})
    out.payload["n_params"] = spec.n_params
    try:
        out.payload["fit"] = fit_power_law(points, spec.n_params).to_dict()
    except ValueError as exc:
        out.payload["fit"] = {"error": str(exc)}
    out.tables["cross_landscape"] = matrix_rows
    out.tables["volume_by_size"] = size_rows
    return out


def run_grok(cfg: ExperimentConfig) -> RunOutput:
    """Volume of the training-set minimum at each checkpoint epoch."""
    if not cfg.train.checkpoint_epochs:
        raise ValueError("train.checkpoint_epochs required for grok")
    pool = load_pool(cfg)
    mc = cfg.mc_config()
    out = RunOutput({"seeds": []})
    rows = []
    for m, s in cfg.seeds.grid():
        n_train = _resolve_size(cfg, pool)
        tr = train_subset(pool, n_train, s)
        te = test_set(cfg, pool, s, n_train)
        spec = spec_for(cfg, tr)
        res = fit_model(cfg, spec, tr, te, m, s)
        if res is None:
            out.flagged += 1
            out.payload["seeds"].append({"model_seed": m, "split_seed": s, "diverged": True})
            continue
        series = []
        for epoch, params in res.checkpoints:
            est = volume_of_minimum(spec, params, tr, mc)
            out.radii[f"{_seed_tag(m, s)}_e{epoch}"] = est
            out.checkpoints.append((f"{_seed_tag(m, s)}_e{epoch}", spec, params, epoch,
                                    {"model_seed": m, "split_seed": s}))
            row = {
                "model_seed": m, "split_seed": s, "epoch": epoch,
                "train_loss": res.train_loss_curve[epoch - 1] if epoch else loss_mean(spec, params, tr),
                "test_accuracy": res.test_accuracy_curve[epoch - 1] if epoch and te is not None else
                (evaluate_accuracy(spec, params, te) if te is not None else None),
                "log_volume": None if est.collapsed else est.log_volume,
                "collapsed": int(est.collapsed),
            }
            series.append(row)
            rows.append(row)
        out.payload["seeds"].append({"model_seed": m, "split_seed": s, "train_size": len(tr), "series": series})
    out.payload["n_params"] = spec.n_params
    out.tables["grok_series"] = rows
    return out


def run_oracle(cfg: ExperimentConfig) -> RunOutput:
    o = cfg.oracle
    mc = MCConfig(K=cfg.mc.K, threshold=o.s, c_max=o.c_max, scan_steps=cfg.mc.scan_steps,
                  bisect_iters=cfg.mc.bisect_iters, seed=cfg.seeds.mc_seed,
                  filter_normalize=cfg.mc.filter_normalize, normalize_directions=cfg.mc.normalize_directions)
    report = oracle_report(o.s, o.b, mc, o.resolution)
    rows = [{"s": report["s"], "closed_form": report["closed_form"], **{k: v for k, v in r.items()
             if k not in ("critical_points", "extent")}} for r in report["per_b"]]
    return RunOutput(report, {"oracle": rows})


def _points_from_result(doc: dict, per_seed: bool) -> tuple[list, int]:
    payload = doc["payload"]
    points = []
    for seed in payload["seeds"]:
        cl = seed["cross_landscape"]
        for i, row_label in enumerate(cl["rows"]):
            j = cl["cols"].index(row_label)
            points.append((int(row_label), cl["log_volume"][i][j]))
    return points, payload["n_params"]


def run_fit(cfg: ExperimentConfig, result_doc: dict | None = None) -> RunOutput:
    f = cfg.fit
    if result_doc is not None:
        points, n_params = _points_from_result(result_doc, f.per_seed)
    else:
        points = [tuple(p) for p in f.points]
        n_params = f.n_params
    if f.n_params is not None:
        n_params = f.n_params
    if not n_params:
        raise ValueError("fit.n_params required when fitting raw points")
    fit = fit_power_law(points, n_params, average_seeds=not f.per_seed)
    return RunOutput({"fit": fit.to_dict()}, {"fit_points": [{"size": d, "log_volume": v} for d, v in fit.points]})


def run_slice(cfg: ExperimentConfig) -> RunOutput:
    pool = load_pool(cfg)
    sl = cfg.slice
    out = RunOutput({"seeds": []})
    rows = []
    coords = slice_coords(sl.half_width, sl.steps)
    for m, s in cfg.seeds.grid():
        if sl.mode == "random":
            n_train = _resolve_size(cfg, pool)
            tr = train_subset(pool, n_train, s)
            spec = spec_for(cfg, tr)
            res = fit_model(cfg, spec, tr, test_set(cfg, pool, s, n_train), m, s)
            if res is None:
                out.flagged += 1
                continue
            p = res.final_params
            da = sample_direction(p, cfg.seeds.mc_seed, 0, cfg.mc.filter_normalize, cfg.mc.normalize_directions)
            db = sample_direction(p, cfg.seeds.mc_seed, 1, cfg.mc.filter_normalize, cfg.mc.normalize_directions)
            grid = landscape_slice(spec, p, da, db, tr, sl.half_width, sl.steps)
            out.payload["seeds"].append({"model_seed": m, "split_seed": s, "grid": grid.tolist()})
            rows += [{"model_seed": m, "split_seed": s, "landscape": len(tr), "a": a, "b": b, "loss": grid[i, j]}
                     for i, a in enumerate(coords) for j, b in enumerate(coords)]
            continue
        sizes = _scan_sizes(cfg, pool)[:3]
        if len(sizes) != 3:
            raise ValueError("minima slices need three dataset sizes")
        subsets = [train_subset(pool, n, s) for n in sizes]
        spec = spec_for(cfg, subsets[0])
        results = [fit_model(cfg, spec, tr, None, m, s) for tr in subsets]
        if any(r is None for r in results):
            out.flagged += 1
            continue
        u, v, pos = plane_through(*(r.final_params for r in results))
        anchor = results[0].final_params
        entry = {"model_seed": m, "split_seed": s, "sizes": sizes, "minima_coords": pos, "grids": [], "nearest": []}
        for n, tr in zip(sizes, subsets):
            grid = landscape_slice(spec, anchor, u, v, tr, sl.half_width, sl.steps)
            entry["grids"].append(grid.tolist())
            entry["nearest"].append([float(grid[np.abs(coords - a).argmin(), np.abs(coords - b).argmin()])
                                     for a, b in pos])
            rows += [{"model_seed": m, "split_seed": s, "landscape": n, "a": a, "b": b, "loss": grid[i, j]}
                     for i, a in enumerate(coords) for j, b in enumerate(coords)]
        out.payload["seeds"].append(entry)
    out.tables["slice"] = rows
    return out


def run_imbalance(cfg: ExperimentConfig) -> RunOutput:
    """Train on a class-imbalanced subset; measure it on balanced and imbalanced sub-landscapes."""
    if not cfg.dataset.class_proportions:
        raise ValueError("dataset.class_proportions required for imbalance")
    pool = load_pool(cfg)
    mc = cfg.mc_config()
    sizes = sorted(int(x) for x in cfg.dataset.sizes)
    out = RunOutput({"sizes": sizes, "seeds": []})
    rows = []
    for m, s in cfg.seeds.grid():
        n_train = _resolve_size(cfg, pool)
        tr = train_subset(pool, n_train, s, cfg.dataset.class_proportions)
        te = test_set(cfg, pool, s, n_train)
        spec = spec_for(cfg, tr)
        res = fit_model(cfg, spec, tr, te, m, s)
        if res is None:
            out.flagged += 1
            continue
        uniform = {c: 1.0 for c in range(tr.n_classes)}
        entry = {"model_seed": m, "split_seed": s, "train": train_summary(res), "landscapes": []}
        for n in sizes:
            for kind, props in (("balanced", uniform), ("imbalanced", None)):
                try:
                    land = dsets.subset(tr, SubsetSpec(count=n, split_seed=s, class_proportions=props))
                except ValueError as exc:
                    entry["landscapes"].append({"size": n, "kind": kind, "error": str(exc)})
                    continue
                est = volume_of_minimum(spec, res.final_params, land, mc)
                lv = None if est.collapsed else est.log_volume
                entry["landscapes"].append({"size": n, "kind": kind, "log_volume": lv,
                                            "class_counts": land.class_counts().tolist()})
                rows.append({"model_seed": m, "split_seed": s, "size": n, "kind": kind, "log_volume": lv,
                             "collapsed": int(est.collapsed)})
        out.payload["seeds"].append(entry)
    out.payload["n_params"] = spec.n_params
    out.tables["imbalance"] = rows
    return out


RUNNERS = {
    "train": run_train,
    "volume": run_volume,
    "poison_scan": run_poison_scan,
    "data_scan": run_data_scan,
    "grok": run_grok,
    "oracle": run_oracle,
    "fit": run_fit,
    "slice": run_slice,
    "imbalance": run_imbalance,
}
