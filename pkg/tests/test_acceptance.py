"""Acceptance gates. Each test prints one PASS/FAIL line with the measured numbers.

Long swiss-roll and grokking gates run the shipped configs in configs/. The MNIST
parts run only when BASINVOL_MNIST points at a directory holding the four IDX files.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from basinvol import config
from basinvol.analysis import cross_landscape_matrix, fit_power_law
from basinvol.datasets import SubsetSpec, gen_swiss_roll, subset
from basinvol.experiments import fit_model, spec_for
from basinvol.nn import NetworkSpec, forward, init_params, rescale_layer_pair
from basinvol.oracle import toy_grid_volume, toy_mc_volume, toy_volume_closed_form
from basinvol.runner import execute, payload_json
from basinvol.volume import MCConfig, estimate_log_volume, log_unit_ball, volume_of_minimum

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
MNIST = os.environ.get("BASINVOL_MNIST")


def _fmt(v) -> str:
    return "collapsed" if v is None else f"{v:.1f}"


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")


def load(name: str, *overrides: str):
    return config.load(CONFIGS / name, list(overrides))


@pytest.fixture(scope="module")
def oracle_runs():
    mc = MCConfig(K=10_000, threshold=0.2, c_max=4.0, seed=0)
    t0 = time.perf_counter()
    runs = {b: toy_mc_volume(0.2, b, mc) for b in (1.0, 3.0)}
    grid = toy_grid_volume(0.2, 1.0, resolution=2000)
    return runs, grid, time.perf_counter() - t0


def test_c1_oracle_equivalence(oracle_runs):
    runs, grid, elapsed = oracle_runs
    closed = toy_volume_closed_form(0.2)
    mc = math.exp(runs[1.0].log_volume)
    mc_err, grid_err = abs(mc - closed) / closed, abs(grid - closed) / closed
    ok = mc_err < 0.02 and grid_err < 0.01 and elapsed < 60
    report(1, ok, f"closed={closed:.6f} mc={mc:.6f} ({mc_err:.2%}) grid={grid:.6f} ({grid_err:.4%}) "
                  f"time={elapsed:.1f}s")
    assert ok


def test_c2_scale_invariance(oracle_runs):
    runs, _, _ = oracle_runs
    closed = toy_volume_closed_form(0.2)
    spread = abs(math.exp(runs[1.0].log_volume) - math.exp(runs[3.0].log_volume)) / closed
    spec = NetworkSpec(2, (4, 4), 2)
    p = init_params(spec, 0)
    X = np.random.default_rng(0).normal(size=(100, 2))
    diffs = [np.abs(forward(spec, rescale_layer_pair(p, layer, a), X) - forward(spec, p, X)).max()
             for layer in (0, 1) for a in (0.1, 2.0, 10.0)]
    ok = spread < 0.01 and max(diffs) < 1e-9
    report(2, ok, f"|MC(b=1)-MC(b=3)|/closed={spread:.2e} max rescale output diff={max(diffs):.2e}")
    assert ok


def test_c3_unit_ball_identities():
    worst = 0.0
    for n in range(2, 101):
        lhs = math.exp(log_unit_ball(n))
        rhs = math.exp(log_unit_ball(n - 2)) * 2 * math.pi / n
        worst = max(worst, abs(lhs - rhs) / rhs)
    n2 = abs(log_unit_ball(2) - math.log(math.pi))
    ok = worst < 1e-12 and n2 < 1e-15
    report(3, ok, f"max recurrence rel err={worst:.2e} |lnV_2 - ln pi|={n2:.1e}")
    assert ok


@pytest.fixture(scope="module")
def low_threshold_minimum():
    spec = NetworkSpec(2, (16, 16), 2)
    ds = gen_swiss_roll(100, 0.2, 0)
    from basinvol.optim import OptimizerConfig, TrainConfig, train
    res = train(spec, ds, None, init_params(spec, 0), OptimizerConfig(learning_rate=0.01),
                TrainConfig(epochs=3000, batch_size=20, target_loss=0.002))
    return spec, res.final_params, ds


def test_c4_estimator_hygiene(low_threshold_minimum):
    spec, p, ds = low_threshold_minimum
    lo = volume_of_minimum(spec, p, ds, MCConfig(K=100, threshold=0.01, c_max=5.0))
    hi = volume_of_minimum(spec, p, ds, MCConfig(K=100, threshold=0.1, c_max=5.0))
    monotone = all(a.radius <= b.radius for a, b in zip(lo.radii, hi.radii))
    full = volume_of_minimum(spec, p, ds, MCConfig(K=500, threshold=0.1, c_max=5.0))
    head = volume_of_minimum(spec, p, ds, MCConfig(K=50, threshold=0.1, c_max=5.0))
    prefix = full.radii[:50] == head.radii
    radii = np.random.default_rng(0).uniform(0.5, 1.5, size=10**6)
    big = estimate_log_volume(radii, 10**6)
    ok = monotone and prefix and math.isfinite(big) and math.isfinite(lo.log_volume)
    report(4, ok, f"radius(t=0.01)<=radius(t=0.1) for all 100 directions={monotone} "
                  f"50-prefix identical={prefix} logV(n=1e6, 1e6 radii)={big:.6g}")
    assert ok


@pytest.fixture(scope="module")
def poison_run():
    t0 = time.perf_counter()
    doc, _ = execute(load("poison_swiss.yaml"))
    return doc, time.perf_counter() - t0


def test_c5_poisoning(poison_run):
    doc, elapsed = poison_run
    medians = {row["poison_count"]: row["median_log_volume"] for row in doc["payload"]["median_by_count"]}
    clean = medians[0]
    ordered_medians = all(v is not None and v < clean for k, v in medians.items() if k)
    ordered80 = 0
    for seed in doc["payload"]["seeds"]:
        arms = {a["poison_count"]: a for a in seed["arms"]}
        c, p = arms[0]["volume"], arms[80]["volume"]
        if c and p and p["log_volume"] is not None and c["log_volume"] is not None:
            ordered80 += p["log_volume"] < c["log_volume"]
    ok = ordered_medians and ordered80 >= 8 and elapsed < 15 * 60
    report(5, ok, f"median logV by count={ {k: _fmt(v) for k, v in medians.items()} } "
                  f"seeds ordered at 80={ordered80}/10 flagged={doc['flagged']} time={elapsed / 60:.1f}min")
    assert ok


@pytest.fixture(scope="module")
def inversion_run():
    t0 = time.perf_counter()
    doc, out = execute(load("inversion_swiss.yaml"))
    return doc, out, time.perf_counter() - t0


def test_c6_low_data_inversion(inversion_run):
    doc, _, elapsed = inversion_run
    inverted = better = 0
    for seed in doc["payload"]["seeds"]:
        cl = seed["cross_landscape"]
        small_col = cl["cols"].index("20")
        v_small = cl["log_volume"][cl["rows"].index("20")][small_col]
        v_big = cl["log_volume"][cl["rows"].index("400")][small_col]
        # a collapsed large-data cell would count trivially; require finite values
        inverted += v_small is not None and v_big is not None and v_small > v_big
        acc_small, acc_big = (t["test_accuracy"] for t in seed["train"])
        better += acc_big > acc_small
    ok = inverted >= 8 and better >= 8 and elapsed < 20 * 60
    report(6, ok, f"small-data minimum larger in small landscape: {inverted}/10; "
                  f"large-data minimum more accurate: {better}/10; time={elapsed / 60:.1f}min")
    assert ok


def test_c7_radii_separation_desk():
    doc, out = execute(load("radii_swiss.yaml"))
    small = out.radii["m0_s0_n20_on20"]
    big = out.radii["m0_s0_n800_on20"]
    rs, rb = small.radius_values(), big.radius_values()
    ok = (not big.collapsed) and float(np.median(rb)) < float(np.median(rs))
    report(7, ok, f"desk swiss roll 20 vs 800 in the 20-point landscape (K=500): median {np.median(rb):.4f} < "
                  f"{np.median(rs):.4f}; max(800)={rb.max():.4f} min(20)={rs.min():.4f} "
                  f"(strict separation {'holds' if rb.max() < rs.min() else 'does not hold'})")
    assert ok


def _mnist_paths():
    d = Path(MNIST)
    return [f"dataset.images={d / 'train-images-idx3-ubyte'}", f"dataset.labels={d / 'train-labels-idx1-ubyte'}",
            f"dataset.test_images={d / 't10k-images-idx3-ubyte'}", f"dataset.test_labels={d / 't10k-labels-idx1-ubyte'}"]


@pytest.mark.skipif(not MNIST, reason="set BASINVOL_MNIST to the MNIST IDX directory (optional nightly)")
def test_c7_radii_separation_mnist():
    cfg = load("scaling_mnist.yaml", *_mnist_paths(), "dataset.fractions=[]", "dataset.sizes=[60, 60000]",
               "seeds.model_seeds=[0]", "seeds.split_seeds=[0]")
    _, out = execute(cfg)
    rs = out.radii["m0_s0_n60_on60"].radius_values()
    rb = out.radii["m0_s0_n60000_on60"].radius_values()
    ok = rb.max() < rs.min()
    report(7, ok, f"MNIST 60 vs 60,000: max(60k)={rb.max():.4f} < min(60)={rs.min():.4f}")
    assert ok


def test_c8_fit_exact_fast_gate():
    n = 235_146
    pts = [(d, n * (-0.1835 * math.log(d) + 3.0)) for d in (60, 180, 600, 1800, 6000)]
    fit = fit_power_law(pts, n)
    ok = abs(fit.alpha + 0.1835) < 1e-12 and abs(fit.r_squared - 1.0) < 1e-12
    report(8, ok, f"fast gate: synthetic collinear fit alpha={fit.alpha:.15f} r2={fit.r_squared:.15f}")
    assert ok


@pytest.mark.skipif(not MNIST, reason="set BASINVOL_MNIST to the MNIST IDX directory (optional nightly)")
def test_c8_scaling_law_mnist():
    doc, _ = execute(load("scaling_mnist.yaml", *_mnist_paths()))
    fit = doc["payload"]["fit"]
    ok = fit["alpha"] < 0 and fit["r_squared"] > 0.9 and abs(fit["alpha"] + 0.1835) < 0.08
    report(8, ok, f"MNIST alpha={fit['alpha']:.4f} r2={fit['r_squared']:.3f}")
    assert ok


def test_c9_grokking():
    doc, _ = execute(load("grok_modulo.yaml"))
    (seed,) = doc["payload"]["seeds"]
    rows = {r["epoch"]: r for r in seed["series"]}
    a, b = rows[500], rows[5000]
    ok = (a["train_loss"] <= 0.01 and b["train_loss"] <= 0.01 and b["test_accuracy"] > a["test_accuracy"]
          and a["log_volume"] is not None and b["log_volume"] is not None and b["log_volume"] < a["log_volume"])
    report(9, ok, f"p=97: train loss {a['train_loss']:.2e} -> {b['train_loss']:.2e}, "
                  f"test acc {a['test_accuracy']:.3f} -> {b['test_accuracy']:.3f}, "
                  f"logV {_fmt(a['log_volume'])} -> {_fmt(b['log_volume'])}")
    assert ok


DETERMINISM_CORPUS = ["det_oracle.yaml", "det_volume.yaml", "det_poison.yaml", "det_scan.yaml", "det_grok.yaml"]


def test_c10_determinism():
    same = []
    for name in DETERMINISM_CORPUS:
        cfg = config.load(CONFIGS / "ci" / name)
        first = payload_json(execute(cfg)[0])
        second = payload_json(execute(config.load(CONFIGS / "ci" / name))[0])
        same.append(first == second)
    ok = all(same)
    report(10, ok, f"{sum(same)}/{len(same)} configs reproduced bit-identical payloads")
    assert ok


def test_c11_collapse():
    pool = gen_swiss_roll(2000, 1.0, 0)
    small = subset(pool, SubsetSpec(count=20, split_seed=0))
    disjoint = subset(pool, SubsetSpec(count=400, split_seed=0, skip=20))
    cfg = load("inversion_swiss.yaml")
    spec = spec_for(cfg, small)
    res = fit_model(cfg, spec, small, None, 0, 0)
    mc = MCConfig(K=50, threshold=0.1, c_max=5.0)
    m = cross_landscape_matrix([("20", spec, res.final_params)], [("20", small), ("400-disjoint", disjoint)], mc)
    own, other = m.estimates[0]
    from basinvol.nn import loss_mean
    base = loss_mean(spec, res.final_params, disjoint)
    ok = math.isfinite(own.log_volume) and base > 0.1 and other.collapsed and m.to_dict()["collapsed"][0] == [False, True]
    report(11, ok, f"loss on disjoint landscape={base:.3f} -> logV={other.log_volume} marked collapsed="
                   f"{m.to_dict()['collapsed'][0][1]}; own landscape logV={own.log_volume:.1f}")
    assert ok
