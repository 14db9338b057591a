import json

import numpy as np
import pytest
import yaml

from basinvol import config
from basinvol.cli import main
from basinvol.datasets import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, write_idx
from basinvol.io import read_checkpoint, read_dataset
from basinvol.runner import execute, payload_json

TINY = {
    "kind": "volume",
    "dataset": {"source": "swiss_roll", "n": 120, "noise": 0.1, "train_size": 40, "test_size": 40},
    "model": {"hidden_dims": [8]},
    "optimizer": {"learning_rate": 0.01},
    "train": {"epochs": 40, "batch_size": 20},
    "mc": {"K": 6, "c_max": 4.0, "scan_steps": 10, "bisect_iters": 5},
}


def write_cfg(tmp_path, data, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture
def out(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("BASINVOL_OUTPUT", str(root))
    return root


def test_defaults_are_explicit():
    cfg = config.from_dict({"kind": "volume"})
    assert cfg.mc.K == 500 and cfg.mc.threshold == 0.1 and cfg.mc.scan_steps == 100
    assert cfg.optimizer.learning_rate == 1e-3
    grok = config.from_dict({"kind": "grok", "dataset": {"source": "modulo"}})
    assert grok.mc.threshold == 0.01 and grok.model.loss_kind == "mse_onehot"


def test_unknown_field_rejected():
    with pytest.raises(config.ConfigError, match="unknown field"):
        config.from_dict({"kind": "volume", "mc": {"KK": 3}})
    with pytest.raises(config.ConfigError, match="kind"):
        config.from_dict({"kind": "nope"})
    with pytest.raises(config.ConfigError, match="seeds"):
        config.from_dict({"kind": "volume", "seeds": {"model_seeds": []}})


def test_overrides_and_echo_roundtrip(tmp_path):
    cfg = config.from_dict(TINY, ["mc.K=9", "seeds.model_seeds=[1, 2]"])
    assert cfg.mc.K == 9 and cfg.seeds.model_seeds == [1, 2]
    echo = write_cfg(tmp_path, yaml.safe_load(config.dump(cfg)), "echo.yaml")
    again = config.load(echo)
    assert again.resolved_dict() == cfg.resolved_dict() and again.hash() == cfg.hash()


def test_seed_grid_modes():
    s = config.SeedsBlock([0, 1], [5, 6])
    assert s.grid() == [(0, 5), (0, 6), (1, 5), (1, 6)]
    assert config.SeedsBlock([0, 1], [5, 6], mode="zip").grid() == [(0, 5), (1, 6)]


def test_volume_run_writes_files_and_is_deterministic(tmp_path, out):
    path = write_cfg(tmp_path, TINY)
    assert main(["volume", str(path)]) == 0
    (run,) = out.iterdir()
    assert run.name.startswith("volume-")
    names = {p.name for p in run.iterdir()}
    assert {"config.resolved.yaml", "result.json", "radii_histogram.csv", "radii"} <= names
    first = json.loads((run / "result.json").read_text())
    assert first["payload"]["seeds"][0]["volume"]["K"] == 6
    # refuses to overwrite, then reruns identically with --force
    assert main(["volume", str(path)]) == 2
    assert main(["volume", str(path), "--force"]) == 0
    second = json.loads((run / "result.json").read_text())
    first.pop("wall_clock_seconds"), second.pop("wall_clock_seconds")
    assert first == second


def test_train_then_volume_from_checkpoint(tmp_path, out):
    cfg = dict(TINY, kind="train")
    assert main(["train", str(write_cfg(tmp_path, cfg))]) == 0
    (run,) = out.iterdir()
    ckpt = next((run / "checkpoints").glob("*_final.ckpt"))
    spec, params, _ = read_checkpoint(ckpt)
    assert spec.hidden_dims == (8,)
    assert main(["volume", str(write_cfg(tmp_path, TINY, "v.yaml")), "--checkpoint", str(ckpt)]) == 0


def test_exit_codes(tmp_path, out):
    assert main(["volume", str(write_cfg(tmp_path, {"kind": "volume", "mc": {"K": -1}}))]) == 2
    bad = {"kind": "volume", "dataset": {"source": "idx", "images": str(tmp_path / "x"), "labels": str(tmp_path / "y")}}
    assert main(["volume", str(write_cfg(tmp_path, bad, "b.yaml"))]) == 3
    diverge = dict(TINY, optimizer={"kind": "sgd", "learning_rate": 1e8}, model={"hidden_dims": [8], "loss_kind": "mse_onehot"})
    assert main(["volume", str(write_cfg(tmp_path, diverge, "d.yaml"))]) == 4


def test_gen_data(tmp_path, out):
    target = tmp_path / "pool.txt"
    assert main(["gen-data", str(write_cfg(tmp_path, TINY)), "-o", str(target)]) == 0
    assert len(read_dataset(target)) == 120


def test_idx_source(tmp_path, out):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "img", rng.integers(0, 256, size=(60, 3, 3)), IDX_IMAGES_MAGIC)
    write_idx(tmp_path / "lab", np.arange(60) % 3, IDX_LABELS_MAGIC)
    cfg = dict(TINY, kind="train", dataset={"source": "idx", "images": str(tmp_path / "img"),
                                            "labels": str(tmp_path / "lab"), "train_size": 30})
    assert main(["train", str(write_cfg(tmp_path, cfg))]) == 0


def test_fit_from_points_and_result(tmp_path, out):
    cfg = {"kind": "fit", "fit": {"points": [[10, -5.0], [100, -7.0]], "n_params": 2}}
    doc, _ = execute(config.from_dict(cfg))
    assert doc["payload"]["fit"]["alpha"] == pytest.approx(-2.0 / 2 / np.log(10))
    scan = dict(TINY, kind="data_scan", dataset=dict(TINY["dataset"], sizes=[20, 40]),
                model={"hidden_dims": [16, 16]}, train={"epochs": 600, "batch_size": 10, "target_loss": 0.05})
    scan_doc, _ = execute(config.from_dict(scan))
    fit_doc, _ = execute(config.from_dict({"kind": "fit"}), result_doc=scan_doc)
    assert fit_doc["payload"]["fit"]["n_params"] == scan_doc["payload"]["n_params"]


def test_every_kind_runs(tmp_path):
    small_mc = {"K": 4, "c_max": 4.0, "scan_steps": 8, "bisect_iters": 4}
    cases = [
        dict(TINY, kind="poison_scan", dataset=dict(TINY["dataset"], train_size=30, poison_counts=[4])),
        dict(TINY, kind="data_scan", dataset=dict(TINY["dataset"], sizes=[10, 20, 40])),
        {"kind": "grok", "dataset": {"source": "modulo", "p": 5, "train_fraction": 0.6},
         "model": {"hidden_dims": [8]}, "train": {"epochs": 6, "batch_size": 15, "checkpoint_epochs": [0, 3, 6]},
         "mc": small_mc},
        {"kind": "oracle", "mc": {"K": 50}, "oracle": {"resolution": 100}},
        dict(TINY, kind="slice", slice={"half_width": 0.5, "steps": 2}),
        dict(TINY, kind="slice", dataset=dict(TINY["dataset"], sizes=[10, 20, 40]),
             slice={"half_width": 0.5, "steps": 2, "mode": "minima"}),
        dict(TINY, kind="imbalance", dataset=dict(TINY["dataset"], class_proportions={0: 3, 1: 1}, sizes=[8, 16])),
    ]
    for data in cases:
        doc, out = execute(config.from_dict(data))
        assert doc["kind"] == data["kind"]
        text = payload_json(doc)
        assert payload_json(execute(config.from_dict(data))[0]) == text
    grok_rows = execute(config.from_dict(cases[2]))[1].tables["grok_series"]
    assert [r["epoch"] for r in grok_rows] == [0, 3, 6]
