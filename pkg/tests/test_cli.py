import csv
import json

import pytest

from genert.cli import bench_layouts, main
from genert.config import config_from_dict
from genert.physics import read_cir_dir

SMALL = {
    "rxs": [[-10, 2, 1.5], [0, -4, 1.5], [12, 3, 1.5], [25, -6, 1.5]],
    "angular_spacing_deg": 1.5,
    "pretrain_budget": 240, "pretrain_epochs": 3, "pretrain_halve_every": 2,
    "train_epochs": 2,
}


def write_config(tmp_path, **extra):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({**SMALL, **extra}))
    return str(p)


def test_unknown_command(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["foo"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 3


def test_validate(tmp_path, capsys):
    assert main(["validate", "box_canyon"]) == 0
    assert "0 issue(s)" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text('{"classes": [], "surfaces": [{"id": 0}]}')
    assert main(["validate", str(bad)]) == 1


def test_simulate_writes_four_cirs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["simulate", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    cirs = read_cir_dir(out / "cir")
    assert sorted(cirs) == [(0, j) for j in range(4)]
    assert all(c.mpcs for c in cirs.values())
    assert json.loads((out / "cir" / "manifest.json").read_text())["model"] == "oracle"
    assert "4 Tx-Rx pairs" in capsys.readouterr().out


def test_env_var_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("GENERT_OUT", str(tmp_path / "envout"))
    assert main(["simulate", "--config", write_config(tmp_path)]) == 0
    assert (tmp_path / "envout" / "cir" / "manifest.json").exists()


def test_evaluate_self_is_floor(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert main(["evaluate", "--config", cfg, "--pred", str(out / "cir"), "--label", str(out / "cir"),
                 "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert rep["overall_error_db"] == -120.0 and rep["rcm_error_db"] == -120.0
    assert rep["avg_delay_error_ns"] == 0.0
    for name in ("metrics.csv", "avg_delay.png", "pdp_example.png"):
        assert (tmp_path / "ev" / name).stat().st_size > 0


def test_evaluate_empty_label_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", "--pred", str(tmp_path), "--label", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "ev")]) == 3


def test_gen_data_modes(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["gen-data", "--mode", "polarized", "--config", cfg, "--out", str(out)]) == 0
    perp = json.loads((out / "data" / "polarized_perp.json").read_text())
    assert perp["polarization"] == "Perp" and len(perp["alpha"]) == 120
    assert main(["gen-data", "--mode", "e2e", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert set(manifest) >= {"scene", "humidity", "seed", "txs", "rxs", "split"}
    assert len(read_cir_dir(out / "data" / "labels")) == 4


def test_pretrain_train_simulate_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path, rxs=None, rx_grid={"nx": 5, "ny": 4})
    out = str(tmp_path / "out")
    assert main(["pretrain", "--config", cfg, "--out", out, "--threads", "1"]) == 0
    for name in ("pretrained.json", "pretrain_report.json", "pretrain_curves.csv", "pretrain_curves.png"):
        assert (tmp_path / "out" / name).exists(), name
    rows = list(csv.reader((tmp_path / "out" / "pretrain_curves.csv").open()))
    assert rows[0][0] == "epoch" and len(rows) == 4
    assert main(["train", "--config", cfg, "--out", out, "--trainable", "fusion+branches"]) == 0
    for name in ("trained.json", "train_history.csv", "train_history.png", "val_metrics.json", "val_metrics.csv",
                 "val_avg_delay.png"):
        assert (tmp_path / "out" / name).exists(), name
    assert main(["simulate", "--config", cfg, "--out", out, "--model", str(tmp_path / "out" / "trained.json")]) == 0
    assert len(read_cir_dir(tmp_path / "out" / "cir")) == 20


def test_train_without_checkpoint(tmp_path):
    assert main(["train", "--config", write_config(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_bad_model_path(tmp_path):
    assert main(["simulate", "--config", write_config(tmp_path), "--model", str(tmp_path / "x.json"),
                 "--out", str(tmp_path / "o")]) == 4


def test_bench_layouts_equal_pairs():
    cfg = config_from_dict({"rx_grid": {"nx": 4, "ny": 3}, "bench_grids": 8})
    (tx_a, rx_a), (tx_b, rx_b) = bench_layouts(cfg)
    assert len(tx_a) == 1 and len(rx_a) == 96
    assert len(tx_b) == 8 and len(rx_b) == 12
    assert len(tx_a) * len(rx_a) == len(tx_b) * len(rx_b)


def test_bench_report(tmp_path):
    cfg = write_config(tmp_path, angular_spacing_deg=3.0, bench_grids=2)
    out = tmp_path / "b"
    assert main(["bench", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "bench.json").read_text())
    assert [r["pairs"] for r in doc["rows"]] == [8, 8]
    assert all(r["seconds"] > 0 for r in doc["rows"])
    assert (out / "bench.csv").exists() and (out / "bench.png").exists()


def test_no_writes_outside_out_dir(tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert list(work.iterdir()) == []
