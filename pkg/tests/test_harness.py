import json
import os

import pandas as pd
import pytest

import run
from config import LOG_CONFIG
from errors import ConfigurationError, InputError
from harness import RunConfig, latest_checkpoint, read_grid, run_experiment, sweep
from metrics import SCHEMA_LINE, read_metrics

TINY = RunConfig(env="lift", epochs=2, n_cycles=2, n_parallel=2, n_batches=2, batch_size=16,
                 hidden_sizes=(16,), n_eval=3, horizon=10, capacity=2000, seed=1)


def metrics_bytes(run_dir):
    with open(os.path.join(run_dir, "metrics.csv"), "rb") as f:
        return f.read()


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(cgm=False, cg=0.25, hidden_sizes=(32, 8), out="runs/x", algo="ddpg")
    path = cfg.to_file(str(tmp_path / "config.env"))
    assert RunConfig.from_file(path) == cfg


def test_config_coercion():
    cfg = RunConfig.from_mapping({"cgm": "off", "epochs": "3", "hidden_sizes": "32, 32", "CG": "0.2",
                                  "save_buffer": "yes"})
    assert cfg.cgm is False and cfg.save_buffer is True
    assert cfg.epochs == 3 and cfg.cg == 0.2
    assert cfg.hidden_sizes == (32, 32)
    for bad in ({"epochs": "1.5"}, {"cgm": "maybe"}, {"unknown_key": 1}, {"kappa": "abc"}):
        with pytest.raises(ConfigurationError):
            RunConfig.from_mapping(bad)


@pytest.mark.parametrize("changes", [
    {"cg": 1.5}, {"kappa": -1.0}, {"env": "slide"}, {"algo": "sac"}, {"threshold": 1.0},
    {"n_eval": 0}, {"gamma": 1.0}, {"capacity": 5}, {"form": "inverse"}, {"epochs": -1},
])
def test_invalid_config_fails_before_side_effects(tmp_path, changes):
    out = tmp_path / "run"
    cfg = RunConfig.from_mapping({**changes, "out": str(out)}, TINY)
    with pytest.raises(ConfigurationError):
        run_experiment(cfg)
    assert not out.exists()


def test_derived_configs():
    assert RunConfig(algo="ddpg").her_config().k == 0
    assert RunConfig(algo="ddpg+her", her_k=4).her_config().k == 4
    assert RunConfig(env="push").env_tag == "planar-push"
    assert RunConfig(cgm=False, seed=3).run_name() == "lift_ddpg-her_nocgm_s3"


def test_run_is_deterministic(tmp_path):
    a = run_experiment(RunConfig.from_mapping({"out": str(tmp_path / "a")}, TINY))
    b = run_experiment(RunConfig.from_mapping({"out": str(tmp_path / "b")}, TINY))
    assert metrics_bytes(a) == metrics_bytes(b)
    with open(os.path.join(a, "metrics.csv"), encoding="utf-8") as f:
        assert f.readline().strip() == SCHEMA_LINE
    frame = read_metrics(os.path.join(a, "metrics.csv"))
    assert frame["epoch"].tolist() == [0, 1]
    assert (frame["transitions"] == 2 * 2 * 10).all()
    assert os.path.isfile(os.path.join(a, "config.env"))
    assert os.path.isfile(os.path.join(a, "train.log"))


def test_zero_epoch_run_writes_empty_curve(tmp_path):
    run_dir = run_experiment(RunConfig.from_mapping({"out": str(tmp_path / "r"), "epochs": 0}, TINY))
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["curve"] == []
    assert summary["epochs_to_threshold"] is None
    assert summary["final_success"] is None
    assert "numpy" in summary["versions"]
    assert len(read_metrics(os.path.join(run_dir, "metrics.csv"))) == 0


def test_baseline_samples_only_full_mask(tmp_path):
    run_dir = run_experiment(RunConfig.from_mapping({"out": str(tmp_path / "r"), "cgm": False}, TINY))
    frame = read_metrics(os.path.join(run_dir, "metrics.csv"))
    assert frame["count_111"].sum() == 2 * 2 * 2
    others = [c for c in frame.columns if c.startswith("count_") and c != "count_111"]
    assert frame[others].to_numpy().sum() == 0
    assert frame["weight_111"].tolist() == [1.0, 1.0]


def test_resume_continues_from_latest_checkpoint(tmp_path):
    out = str(tmp_path / "r")
    first = run_experiment(RunConfig.from_mapping({"out": out, "save_buffer": True}, TINY))
    before = read_metrics(os.path.join(first, "metrics.csv"))
    checkpoint = latest_checkpoint(first)
    assert checkpoint.endswith("epoch_0001")
    assert os.path.isfile(os.path.join(checkpoint, "buffer.csv"))
    assert not os.path.exists(os.path.join(first, "checkpoints", "epoch_0000", "buffer.csv"))

    resumed = run_experiment(RunConfig.from_mapping({"out": out, "save_buffer": True, "epochs": 3}, TINY),
                             resume=True)
    after = read_metrics(os.path.join(resumed, "metrics.csv"))
    assert after["epoch"].tolist() == [0, 1, 2]
    pd.testing.assert_frame_equal(after.iloc[:2], before, check_exact=True)
    assert latest_checkpoint(resumed).endswith("epoch_0002")


def test_read_grid(tmp_path):
    path = tmp_path / "grid.csv"
    path.write_text("# two rows\nenv,algo,cgm,cg,kappa\nlift,ddpg+her,false,,\npush,ddpg,true,0.4,4\n",
                    encoding="utf-8")
    configs = read_grid(str(path), TINY)
    assert len(configs) == 2
    assert not configs[0].cgm and configs[0].cg == TINY.cg
    assert configs[1].env == "push" and configs[1].kappa == 4.0
    assert configs[1].epochs == TINY.epochs

    bad = tmp_path / "bad.csv"
    bad.write_text("env,speed\nlift,3\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        read_grid(str(bad))
    with pytest.raises(InputError):
        read_grid(str(tmp_path / "missing.csv"))


def test_shipped_grids_parse():
    grid_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "grids")
    for env in ("lift", "push"):
        configs = read_grid(os.path.join(grid_dir, f"{env}_fig3.csv"))
        assert [(c.algo, c.cgm) for c in configs] == [("ddpg", False), ("ddpg+her", False), ("ddpg+her", True)]
        assert all(c.env == env for c in configs)
        assert (configs[2].cg, configs[2].kappa) == (0.1, 32.0)

    for name, env, algo in [("lift_cg_kappa.csv", "lift", "ddpg+her"), ("push_cg_kappa.csv", "push", "ddpg+her"),
                            ("lift_ddpg_cg_kappa.csv", "lift", "ddpg"), ("push_ddpg_cg_kappa.csv", "push", "ddpg")]:
        configs = read_grid(os.path.join(grid_dir, name))
        assert len(configs) == 19
        assert all(c.env == env and c.algo == algo for c in configs)
        assert not configs[0].cgm and all(c.cgm for c in configs[1:])
        cells = {(c.cg, c.kappa) for c in configs[1:]}
        assert cells == {(cg, k) for cg in (0.0, 0.1, 0.2, 0.4, 0.6, 0.8) for k in (1.0, 4.0, 32.0)}


def test_sweep_writes_cells_and_aggregate(tmp_path):
    grid = [TINY, RunConfig.from_mapping({"cgm": False}, TINY)]
    path = sweep(grid, [1, 2], str(tmp_path / "sweep"))
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
    assert header.startswith(SCHEMA_LINE)
    assert "aggregation=median-of-crossings" in header and "threshold=0.5" in header

    aggregate = pd.read_csv(path, comment="#", float_precision="round_trip")
    assert len(aggregate) == 2
    assert aggregate["n_runs"].tolist() == [2, 2]
    assert aggregate["n_failed"].tolist() == [0, 0]
    cells = pd.read_csv(tmp_path / "sweep" / "cells.csv", float_precision="round_trip")
    assert len(cells) == 4 and (cells["status"] == "ok").all()
    for name in cells["run_dir"]:
        assert os.path.isfile(tmp_path / "sweep" / name / "metrics.csv")
    with pytest.raises(ConfigurationError):
        sweep([], [1], str(tmp_path / "empty"))


def test_cli_returns_usage_code_on_bad_config(tmp_path, monkeypatch):
    monkeypatch.setitem(LOG_CONFIG, "log_file", str(tmp_path / "logs" / "cgm.log"))
    assert run.main(["train", "--set", "bogus=1", "--out", str(tmp_path / "r")]) == 2
    assert run.main(["plot", str(tmp_path / "nothing")]) == 2
    assert run.main(["validate-independence", str(tmp_path / "nothing")]) == 2


def test_cli_dump_trajectory(tmp_path, monkeypatch):
    monkeypatch.setitem(LOG_CONFIG, "log_file", str(tmp_path / "logs" / "cgm.log"))
    out = tmp_path / "traj.csv"
    assert run.main(["dump-trajectory", "--env", "push", "--seed", "4", "--out", str(out)]) == 0
    frame = pd.read_csv(out, float_precision="round_trip")
    assert len(frame) == RunConfig().horizon
