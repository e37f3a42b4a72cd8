"""Command-line workflow tests: file contracts, determinism, exit codes, and
API/CLI equivalence. Commands run in-process through main() for speed; one
smoke test exercises the console entry point."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from chaoscast.cli import assemble_dataset, main, metrics_config_from
from chaoscast.config import default_config, load_config
from chaoscast.dynamics import Trajectory, load_trajectory_csv, save_trajectory_csv
from chaoscast.errors import ConfigError
from chaoscast.metrics import OracleForecaster, evaluate
from chaoscast.model import load_checkpoint


def tiny_config(tmp, **system_over):
    cfg = default_config()
    cfg["system"].update({
        "n_points": 600, "n_test_ics": 2, "val_len": 90,
        "mle": {"dt": 0.01, "horizon_steps": 20000,
                "renorm_interval": 10, "delta0": 1e-7},
    })
    cfg["system"].update(system_over)
    cfg["model"].update({"d": 16, "head_dim": 8, "state_size": 4})
    cfg["training"].update({"tf_epochs": 2, "sf_epochs": 1, "batch_size": 32,
                            "mmd_subsample": 64})
    cfg["metrics"].update({"mc_samples": 500, "subsample_cap": 100,
                           "gp_subsample": 300})
    path = os.path.join(tmp, "user_config.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    tmp = str(tmp_path_factory.mktemp("run"))
    cfg_path = tiny_config(tmp)
    assert main(["simulate", "--config", cfg_path, "--out", tmp, "--seed", "1"]) == 0
    return tmp, cfg_path


# ---------------------------------------------------------------------------
# simulate


def test_simulate_file_contract(sim_dir):
    tmp, _ = sim_dir
    lines = open(os.path.join(tmp, "trajectory.csv")).read().splitlines()
    assert len(lines) == 601  # header + one row per step
    assert lines[0] == "t,x0,x1,x2"
    meta = json.load(open(os.path.join(tmp, "trajectory.csv.meta.json")))
    assert meta["system"] == "lorenz63"
    assert meta["steps_per_lyapunov_time"] == 30
    assert 0.8 < meta["lambda_max"] < 1.0
    cases = sorted(os.listdir(os.path.join(tmp, "test_cases")))
    assert [c for c in cases if c.endswith(".csv")] == ["case_000.csv", "case_001.csv"]


def test_simulate_deterministic(sim_dir, tmp_path):
    tmp, cfg_path = sim_dir
    other = str(tmp_path / "again")
    assert main(["simulate", "--config", cfg_path, "--out", other, "--seed", "1"]) == 0
    a = open(os.path.join(tmp, "trajectory.csv"), "rb").read()
    b = open(os.path.join(other, "trajectory.csv"), "rb").read()
    assert a == b


def test_simulate_noise_changes_only_observations(sim_dir, tmp_path):
    tmp, cfg_path = sim_dir
    noisy_dir = str(tmp_path / "noisy")
    assert main(["simulate", "--config", cfg_path, "--out", noisy_dir,
                 "--seed", "1", "--noise", "0.1"]) == 0
    clean, _ = load_trajectory_csv(os.path.join(tmp, "trajectory.csv"))
    noisy, _ = load_trajectory_csv(os.path.join(noisy_dir, "trajectory.csv"))
    diff = noisy.states - clean.states
    assert np.abs(diff).max() > 0
    assert np.abs(diff).max() < 0.6  # bounded observation noise, same path
    assert clean.dt == noisy.dt


def test_simulate_rejects_bad_config(tmp_path):
    bad = str(tmp_path / "bad.json")
    with open(bad, "w") as fh:
        json.dump({"system": {"name": "lorenz63", "unknown_key": 1}}, fh)
    assert main(["simulate", "--config", bad, "--out", str(tmp_path)]) == 2


def test_simulate_divergence_exits_3(tmp_path):
    tmp = str(tmp_path)
    cfg_path = tiny_config(tmp, dt=10.0)  # absurd step size blows up RK4
    assert main(["simulate", "--config", cfg_path, "--out", tmp]) == 3


def test_simulate_import_csv(tmp_path):
    tmp = str(tmp_path)
    rng = np.random.default_rng(0)
    src = Trajectory(rng.normal(size=(500, 2)), dt=1.0)
    save_trajectory_csv(src, os.path.join(tmp, "ext.csv"))
    cfg_path = tiny_config(tmp)
    assert main(["simulate", "--config", cfg_path, "--out", tmp,
                 "--import", os.path.join(tmp, "ext.csv"),
                 "--steps-per-tl", "25"]) == 0
    traj, meta = load_trajectory_csv(os.path.join(tmp, "trajectory.csv"))
    assert meta["system"] == "imported"
    assert traj.steps_per_lyapunov_time == 25
    np.testing.assert_allclose(traj.states, src.states, rtol=1e-15)


# ---------------------------------------------------------------------------
# select-embedding


def test_select_embedding_on_lorenz(sim_dir):
    tmp, cfg_path = sim_dir
    assert main(["select-embedding", "--config", cfg_path, "--out", tmp]) == 0
    chosen = json.load(open(os.path.join(tmp, "embedding.json")))
    assert 5 <= chosen["tau"] <= 10
    assert 3 <= chosen["m"] <= 5
    selected = json.load(open(os.path.join(tmp, "config_selected.json")))
    assert selected["embedding"]["m"] == chosen["m"]
    ami = open(os.path.join(tmp, "ami.csv")).read().splitlines()
    assert ami[0] == "tau,ami"
    assert len(ami) > 10


def test_select_embedding_sine_quarter_period(tmp_path):
    tmp = str(tmp_path)
    rng = np.random.default_rng(0)
    t = np.arange(4000)
    series = np.sin(2 * np.pi * t / 40) + rng.normal(0, 0.1, t.size)
    save_trajectory_csv(Trajectory(series[:, None], dt=1.0),
                        os.path.join(tmp, "sine.csv"))
    cfg_path = tiny_config(tmp)
    assert main(["select-embedding", "--config", cfg_path, "--out", tmp,
                 "--trajectory", os.path.join(tmp, "sine.csv")]) == 0
    chosen = json.load(open(os.path.join(tmp, "embedding.json")))
    assert 8 <= chosen["tau"] <= 12


def test_select_embedding_constant_series_exits_3(tmp_path):
    tmp = str(tmp_path)
    save_trajectory_csv(Trajectory(np.ones((300, 1)), dt=1.0),
                        os.path.join(tmp, "const.csv"))
    cfg_path = tiny_config(tmp)
    assert main(["select-embedding", "--config", cfg_path, "--out", tmp,
                 "--trajectory", os.path.join(tmp, "const.csv")]) == 3


# ---------------------------------------------------------------------------
# train


@pytest.fixture(scope="module")
def trained_dir(sim_dir):
    tmp, cfg_path = sim_dir
    assert main(["train", "--config", cfg_path, "--out", tmp, "--seed", "1"]) == 0
    return tmp, cfg_path


def test_train_writes_artifacts(trained_dir):
    tmp, _ = trained_dir
    for name in ("checkpoint_tf.bin", "checkpoint_tf.json",
                 "checkpoint_sf.bin", "checkpoint_sf.json",
                 "losses.csv", "config.json"):
        assert os.path.exists(os.path.join(tmp, name)), name
    lines = open(os.path.join(tmp, "losses.csv")).read().splitlines()
    assert lines[0].startswith("stage,epoch,l_next")
    assert len(lines) == 1 + 2 + 1  # header + tf epochs + sf epochs


def test_train_no_sf_emits_only_tf_checkpoint(sim_dir, tmp_path):
    tmp, cfg_path = sim_dir
    out = str(tmp_path / "nosf")
    os.makedirs(out)
    for name in ("trajectory.csv", "trajectory.csv.meta.json"):
        with open(os.path.join(out, name), "wb") as dst:
            dst.write(open(os.path.join(tmp, name), "rb").read())
    assert main(["train", "--config", cfg_path, "--out", out, "--no-sf"]) == 0
    assert os.path.exists(os.path.join(out, "checkpoint_tf.json"))
    assert not os.path.exists(os.path.join(out, "checkpoint_sf.json"))


def test_train_rerun_same_seed_identical_losses(sim_dir, tmp_path):
    tmp, cfg_path = sim_dir
    outs = []
    for sub in ("a", "b"):
        out = str(tmp_path / sub)
        os.makedirs(out)
        for name in os.listdir(tmp):
            src = os.path.join(tmp, name)
            if os.path.isfile(src) and name.startswith("trajectory"):
                with open(os.path.join(out, name), "wb") as dst:
                    dst.write(open(src, "rb").read())
        assert main(["train", "--config", cfg_path, "--out", out, "--seed", "7"]) == 0
        outs.append(open(os.path.join(out, "losses.csv"), "rb").read())
    assert outs[0] == outs[1]


def test_ablation_flags_reach_config(trained_dir, tmp_path):
    tmp, cfg_path = trained_dir
    out = str(tmp_path / "ablate")
    os.makedirs(out)
    for name in ("trajectory.csv", "trajectory.csv.meta.json"):
        with open(os.path.join(out, name), "wb") as dst:
            dst.write(open(os.path.join(tmp, name), "rb").read())
    assert main(["train", "--config", cfg_path, "--out", out,
                 "--no-pir", "--no-rs", "--no-mpp", "--no-mmd", "--no-sf"]) == 0
    saved = json.load(open(os.path.join(out, "config.json")))
    assert saved["embedding"]["enabled"] is False
    assert saved["model"]["rs_enabled"] is False
    assert saved["model"]["M"] == 0
    assert saved["training"]["sf_enabled"] is False
    assert saved["training"]["mmd_enabled"] is False


# ---------------------------------------------------------------------------
# evaluate and forecast


def test_evaluate_oracle_reports_ideal_scores(trained_dir):
    tmp, cfg_path = trained_dir
    assert main(["evaluate", "--config", cfg_path, "--out", tmp, "--oracle"]) == 0
    report = json.load(open(os.path.join(tmp, "report.json")))
    assert report["vpt_TL"] == 10.0
    assert report["forecaster"] == "oracle"
    assert report["n_excluded"] == 0
    assert "config_hash" in report and "run_id" in report


def test_evaluate_missing_checkpoint_exits_2(sim_dir, tmp_path):
    tmp, cfg_path = sim_dir
    out = str(tmp_path / "nockpt")
    os.makedirs(out)
    for name in os.listdir(tmp):
        src = os.path.join(tmp, name)
        if os.path.isfile(src) and name.startswith("trajectory"):
            with open(os.path.join(out, name), "wb") as dst:
                dst.write(open(src, "rb").read())
    os.mkdir(os.path.join(out, "test_cases"))
    for name in os.listdir(os.path.join(tmp, "test_cases")):
        with open(os.path.join(out, "test_cases", name), "wb") as dst:
            dst.write(open(os.path.join(tmp, "test_cases", name), "rb").read())
    code = main(["evaluate", "--config", cfg_path, "--out", out,
                 "--checkpoint", os.path.join(out, "nope")])
    assert code == 2


def test_evaluate_model_checkpoint_writes_reports(trained_dir):
    tmp, cfg_path = trained_dir
    assert main(["evaluate", "--config", cfg_path, "--out", tmp]) == 0
    report = json.load(open(os.path.join(tmp, "report.json")))
    assert report["n_test_cases"] + report["n_excluded"] == 2
    rows = open(os.path.join(tmp, "report.csv")).read().splitlines()
    assert rows[0].startswith("case,excluded")
    assert len(rows) == 3
    fdir = os.path.join(tmp, "forecasts")
    assert len([f for f in os.listdir(fdir) if f.endswith(".csv")]) == report["n_test_cases"]


def test_cli_report_matches_library_evaluate(trained_dir):
    # the CLI must only orchestrate: numbers equal a direct API run
    tmp, cfg_path = trained_dir
    assert main(["evaluate", "--config", cfg_path, "--out", tmp, "--oracle"]) == 0
    report = json.load(open(os.path.join(tmp, "report.json")))
    cfg = load_config(cfg_path)
    split = assemble_dataset(cfg, tmp)
    lib_report, _ = evaluate(OracleForecaster(split.test_cases), split.test_cases,
                             metrics_config_from(cfg), seed=cfg["seed"])
    for key, val in lib_report.to_dict().items():
        assert report[key] == val, key


def test_forecast_command(trained_dir, tmp_path):
    tmp, cfg_path = trained_dir
    ctx_path = os.path.join(tmp, "test_cases", "case_000.csv")
    out = str(tmp_path / "fc")
    assert main(["forecast", "--config", cfg_path, "--out", out,
                 "--checkpoint", os.path.join(tmp, "checkpoint_sf"),
                 "--context", ctx_path, "--horizon-tl", "2"]) == 0
    fc, meta = load_trajectory_csv(os.path.join(out, "forecast.csv"))
    assert len(fc) == 60
    assert meta["horizon_tl"] == 2


def test_console_entry_point_smoke():
    proc = subprocess.run([sys.executable, "-m", "chaoscast.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout


def test_config_defaults_valid():
    from chaoscast.config import validate_config
    validate_config(default_config())


def test_config_rejects_unknown_section_key():
    cfg = default_config()
    cfg["training"]["typo_field"] = 1
    from chaoscast.config import validate_config
    with pytest.raises(ConfigError):
        validate_config(cfg)
