"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criterion drives the real CLI into per-seed run directories
(five seeds, full model and MMD-ablated twin) and the remaining criteria
reuse those artifacts where possible.
"""

import json
import os
import shutil
import time

import numpy as np
import pytest

import chaoscast.numcore as nc
from chaoscast.cli import main
from chaoscast.config import default_config
from chaoscast.dynamics import (
    default_initial_state,
    estimate_mle,
    integrate,
    make_system,
    rk4_step,
)
from chaoscast.embedding import EmbeddingConfig, ami_curve, delay_embed, fnn_curve, select_m, select_tau
from chaoscast.metrics import MetricsConfig, correlation_dimension, d_stsp, smape_pointwise, vpt
from chaoscast.model import ForecastModel, ModelConfig
from chaoscast.numcore import Tensor, backward
from chaoscast.training import mmd2

from test_numcore import run_all_gradchecks

# desk-scale end-to-end configuration (criterion 6 pins the trajectory
# length, d, L, M, D and the seed set; the rest is sized for one CPU core)
DESK_SEEDS = (1, 2, 3, 4, 5)
DESK_OVERRIDES = {
    "system": {"n_points": 3000, "n_test_ics": 10, "val_len": 150},
    "model": {"d": 64, "L": 2, "M": 2, "state_size": 8},
    "embedding": {"m": 3, "tau": 7, "patch_size": 10},
    "training": {"tf_epochs": 30, "sf_epochs": 8, "batch_size": 32},
}


def _report_line(criterion: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: numerical core gradient checks


def test_criterion_1_numcore_gradients():
    t0 = time.time()
    worst = run_all_gradchecks(instances_per_op=100)
    bad = {k: v for k, v in worst.items() if v >= 1e-4}

    # full-model loss gradient probe on a random 10-parameter subset
    cfg = ModelConfig(d=8, n_layers=2, n_mpp=2, expand=2, head_dim=4, state_size=3,
                      patch_size=2, n_vars=2, window_len=6, emb_m=2, emb_tau=1)
    model = ForecastModel(cfg, seed=18)
    rng = np.random.default_rng(42)
    batch = rng.normal(size=(2, 12, cfg.n_vars))

    def loss_value():
        patches, tokens = model.embed_series(Tensor(batch))
        E, _, _ = model.trunk_forward(tokens)
        N = tokens.shape[1]
        preds = model.predict_next_patch(E[:, :N - 1])
        loss = nc.mean(nc.square(nc.sub(patches[:, 1:], preds)))
        for depth, p in model.mpp_forward(E, tokens).items():
            loss = nc.add(loss, nc.mean(nc.square(nc.sub(patches[:, depth + 1:], p))))
        return loss

    backward(loss_value())
    params = model.named_params()
    names = sorted(params)
    probe_worst = 0.0
    for _ in range(10):
        name = names[rng.integers(0, len(names))]
        t = params[name]
        idx = tuple(rng.integers(0, s) for s in t.data.shape)
        analytic = t.grad[idx]
        h = 1e-6
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = loss_value().item()
        t.data[idx] = orig - h
        down = loss_value().item()
        t.data[idx] = orig
        fd = (up - down) / (2 * h)
        probe_worst = max(probe_worst,
                          abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-8))
    elapsed = time.time() - t0
    ok = not bad and probe_worst < 1e-3 and elapsed < 120
    _report_line("criterion 1 (numerical core)", ok,
                 f"worst op err {max(worst.values()):.2e}, probe {probe_worst:.2e}, "
                 f"{elapsed:.0f}s (budget 120s)")


# ---------------------------------------------------------------------------
# criterion 2: dynamics


def test_criterion_2_dynamics():
    t0 = time.time()
    L63 = make_system("lorenz63")

    # order-4 convergence over 100 attractor states
    ref_traj = integrate(L63, default_initial_state(L63), dt=0.01,
                         n_steps=3000, transient_steps=2000)
    rng = np.random.default_rng(0)
    states = ref_traj.states[rng.choice(3000, size=100, replace=False)]
    h = 0.02
    e1, e2 = [], []
    for x in states:
        ref = x.copy()
        for _ in range(2000):
            ref = rk4_step(L63, ref, h / 2000)
        one = rk4_step(L63, x, h)
        half = rk4_step(L63, rk4_step(L63, x, h / 2), h / 2)
        e1.append(np.linalg.norm(one - ref))
        e2.append(np.linalg.norm(half - ref))
    ratio = float(np.mean(e1) / np.mean(e2))

    lam_63 = estimate_mle(L63, default_initial_state(L63), dt=0.01,
                          horizon_steps=200_000, renorm_interval=10)
    lam_63_fine = estimate_mle(L63, default_initial_state(L63), dt=0.002,
                               horizon_steps=500_000, renorm_interval=50)
    ros = make_system("rossler")
    lam_ros = estimate_mle(ros, default_initial_state(ros), dt=0.01,
                           horizon_steps=500_000, renorm_interval=10)
    lam_ros_fine = estimate_mle(ros, default_initial_state(ros), dt=0.005,
                                horizon_steps=800_000, renorm_interval=20)
    elapsed = time.time() - t0
    ok = (12.0 <= ratio <= 20.0
          and abs(lam_63 - 0.906) / 0.906 < 0.05
          and abs(lam_63_fine - 0.906) / 0.906 < 0.05
          and abs(lam_ros - 0.071) / 0.071 < 0.15
          and abs(lam_ros_fine - 0.071) / 0.071 < 0.15
          and elapsed < 300)
    _report_line("criterion 2 (dynamics)", ok,
                 f"rk4 ratio {ratio:.1f}, lorenz MLE {lam_63:.4f}/{lam_63_fine:.4f}, "
                 f"rossler MLE {lam_ros:.4f}/{lam_ros_fine:.4f}, {elapsed:.0f}s (budget 300s)")


# ---------------------------------------------------------------------------
# shared desk-scale harness (criteria 3, 6, 8 and the SF example)


def _desk_config(tmp: str, mmd: bool = True) -> str:
    cfg = default_config()
    for section, over in DESK_OVERRIDES.items():
        cfg[section].update(over)
    cfg["training"]["mmd_enabled"] = mmd
    path = os.path.join(tmp, "acceptance_config.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


def _copy_sim_artifacts(src: str, dst: str):
    os.makedirs(dst, exist_ok=True)
    for name in ("trajectory.csv", "trajectory.csv.meta.json"):
        shutil.copyfile(os.path.join(src, name), os.path.join(dst, name))
    shutil.copytree(os.path.join(src, "test_cases"),
                    os.path.join(dst, "test_cases"), dirs_exist_ok=True)


def _read_report(run_dir: str, tag: str) -> dict:
    path = os.path.join(run_dir, f"report_{tag}.json")
    with open(path) as fh:
        return json.load(fh)


def _evaluate_into(cfg_path: str, run_dir: str, tag: str, extra_args: list):
    rc = main(["evaluate", "--config", cfg_path, "--out", run_dir] + extra_args)
    assert rc == 0, f"evaluate {tag} failed with {rc}"
    shutil.move(os.path.join(run_dir, "report.json"),
                os.path.join(run_dir, f"report_{tag}.json"))
    return _read_report(run_dir, tag)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Run the criterion-6 protocol: per seed, simulate + train + evaluate the
    full model, its MMD-ablated twin, the TF-only checkpoint, and the
    persistence baseline."""
    base = str(tmp_path_factory.mktemp("desk"))
    results = {"seeds": {}, "wall": 0.0, "base": base}
    t0 = time.time()
    for seed in DESK_SEEDS:
        run = os.path.join(base, f"run_{seed}")
        cfg_path = _desk_config(base, mmd=True)
        assert main(["simulate", "--config", cfg_path, "--out", run,
                     "--seed", str(seed)]) == 0
        assert main(["train", "--config", cfg_path, "--out", run,
                     "--seed", str(seed)]) == 0
        full = _evaluate_into(cfg_path, run, "full", ["--seed", str(seed)])
        tf_only = _evaluate_into(cfg_path, run, "tf",
                                 ["--seed", str(seed), "--checkpoint",
                                  os.path.join(run, "checkpoint_tf")])
        persist = _evaluate_into(cfg_path, run, "persistence",
                                 ["--seed", str(seed), "--persistence"])

        nommd_dir = os.path.join(base, f"run_{seed}_nommd")
        _copy_sim_artifacts(run, nommd_dir)
        nommd_cfg = _desk_config(base, mmd=False)
        assert main(["train", "--config", nommd_cfg, "--out", nommd_dir,
                     "--seed", str(seed), "--no-mmd"]) == 0
        nommd = _evaluate_into(nommd_cfg, nommd_dir, "full", ["--seed", str(seed)])

        results["seeds"][seed] = {
            "run_dir": run, "nommd_dir": nommd_dir,
            "full": full, "tf_only": tf_only,
            "persistence": persist, "nommd": nommd,
            "losses": _parse_losses(os.path.join(run, "losses.csv")),
        }
    results["wall"] = time.time() - t0
    return results


def _parse_losses(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.strip().split(",")
            rows.append(dict(zip(header, vals)))
    return rows


# ---------------------------------------------------------------------------
# criterion 3: embedding selection


def test_criterion_3_embedding(desk_runs):
    from chaoscast.dynamics import load_trajectory_csv
    run = desk_runs["seeds"][1]["run_dir"]
    traj, _ = load_trajectory_csv(os.path.join(run, "trajectory.csv"))
    x = traj.states[:, 0]
    tau, tau_fb = select_tau(ami_curve(x, tau_max=30))
    fnn = fnn_curve(x, tau=tau, m_max=8)
    m, m_fb = select_m(fnn)

    # hand-evaluated delay-coordinate examples
    series = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
    emb = delay_embed(series, EmbeddingConfig(m=3, tau=2))
    hand_ok = (np.array_equal(emb.data[0, 4], [1.0, 3.0, 5.0])
               and np.array_equal(emb.data[0, 0], [0.0, 0.0, 1.0])
               and np.array_equal(emb.data[0, :, 2], series[:, 0]))

    ok = (not tau_fb and 5 <= tau <= 10 and not m_fb and 3 <= m <= 5 and hand_ok)
    _report_line("criterion 3 (embedding selection)", ok,
                 f"tau={tau} (band [5,10]), m={m} (band [3,5]), hand examples exact={hand_ok}")


# ---------------------------------------------------------------------------
# criterion 4: MMD estimator


def test_criterion_4_mmd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=(40, 3)) + 0.3
    zero_ok = mmd2(x, x.copy()) == 0.0
    sym_ok = abs(mmd2(x, y) - mmd2(y, x)) <= 1e-12
    far = abs(mmd2(np.zeros((7, 2)), np.full((7, 2), 1e9)) - 8.0) <= 1e-9
    mono = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        base = r.normal(size=(50, 3))
        same = r.normal(size=(50, 3))
        shifted = r.normal(size=(50, 3)) + 3.0
        mono &= mmd2(base, shifted) > mmd2(base, same)
    ok = zero_ok and sym_ok and far and mono
    _report_line("criterion 4 (MMD estimator)", ok,
                 f"identity={zero_ok}, symmetry={sym_ok}, far-cluster 8.0={far}, "
                 f"shift monotone 20/20={mono}")


# ---------------------------------------------------------------------------
# criterion 5: metrics


def test_criterion_5_metrics():
    t0 = time.time()
    cfg = MetricsConfig(steps_per_TL=30)
    rng = np.random.default_rng(0)

    x = np.array([1.0, 2.0])
    smape_ok = (smape_pointwise(x, x) == 0.0
                and smape_pointwise(x, -x) == pytest.approx(200.0)
                and smape_pointwise(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
                == pytest.approx(200.0 * np.sqrt(2) / 2))

    truth = rng.normal(size=(90, 2)) + 5.0
    pred = truth.copy()
    pred[45:] = -truth[45:]
    vpt_ok = vpt(truth, pred, cfg) == pytest.approx(1.5)

    square = rng.uniform(size=(4000, 2))
    dim_sq = correlation_dimension(square, cfg)
    L63 = make_system("lorenz63")
    lor = integrate(L63, default_initial_state(L63), dt=0.01,
                    n_steps=100_000, transient_steps=3000)
    dim_lor = correlation_dimension(lor.states, cfg)

    cloud = rng.normal(size=(400, 3))
    kl_same = d_stsp(cloud, cloud.copy(), cfg, seed=0)
    noise_floor = 3.0 / np.sqrt(cfg.mc_samples)

    elapsed = time.time() - t0
    ok = (smape_ok and vpt_ok and abs(dim_sq - 2.0) <= 0.15
          and abs(dim_lor - 2.05) <= 0.15 and abs(kl_same) <= noise_floor
          and elapsed < 600)
    _report_line("criterion 5 (metrics)", ok,
                 f"smape exact={smape_ok}, vpt 1.5={vpt_ok}, dim(square)={dim_sq:.3f}, "
                 f"dim(lorenz)={dim_lor:.3f}, kl(identical)={kl_same:.2e}, "
                 f"{elapsed:.0f}s (budget 600s)")


# ---------------------------------------------------------------------------
# criterion 6: end-to-end desk run


def _steps_per_epoch(n_windows: int, batch: int) -> int:
    return -(-n_windows // batch)


def test_criterion_6_teacher_forcing_loss_drop(desk_runs):
    # l_next after the epoch that crosses optimizer step 200 must be at most
    # half of the first epoch's average
    drops = {}
    for seed, res in desk_runs["seeds"].items():
        tf_rows = [r for r in res["losses"] if r["stage"] == "tf"]
        spe = _steps_per_epoch(2821 - 150 + 1 - 150, DESK_OVERRIDES["training"]["batch_size"])
        k = min(-(-200 // spe), len(tf_rows) - 1)
        first = float(tf_rows[0]["l_next"])
        at200 = float(tf_rows[k]["l_next"])
        drops[seed] = at200 / first
    ok = all(v <= 0.5 for v in drops.values())
    _report_line("criterion 6a (TF loss halves in 200 steps)", ok,
                 "ratios " + ", ".join(f"s{k}={v:.3f}" for k, v in drops.items()))


def test_criterion_6_vpt_and_attractor(desk_runs):
    vpts = [res["full"]["vpt_TL"] for res in desk_runs["seeds"].values()]
    d_full = [res["full"]["d_stsp"] for res in desk_runs["seeds"].values()]
    d_pers = [res["persistence"]["d_stsp"] for res in desk_runs["seeds"].values()]
    med_vpt = float(np.median(vpts))
    ok = med_vpt >= 1.0 and float(np.median(d_full)) < float(np.median(d_pers))
    _report_line("criterion 6b (median VPT and D_stsp vs persistence)", ok,
                 f"median vpt={med_vpt:.3f} (>=1.0), median d_stsp full="
                 f"{np.median(d_full):.3f} vs persistence {np.median(d_pers):.3f}")


def test_criterion_6_mmd_ablation_direction(desk_runs):
    d_full = [res["full"]["d_stsp"] for res in desk_runs["seeds"].values()]
    d_nommd = [res["nommd"]["d_stsp"] for res in desk_runs["seeds"].values()]
    ok = float(np.median(d_nommd)) >= float(np.median(d_full))
    _report_line("criterion 6c (no-MMD ablation direction)", ok,
                 f"median d_stsp no-mmd={np.median(d_nommd):.3f} >= "
                 f"full={np.median(d_full):.3f}")


def test_criterion_6_runtime(desk_runs):
    ok = desk_runs["wall"] < 1800
    _report_line("criterion 6d (runtime)", ok,
                 f"{desk_runs['wall']:.0f}s for 5 seeds x (full + no-mmd) (budget 1800s)")


def test_student_forcing_does_not_worsen_attractor(desk_runs):
    # spec example for the student-forcing stage: median 10-T_L d_stsp after
    # both stages does not exceed the teacher-forcing-only median
    d_tf = [res["tf_only"]["d_stsp"] for res in desk_runs["seeds"].values()]
    d_sf = [res["full"]["d_stsp"] for res in desk_runs["seeds"].values()]
    ok = float(np.median(d_sf)) <= float(np.median(d_tf))
    _report_line("student-forcing attractor check", ok,
                 f"median d_stsp after SF {np.median(d_sf):.3f} <= "
                 f"TF-only {np.median(d_tf):.3f}")


# ---------------------------------------------------------------------------
# criterion 7: ablation wiring


def _tiny_cfg(tmp: str) -> str:
    cfg = default_config()
    cfg["system"].update({"n_points": 600, "n_test_ics": 2, "val_len": 90,
                          "mle": {"dt": 0.01, "horizon_steps": 20000,
                                  "renorm_interval": 10, "delta0": 1e-7}})
    cfg["model"].update({"d": 16, "head_dim": 8, "state_size": 4})
    cfg["training"].update({"tf_epochs": 1, "sf_epochs": 1, "batch_size": 64,
                            "mmd_subsample": 64})
    path = os.path.join(tmp, "tiny.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


def _checkpoint_signature(run_dir: str) -> tuple:
    name = "checkpoint_sf" if os.path.exists(os.path.join(run_dir, "checkpoint_sf.json")) \
        else "checkpoint_tf"
    with open(os.path.join(run_dir, name + ".json")) as fh:
        manifest = json.load(fh)
    n_params = sum(int(np.prod(e["shape"] or [1])) for e in manifest["tensors"])
    model_cfg = manifest["meta"]["config"]
    structure = (model_cfg["pir_enabled"], model_cfg["rs_enabled"],
                 model_cfg["n_mpp"], model_cfg["encoder_oriented"])
    losses = _parse_losses(os.path.join(run_dir, "losses.csv"))
    stages = tuple(sorted({r["stage"] for r in losses}))
    mmd_active = any(r["stage"] == "sf" and r.get("mmd_gt_pred") not in ("", "0.0")
                     for r in losses)
    return (n_params, structure, stages, mmd_active)


def test_criterion_7_ablation_wiring(tmp_path_factory):
    base = str(tmp_path_factory.mktemp("ablations"))
    cfg_path = _tiny_cfg(base)
    sim = os.path.join(base, "sim")
    assert main(["simulate", "--config", cfg_path, "--out", sim, "--seed", "1"]) == 0

    variants = {
        "full": [],
        "no_pir": ["--no-pir"],
        "no_rs": ["--no-rs"],
        "no_mpp": ["--no-mpp"],
        "no_sf": ["--no-sf"],
        "no_mmd": ["--no-mmd"],
        "encoder": ["--encoder-oriented"],
    }
    signatures = {}
    for name, flags in variants.items():
        run = os.path.join(base, name)
        _copy_sim_artifacts(sim, run)
        rc = main(["train", "--config", cfg_path, "--out", run, "--seed", "1"] + flags)
        assert rc == 0, f"{name} not runnable (exit {rc})"
        signatures[name] = _checkpoint_signature(run)
    distinct = len(set(signatures.values())) == len(signatures)
    ok = distinct
    detail = "; ".join(f"{k}: params={v[0]} structure={v[1]} stages={v[2]} mmd={v[3]}"
                       for k, v in signatures.items())
    _report_line("criterion 7 (ablation wiring)", ok, detail)


# ---------------------------------------------------------------------------
# criterion 8: determinism


def test_criterion_8_determinism(desk_runs, tmp_path_factory):
    base = str(tmp_path_factory.mktemp("determinism"))
    cfg_path = _desk_config(base, mmd=True)
    rerun = os.path.join(base, "rerun_1")
    assert main(["simulate", "--config", cfg_path, "--out", rerun, "--seed", "1"]) == 0
    assert main(["train", "--config", cfg_path, "--out", rerun, "--seed", "1"]) == 0
    assert main(["evaluate", "--config", cfg_path, "--out", rerun, "--seed", "1"]) == 0

    first = desk_runs["seeds"][1]["run_dir"]
    losses_a = open(os.path.join(first, "losses.csv"), "rb").read()
    losses_b = open(os.path.join(rerun, "losses.csv"), "rb").read()
    report_a = open(os.path.join(first, "report_full.json"), "rb").read()
    report_b = open(os.path.join(rerun, "report.json"), "rb").read()
    ok = losses_a == losses_b and report_a == report_b
    _report_line("criterion 8 (determinism)", ok,
                 f"losses.csv identical={losses_a == losses_b}, "
                 f"report.json identical={report_a == report_b}")
