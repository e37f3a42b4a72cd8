"""Command-line front-end.

Commands: simulate, select-embedding, train, forecast, evaluate. The CLI is
an orchestrator only: every computation happens in the library modules, so a
run driven here is reproducible through the API with the same config. Exit
codes: 2 config, 3 data/simulation, 4 training, 5 evaluation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import dynamics, embedding, metrics, training
from .config import hash_config, load_config
from .errors import (
    ChaoscastError,
    ConfigError,
    DatasetTooShortError,
    DegenerateDistributionError,
    EmptyNeighborhoodError,
    IntegrationDivergedError,
    NotEnoughStepsError,
    ResolutionTooCoarseError,
    RolloutDivergedError,
    TrainingDivergedError,
)
from .model import ForecastModel, ModelConfig, load_checkpoint, save_checkpoint

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_EVALUATION = 5

_DATA_ERRORS = (IntegrationDivergedError, DatasetTooShortError, ResolutionTooCoarseError,
                DegenerateDistributionError, EmptyNeighborhoodError, NotEnoughStepsError)


# ---------------------------------------------------------------------------
# run-directory layout helpers


def _traj_path(out_dir: str) -> str:
    return os.path.join(out_dir, "trajectory.csv")


def _case_dir(out_dir: str) -> str:
    return os.path.join(out_dir, "test_cases")


def _write_losses_csv(path: str, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "l_next", "l_mpp", "l_stu",
                         "mmd_hist_pred", "mmd_gt_pred", "total", "val_l_next"])
        for row in history:
            mpp = row.get("l_mpp") or {}
            mpp_str = ";".join(f"{k}:{repr(v)}" for k, v in sorted(mpp.items()))
            writer.writerow([
                row["stage"], row["epoch"],
                repr(row["l_next"]) if "l_next" in row else "",
                mpp_str,
                repr(row["l_stu"]) if "l_stu" in row else "",
                repr(row["mmd_hist_pred"]) if "mmd_hist_pred" in row else "",
                repr(row["mmd_gt_pred"]) if "mmd_gt_pred" in row else "",
                repr(row["total"]),
                repr(row["val_l_next"]) if "val_l_next" in row else "",
            ])


def _load_test_cases(out_dir: str, points_per_tl: int) -> list | None:
    case_dir = _case_dir(out_dir)
    if not os.path.isdir(case_dir):
        return None
    cases = []
    for name in sorted(os.listdir(case_dir)):
        if not name.endswith(".csv"):
            continue
        traj, _ = dynamics.load_trajectory_csv(os.path.join(case_dir, name))
        ctx = dynamics.Trajectory(traj.states[:points_per_tl], dt=traj.dt,
                                  steps_per_lyapunov_time=points_per_tl)
        tgt = dynamics.Trajectory(traj.states[points_per_tl:], dt=traj.dt,
                                  steps_per_lyapunov_time=points_per_tl)
        cases.append((ctx, tgt))
    return cases or None


def assemble_dataset(cfg: dict, out_dir: str) -> dynamics.DatasetSplit:
    """Rebuild the dataset split a run directory describes."""
    sys_cfg = cfg["system"]
    traj, _ = dynamics.load_trajectory_csv(_traj_path(out_dir))
    traj.steps_per_lyapunov_time = sys_cfg["points_per_tl"]
    file_cases = _load_test_cases(out_dir, sys_cfg["points_per_tl"])
    if file_cases is not None:
        split = dynamics.build_dataset(traj, sys_cfg["points_per_tl"], 0, cfg["seed"],
                                       val_len=sys_cfg["val_len"])
        split.test_cases = file_cases[:sys_cfg["n_test_ics"]] or file_cases
    else:
        split = dynamics.build_dataset(traj, sys_cfg["points_per_tl"],
                                       sys_cfg["n_test_ics"], cfg["seed"],
                                       val_len=sys_cfg["val_len"])
    return split


def model_config_from(cfg: dict, n_vars: int) -> ModelConfig:
    m_cfg, e_cfg = cfg["model"], cfg["embedding"]
    return ModelConfig(
        d=m_cfg["d"], n_layers=m_cfg["L"], n_mpp=m_cfg["M"],
        expand=m_cfg["expand"], head_dim=m_cfg["head_dim"],
        state_size=m_cfg["state_size"], patch_size=e_cfg["patch_size"],
        n_vars=n_vars, window_len=cfg["system"]["points_per_tl"],
        emb_m=e_cfg["m"], emb_tau=e_cfg["tau"], pir_enabled=e_cfg["enabled"],
        rs_enabled=m_cfg["rs_enabled"], encoder_oriented=m_cfg["encoder_oriented"],
        exact_zoh=m_cfg["exact_zoh"], rollout_envelope=m_cfg["rollout_envelope"],
    )


def train_config_from(cfg: dict) -> training.TrainConfig:
    t = cfg["training"]
    return training.TrainConfig(
        lambda_p=t["lambda_p"], lambda_c=t["lambda_c"], lambda_r=t["lambda_r"],
        tf_lr=t["tf_lr"], sf_lr=t["sf_lr"], batch_size=t["batch_size"],
        tf_epochs=t["tf_epochs"], sf_epochs=t["sf_epochs"], patience=t["patience"],
        sf_window_patches=t["sf_window_patches"],
        kernel_sigmas=tuple(t["kernel_sigmas"]), seed=cfg["seed"],
        sf_enabled=t["sf_enabled"], mmd_enabled=t["mmd_enabled"],
        mpp_squared=t["mpp_squared"], grad_clip=t["grad_clip"],
        mmd_subsample=t["mmd_subsample"])


def metrics_config_from(cfg: dict) -> metrics.MetricsConfig:
    m = cfg["metrics"]
    return metrics.MetricsConfig(
        epsilon=m["epsilon"], steps_per_TL=cfg["system"]["points_per_tl"],
        gp_n_radii=m["gp_n_radii"], gp_quantiles=tuple(m["gp_quantiles"]),
        gp_subsample=m["gp_subsample"], gmm_scale=m["gmm_scale"],
        mc_samples=m["mc_samples"], subsample_cap=m["subsample_cap"])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    sys_cfg = cfg["system"]
    pptl = sys_cfg["points_per_tl"]

    if sys_cfg.get("import_path"):
        traj = _import_csv(sys_cfg["import_path"], pptl)
        dynamics.save_trajectory_csv(traj, _traj_path(out_dir), meta={
            "system": "imported", "params": {}, "seed": cfg["seed"],
            "source": sys_cfg["import_path"]})
        print(f"imported {len(traj)} steps at {pptl} steps per Lyapunov time")
        return 0

    system = dynamics.make_system(sys_cfg["name"], dim=sys_cfg.get("dim"),
                                  params=sys_cfg.get("params"))
    x0 = dynamics.default_initial_state(system)
    mle_cfg = sys_cfg["mle"]
    lam = dynamics.estimate_mle(system, x0, dt=mle_cfg["dt"],
                                horizon_steps=mle_cfg["horizon_steps"],
                                renorm_interval=mle_cfg["renorm_interval"],
                                delta0=mle_cfg["delta0"])
    stride = dynamics.lyapunov_stride(lam, sys_cfg["dt"], pptl)
    if stride < 1:
        raise ResolutionTooCoarseError(f"dt={sys_cfg['dt']} too coarse for {pptl}/T_L")
    print(f"lambda_max={lam:.4f}  T_L={1.0 / lam:.3f}  stride={stride}")

    transient = int(round(sys_cfg["transient_tl"] / (lam * sys_cfg["dt"])))
    fine = dynamics.integrate(system, x0, sys_cfg["dt"],
                              n_steps=sys_cfg["n_points"] * stride,
                              transient_steps=transient, seed=cfg["seed"],
                              noise_sigma=sys_cfg["noise_sigma"])
    traj = dynamics.Trajectory(fine.states[::stride].copy(), dt=sys_cfg["dt"] * stride,
                               steps_per_lyapunov_time=pptl)
    dynamics.save_trajectory_csv(traj, _traj_path(out_dir), meta={
        "system": system.name, "params": system.params, "seed": cfg["seed"],
        "lambda_max": lam, "stride": stride, "noise_sigma": sys_cfg["noise_sigma"]})

    if sys_cfg["n_test_ics"] > 0:
        box = dynamics.attractor_box(traj.states)
        tests = dynamics.generate_test_trajectories(
            system, sys_cfg["n_test_ics"], sys_cfg["dt"], stride, pptl,
            seed=cfg["seed"] + 1000, box=box, transient_steps=transient)
        os.makedirs(_case_dir(out_dir), exist_ok=True)
        for i, tt in enumerate(tests):
            dynamics.save_trajectory_csv(tt, os.path.join(_case_dir(out_dir), f"case_{i:03d}.csv"),
                                         meta={"system": system.name, "case": i})
    print(f"wrote {len(traj)} steps to {_traj_path(out_dir)}")
    return 0


def _import_csv(path: str, points_per_tl: int) -> dynamics.Trajectory:
    if not os.path.exists(path):
        raise ConfigError(f"import file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        drop_t = header and header[0].strip().lower() == "t"
        rows = []
        for row in reader:
            vals = row[1:] if drop_t else row
            rows.append([float(v) for v in vals])
    if not rows:
        raise DatasetTooShortError(required=1, got=0)
    return dynamics.Trajectory(np.asarray(rows), dt=1.0,
                               steps_per_lyapunov_time=points_per_tl)


def cmd_select_embedding(cfg: dict, out_dir: str, traj_path: str | None = None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    path = traj_path or _traj_path(out_dir)
    traj, _ = dynamics.load_trajectory_csv(path)
    e = cfg["embedding"]
    chosen, info = embedding.select_embedding(
        traj.states, tau_max=e["tau_max"], m_max=e["m_max"], n_bins=e["n_bins"],
        radius=e["radius"], saturation_tol=e["saturation_tol"])
    var0 = info["per_variable"][0]
    with open(os.path.join(out_dir, "ami.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "ami"])
        for i, v in enumerate(var0["ami"], start=1):
            writer.writerow([i, repr(v)])
    with open(os.path.join(out_dir, "fnn.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "fnn"])
        for i, v in enumerate(var0["fnn"], start=1):
            writer.writerow([i, repr(v)])
    selected = json.loads(json.dumps(cfg))
    selected["embedding"]["m"] = chosen.m
    selected["embedding"]["tau"] = chosen.tau
    with open(os.path.join(out_dir, "config_selected.json"), "w") as fh:
        json.dump(selected, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "embedding.json"), "w") as fh:
        json.dump({"m": chosen.m, "tau": chosen.tau, "enabled": True,
                   "patch_size": cfg["embedding"]["patch_size"],
                   "disagreement": info["disagreement"]}, fh, indent=1, sort_keys=True)
    if info["disagreement"]:
        print("note: per-variable selections disagree; using variable 0")
    print(f"selected m={chosen.m} tau={chosen.tau}")
    return 0


def cmd_train(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    split = assemble_dataset(cfg, out_dir)
    n_vars = split.train_segment.shape[1]
    mc = model_config_from(cfg, n_vars)
    tc = train_config_from(cfg)
    model = ForecastModel(mc, seed=cfg["seed"])
    history = training.train_teacher_forcing(split, model, tc)
    run_meta = {"config_hash": hash_config(cfg), "stage": "tf"}
    save_checkpoint(model, os.path.join(out_dir, "checkpoint_tf"), extra_meta=run_meta)
    if tc.sf_enabled and not mc.encoder_oriented:
        history += training.train_student_forcing(split, model, tc)
        save_checkpoint(model, os.path.join(out_dir, "checkpoint_sf"),
                        extra_meta={"config_hash": hash_config(cfg), "stage": "sf"})
    _write_losses_csv(os.path.join(out_dir, "losses.csv"), history)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({**cfg, "config_hash": hash_config(cfg)}, fh, indent=1, sort_keys=True)
    print(f"trained {len(history)} epochs; params={model.param_count()}")
    return 0


def _final_checkpoint(out_dir: str) -> str:
    sf = os.path.join(out_dir, "checkpoint_sf")
    tf = os.path.join(out_dir, "checkpoint_tf")
    if os.path.exists(sf + ".json"):
        return sf
    return tf


def cmd_forecast(cfg: dict, out_dir: str, checkpoint: str | None,
                 context_path: str, horizon_tl: int) -> int:
    os.makedirs(out_dir, exist_ok=True)
    ckpt = checkpoint or _final_checkpoint(out_dir)
    if not os.path.exists(ckpt + ".json"):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    context, _ = dynamics.load_trajectory_csv(context_path)
    pptl = cfg["system"]["points_per_tl"]
    from .model import autoregressive_rollout
    horizon_patches = -(-horizon_tl * pptl // model.cfg.patch_size)
    out = autoregressive_rollout(model, context, horizon_patches)
    out_path = os.path.join(out_dir, "forecast.csv")
    dynamics.save_trajectory_csv(out, out_path, meta={"horizon_tl": horizon_tl})
    print(f"wrote {len(out)} forecast steps to {out_path}")
    return 0


def cmd_evaluate(cfg: dict, out_dir: str, checkpoint: str | None,
                 oracle: bool = False, persistence: bool = False, jobs: int = 1) -> int:
    os.makedirs(out_dir, exist_ok=True)
    split = assemble_dataset(cfg, out_dir)
    mcfg = metrics_config_from(cfg)
    if oracle:
        forecaster = metrics.OracleForecaster(split.test_cases)
        tag = "oracle"
    elif persistence:
        forecaster = metrics.PersistenceForecaster()
        tag = "persistence"
    else:
        ckpt = checkpoint or _final_checkpoint(out_dir)
        if not os.path.exists(ckpt + ".json"):
            raise ConfigError(f"checkpoint not found: {ckpt}")
        forecaster = metrics.ModelForecaster(load_checkpoint(ckpt))
        tag = os.path.basename(ckpt)
    report, rows = metrics.evaluate(forecaster, split.test_cases, mcfg,
                                    seed=cfg["seed"], jobs=jobs)
    run_id = hash_config({**cfg, "forecaster": tag})
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(metrics.report_to_json(report, extra={
            "config_hash": hash_config(cfg), "run_id": run_id, "forecaster": tag}))
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "excluded", "vpt_TL", "smape_at_1", "smape_at_4",
                         "smape_at_10", "one_step_mae", "dim_truth", "dim_pred", "d_stsp"])
        for row in rows:
            if row["excluded"]:
                writer.writerow([row["case"], 1, "", "", "", "", "", "", "", ""])
            else:
                writer.writerow([row["case"], 0] + [
                    repr(row.get(k, "")) if isinstance(row.get(k), float) else ""
                    for k in ("vpt_TL", "smape_at_1", "smape_at_4", "smape_at_10",
                              "one_step_mae", "dim_truth", "dim_pred", "d_stsp")])
    fc_dir = os.path.join(out_dir, "forecasts")
    os.makedirs(fc_dir, exist_ok=True)
    for row in rows:
        if row.get("forecast") is None:
            continue
        traj = dynamics.Trajectory(row["forecast"], dt=split.dt,
                                   steps_per_lyapunov_time=split.steps_per_TL)
        dynamics.save_trajectory_csv(
            traj, os.path.join(fc_dir, f"case_{row['case']:03d}.csv"),
            meta={"case": row["case"]})
    print(f"vpt={report.vpt_TL:.3f} T_L  d_frac={report.d_frac:.4f}  "
          f"d_stsp={report.d_stsp:.4f}  excluded={report.n_excluded}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run config JSON")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default="run", help="run directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers")

    parser = argparse.ArgumentParser(prog="chaoscast",
                                     description="Chaotic system forecasting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate or import a trajectory")
    p.add_argument("--system", default=None)
    p.add_argument("--steps", type=int, default=None, help="resampled trajectory length")
    p.add_argument("--noise", type=float, default=None, help="observation noise std")
    p.add_argument("--import", dest="import_path", default=None, help="external CSV")
    p.add_argument("--steps-per-tl", type=int, default=None)

    p = sub.add_parser("select-embedding", parents=[common],
                       help="choose (m, tau) from the trajectory")
    p.add_argument("--trajectory", default=None)

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--no-pir", action="store_true", help="disable delay embedding")
    p.add_argument("--no-rs", action="store_true", help="conventional layer stacking")
    p.add_argument("--no-mpp", action="store_true", help="drop multi-patch modules")
    p.add_argument("--no-sf", action="store_true", help="skip student forcing")
    p.add_argument("--no-mmd", action="store_true", help="drop the MMD regularizer")
    p.add_argument("--encoder-oriented", action="store_true", help="window-head variant")

    p = sub.add_parser("forecast", parents=[common], help="roll out from a context file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--context", required=True)
    p.add_argument("--horizon-tl", type=int, default=10)

    p = sub.add_parser("evaluate", parents=[common], help="run the test protocol")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true", help="debug: replay ground truth")
    p.add_argument("--persistence", action="store_true", help="constant-last-value baseline")
    return parser


def _ablation_overrides(args) -> dict:
    over: dict = {"embedding": {}, "model": {}, "training": {}}
    if args.no_pir:
        over["embedding"]["enabled"] = False
    if args.no_rs:
        over["model"]["rs_enabled"] = False
    if args.no_mpp:
        over["model"]["M"] = 0
    if args.no_sf:
        over["training"]["sf_enabled"] = False
    if args.no_mmd:
        over["training"]["mmd_enabled"] = False
    if args.encoder_oriented:
        over["model"]["encoder_oriented"] = True
        over["model"]["M"] = 0
        over["training"]["sf_enabled"] = False
    return {k: v for k, v in over.items() if v}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides: dict = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.command == "simulate":
            sys_over = {}
            if args.system is not None:
                sys_over["name"] = args.system
            if args.steps is not None:
                sys_over["n_points"] = args.steps
            if args.noise is not None:
                sys_over["noise_sigma"] = args.noise
            if args.import_path is not None:
                sys_over["import_path"] = args.import_path
            if args.steps_per_tl is not None:
                sys_over["points_per_tl"] = args.steps_per_tl
            if sys_over:
                overrides["system"] = sys_over
        elif args.command == "train":
            overrides.update(_ablation_overrides(args))
        cfg = load_config(args.config, overrides)

        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "select-embedding":
            return cmd_select_embedding(cfg, args.out, args.trajectory)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "forecast":
            return cmd_forecast(cfg, args.out, args.checkpoint, args.context,
                                args.horizon_tl)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.out, args.checkpoint, oracle=args.oracle,
                                persistence=args.persistence, jobs=args.jobs)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as err:
        print(f"training error: {err}", file=sys.stderr)
        return EXIT_TRAINING
    except RolloutDivergedError as err:
        print(f"evaluation error: {err}", file=sys.stderr)
        return EXIT_EVALUATION
    except ChaoscastError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
