"""Forecast evaluation.

Point-wise accuracy: per-step symmetric percentage error, the valid
prediction time it induces, and the one-step mean absolute error.
Attractor fidelity: correlation-dimension error between true and forecast
point clouds, and a Monte-Carlo KL divergence between Gaussian-mixture
approximations of the two state distributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .dynamics import Trajectory
from .errors import (
    ConfigError,
    DegenerateAttractorError,
    HorizonTooShortError,
    RolloutDivergedError,
)


@dataclass
class MetricsConfig:
    epsilon: float = 30.0        # VPT threshold on the per-step error
    steps_per_TL: int = 30
    gp_n_radii: int = 12
    gp_quantiles: tuple = (0.002, 0.05)  # small-r scaling regime
    gp_subsample: int = 2000
    gmm_scale: float = 1.0       # isotropic component std, standardized space
    mc_samples: int = 5000
    subsample_cap: int = 500     # mixture components per cloud
    log_floor: float = -700.0

    def __post_init__(self):
        if not (0.0 < self.epsilon < 200.0):
            raise ConfigError("epsilon must lie in (0, 200)")
        if self.mc_samples < 100:
            raise ConfigError("mc_samples must be >= 100")


@dataclass
class MetricsReport:
    vpt_TL: float = 0.0
    smape_at: dict = field(default_factory=dict)   # horizon in T_L -> value
    one_step_mae: float = 0.0
    d_frac: float = 0.0
    d_stsp: float = 0.0
    n_test_cases: int = 0
    n_excluded: int = 0
    n_dim_failures: int = 0   # cases whose forecast cloud had no dimension
    ci95: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "vpt_TL": self.vpt_TL,
            "smape_at": {str(k): v for k, v in self.smape_at.items()},
            "one_step_mae": self.one_step_mae,
            "d_frac": self.d_frac,
            "d_stsp": self.d_stsp,
            "n_test_cases": self.n_test_cases,
            "n_excluded": self.n_excluded,
            "n_dim_failures": self.n_dim_failures,
            "ci95": self.ci95,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(vpt_TL=d["vpt_TL"],
                   smape_at={int(k): v for k, v in d["smape_at"].items()},
                   one_step_mae=d["one_step_mae"], d_frac=d["d_frac"],
                   d_stsp=d["d_stsp"], n_test_cases=d["n_test_cases"],
                   n_excluded=d["n_excluded"],
                   n_dim_failures=d.get("n_dim_failures", 0), ci95=d["ci95"])


# ---------------------------------------------------------------------------
# point-wise metrics


def smape_pointwise(x: np.ndarray, x_hat: np.ndarray) -> float:
    """200 * |x - x_hat| / (|x| + |x_hat|) with Euclidean norms; 0 when both
    vectors vanish. Bounded by [0, 200]."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    denom = np.linalg.norm(x) + np.linalg.norm(x_hat)
    if denom == 0.0:
        return 0.0
    return 200.0 * float(np.linalg.norm(x - x_hat)) / denom


def _smape_series(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    num = np.linalg.norm(truth - pred, axis=1)
    denom = np.linalg.norm(truth, axis=1) + np.linalg.norm(pred, axis=1)
    out = np.zeros(truth.shape[0])
    nz = denom > 0
    out[nz] = 200.0 * num[nz] / denom[nz]
    return out


def smape_at(truth: np.ndarray, pred: np.ndarray, k_TL: int, cfg: MetricsConfig) -> float:
    """Mean per-step error over the first k_TL Lyapunov times."""
    horizon = k_TL * cfg.steps_per_TL
    if truth.shape[0] < horizon or pred.shape[0] < horizon:
        raise HorizonTooShortError(f"need {horizon} steps, have {min(truth.shape[0], pred.shape[0])}")
    return float(np.mean(_smape_series(truth[:horizon], pred[:horizon])))


def vpt(truth: np.ndarray, pred: np.ndarray, cfg: MetricsConfig) -> float:
    """Valid prediction time in Lyapunov times: steps until the per-step
    error first reaches the threshold (full horizon if it never does)."""
    n = min(truth.shape[0], pred.shape[0])
    errors = _smape_series(truth[:n], pred[:n])
    exceeded = np.nonzero(errors >= cfg.epsilon)[0]
    steps = int(exceeded[0]) if exceeded.size else n
    return steps / cfg.steps_per_TL


# ---------------------------------------------------------------------------
# attractor-statistics metrics


def _subsample_even(points: np.ndarray, cap: int) -> np.ndarray:
    if points.shape[0] <= cap:
        return points
    idx = np.linspace(0, points.shape[0] - 1, cap).astype(int)
    return points[idx]


def correlation_dimension(points: np.ndarray, cfg: MetricsConfig) -> float:
    """Slope of log C(r) against log r, where C(r) is the fraction of point
    pairs within distance r; radii are log-spaced between distance quantiles.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 100:
        raise ConfigError(f"need at least 100 points, got {points.shape}")
    pts = _subsample_even(points, cfg.gp_subsample)
    if float(pts.std(axis=0).max()) == 0.0:
        raise DegenerateAttractorError("point cloud has zero variance")
    dists = pdist(pts)
    q_lo, q_hi = cfg.gp_quantiles
    lo = float(np.quantile(dists, q_lo))
    hi = float(np.quantile(dists, q_hi))
    positive = dists[dists > 0]
    if positive.size == 0:
        raise DegenerateAttractorError("all pairwise distances are zero")
    lo = max(lo, float(positive.min()))
    if hi <= lo:
        hi = float(positive.max())
    radii = np.exp(np.linspace(np.log(lo), np.log(hi), cfg.gp_n_radii))
    counts = np.array([(dists <= r).mean() for r in radii])
    mask = counts > 0
    slope = np.polyfit(np.log(radii[mask]), np.log(counts[mask]), 1)[0]
    return float(slope)


def d_frac_error(truth_dims: np.ndarray, pred_dims: np.ndarray) -> float:
    """Root mean square error between per-case correlation dimensions."""
    truth_dims = np.asarray(truth_dims, dtype=np.float64)
    pred_dims = np.asarray(pred_dims, dtype=np.float64)
    if truth_dims.size == 0 or truth_dims.shape != pred_dims.shape:
        raise ConfigError("need matching non-empty dimension arrays")
    return float(np.sqrt(np.mean((truth_dims - pred_dims) ** 2)))


def _gmm_logpdf(x: np.ndarray, centers: np.ndarray, scale: float, floor: float) -> np.ndarray:
    """Log density of an equal-weight isotropic Gaussian mixture."""
    V = centers.shape[1]
    d2 = ((x * x).sum(axis=1)[:, None] + (centers * centers).sum(axis=1)[None, :]
          - 2.0 * x @ centers.T)
    np.maximum(d2, 0.0, out=d2)
    log_norm = -0.5 * V * np.log(2.0 * np.pi * scale * scale)
    comp = -d2 / (2.0 * scale * scale) + log_norm
    out = logsumexp(comp, axis=1) - np.log(centers.shape[0])
    return np.maximum(out, floor)


def d_stsp(truth_states: np.ndarray, pred_states: np.ndarray, cfg: MetricsConfig,
           seed: int = 0) -> float:
    """KL(truth || pred) between kernel-style Gaussian mixtures.

    One isotropic component per subsampled point, equal weights; estimated by
    Monte Carlo with draws from the truth mixture. Both clouds are expressed
    in the truth cloud's standardized coordinates.
    """
    truth_states = np.asarray(truth_states, dtype=np.float64)
    pred_states = np.asarray(pred_states, dtype=np.float64)
    if truth_states.size == 0 or pred_states.size == 0:
        raise ConfigError("state clouds must be non-empty")
    mean = truth_states.mean(axis=0)
    std = truth_states.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    t = (truth_states - mean) / std
    p = (pred_states - mean) / std
    t = _subsample_even(t, cfg.subsample_cap)
    p = _subsample_even(p, cfg.subsample_cap)
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, t.shape[0], size=cfg.mc_samples)
    draws = t[comp] + cfg.gmm_scale * rng.standard_normal((cfg.mc_samples, t.shape[1]))
    log_t = _gmm_logpdf(draws, t, cfg.gmm_scale, cfg.log_floor)
    log_p = _gmm_logpdf(draws, p, cfg.gmm_scale, cfg.log_floor)
    return float(np.mean(log_t - log_p))


# ---------------------------------------------------------------------------
# forecasters and the evaluation protocol


class PersistenceForecaster:
    """Constant-last-value baseline."""

    def forecast(self, context: Trajectory, n_steps: int) -> Trajectory:
        last = context.states[-1]
        return Trajectory(np.tile(last, (n_steps, 1)), dt=context.dt,
                          steps_per_lyapunov_time=context.steps_per_lyapunov_time)


class OracleForecaster:
    """Debug forecaster that replays the ground truth.

    Targets are looked up by context content, so instances are stateless and
    safe under parallel per-case evaluation.
    """

    def __init__(self, cases: list):
        self.by_context = {ctx.states.tobytes(): tgt for ctx, tgt in cases}

    def forecast(self, context: Trajectory, n_steps: int) -> Trajectory:
        tgt = self.by_context[context.states.tobytes()]
        return Trajectory(tgt.states[:n_steps].copy(), dt=tgt.dt,
                          steps_per_lyapunov_time=tgt.steps_per_lyapunov_time)


class ModelForecaster:
    """Rollout adapter for a trained model."""

    def __init__(self, model):
        self.model = model

    def forecast(self, context: Trajectory, n_steps: int) -> Trajectory:
        from .model import autoregressive_rollout
        D = self.model.cfg.patch_size
        horizon = -(-n_steps // D)
        out = autoregressive_rollout(self.model, context, horizon)
        return Trajectory(out.states[:n_steps], dt=out.dt,
                          steps_per_lyapunov_time=out.steps_per_lyapunov_time)


def one_step_mae(forecaster, test_cases: list) -> float:
    """Mean absolute componentwise error of the first step past each context."""
    errs = []
    for context, target in test_cases:
        pred = forecaster.forecast(context, n_steps=1)
        errs.append(float(np.mean(np.abs(pred.states[0] - target.states[0]))))
    return float(np.mean(errs))


def _ci95(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def _evaluate_case(args) -> dict:
    forecaster, i, context, target, cfg, seed = args
    n_steps = len(target)
    try:
        pred = forecaster.forecast(context, n_steps=n_steps)
    except RolloutDivergedError as err:
        return {"case": i, "excluded": True, "reason": str(err)}
    truth = target.states
    fcst = pred.states[:n_steps]
    row = {"case": i, "excluded": False,
           "vpt_TL": vpt(truth, fcst, cfg),
           "one_step_mae": float(np.mean(np.abs(fcst[0] - truth[0])))}
    for k in (1, 4, 10):
        horizon = k * cfg.steps_per_TL
        if truth.shape[0] >= horizon:
            row[f"smape_at_{k}"] = smape_at(truth, fcst, k, cfg)
    try:
        dim_truth = correlation_dimension(truth, cfg)
        dim_pred = correlation_dimension(fcst, cfg)
        row["dim_truth"], row["dim_pred"] = dim_truth, dim_pred
    except DegenerateAttractorError as err:
        row["dim_error"] = f"case {i}: {err}"
    row["d_stsp"] = d_stsp(truth, fcst, cfg, seed=seed + i)
    row["forecast"] = fcst
    return row


def evaluate(forecaster, test_cases: list, cfg: MetricsConfig, seed: int = 0,
             jobs: int = 1) -> tuple[MetricsReport, list[dict]]:
    """Run the 10-T_L protocol over all test cases and aggregate.

    Per-case rollout divergence excludes that case and is counted in the
    report. Aggregates are mean +/- 95% CI over cases; the fractal-dimension
    error is the RMSE across cases. Cases are independent, so `jobs > 1`
    fans them out across processes with a deterministic ordered reduction.
    """
    if not test_cases:
        raise ConfigError("no test cases")
    tasks = [(forecaster, i, ctx, tgt, cfg, seed)
             for i, (ctx, tgt) in enumerate(test_cases)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate_case, tasks))
    else:
        rows = [_evaluate_case(t) for t in tasks]
    excluded = sum(1 for r in rows if r["excluded"])

    kept = [r for r in rows if not r["excluded"]]
    if not kept:
        raise RolloutDivergedError(step=0, message="every test case diverged")
    report = MetricsReport(n_test_cases=len(kept), n_excluded=excluded)
    vpts = np.array([r["vpt_TL"] for r in kept])
    report.vpt_TL = float(vpts.mean())
    report.ci95["vpt_TL"] = _ci95(vpts)
    for k in (1, 4, 10):
        key = f"smape_at_{k}"
        vals = np.array([r[key] for r in kept if key in r])
        if vals.size:
            report.smape_at[k] = float(vals.mean())
            report.ci95[key] = _ci95(vals)
    maes = np.array([r["one_step_mae"] for r in kept])
    report.one_step_mae = float(maes.mean())
    report.ci95["one_step_mae"] = _ci95(maes)
    with_dims = [r for r in kept if "dim_truth" in r]
    report.n_dim_failures = len(kept) - len(with_dims)
    if with_dims:
        dims_t = np.array([r["dim_truth"] for r in with_dims])
        dims_p = np.array([r["dim_pred"] for r in with_dims])
        report.d_frac = d_frac_error(dims_t, dims_p)
        report.ci95["d_frac"] = _ci95(np.abs(dims_t - dims_p))
    else:
        report.d_frac = float("nan")
    kls = np.array([r["d_stsp"] for r in kept])
    report.d_stsp = float(kls.mean())
    report.ci95["d_stsp"] = _ci95(kls)
    return report, rows


def report_to_json(report: MetricsReport, extra: dict | None = None) -> str:
    payload = report.to_dict()
    payload.update(extra or {})
    return json.dumps(payload, indent=1, sort_keys=True)
