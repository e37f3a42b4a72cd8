"""Chaotic ODE systems: integration, Lyapunov-exponent estimation, and
dataset construction on a Lyapunov-time grid.

All vector fields accept states of shape (..., V) so independent initial
conditions can be integrated as one batch. Randomness flows through explicit
seeds; identical seeds give bit-identical trajectories.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DatasetTooShortError,
    IntegrationDivergedError,
    ResolutionTooCoarseError,
)

# ---------------------------------------------------------------------------
# systems


@dataclass(frozen=True)
class OdeSystem:
    """A named autonomous ODE with fixed parameters.

    `name` selects the vector field; `params` must contain exactly the
    constants that field needs.
    """

    name: str
    dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        spec = _SYSTEMS.get(self.name)
        if spec is None:
            raise ConfigError(f"unknown system '{self.name}'; known: {sorted(_SYSTEMS)}")
        required, fixed_dim, _ = spec
        if fixed_dim is not None and self.dim != fixed_dim:
            raise ConfigError(f"{self.name} is {fixed_dim}-dimensional, got dim={self.dim}")
        if fixed_dim is None and self.dim < 4:
            raise ConfigError(f"{self.name} needs dim >= 4, got {self.dim}")
        if set(self.params) != set(required):
            raise ConfigError(
                f"{self.name} needs params {sorted(required)}, got {sorted(self.params)}")

    def vector_field(self, x: np.ndarray) -> np.ndarray:
        """Time derivative at state(s) x of shape (..., V)."""
        return _SYSTEMS[self.name][2](np.asarray(x, dtype=np.float64), self.params)


def _f_lorenz63(x, p):
    dx = np.empty_like(x)
    dx[..., 0] = p["sigma"] * (x[..., 1] - x[..., 0])
    dx[..., 1] = p["rho"] * x[..., 0] - x[..., 1] - x[..., 0] * x[..., 2]
    dx[..., 2] = x[..., 0] * x[..., 1] - p["beta"] * x[..., 2]
    return dx


def _f_rossler(x, p):
    dx = np.empty_like(x)
    dx[..., 0] = -(x[..., 1] + x[..., 2])
    dx[..., 1] = x[..., 0] + p["alpha"] * x[..., 1]
    dx[..., 2] = p["beta"] + x[..., 2] * (x[..., 0] - p["gamma"])
    return dx


def _f_lorenz96(x, p):
    # cyclic coupling (x_{k+1} - x_{k-2}) x_{k-1} - x_k + F
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return (xp1 - xm2) * xm1 - x + p["F"]


def _f_forced_fhn(x, p):
    dx = np.empty_like(x)
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    dx[..., 0] = p["a"] + u * u * v - (p["b"] + 1.0) * u + p["f"] * np.cos(w)
    dx[..., 1] = p["b"] * u - u * u * v
    dx[..., 2] = p["omega"]
    return dx


def _f_hindmarsh_rose(x, p):
    dx = np.empty_like(x)
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    u2 = u * u
    u3 = u2 * u
    dx[..., 0] = (v - p["a"] * u3 + p["b"] * u2 + w) / p["tau_x"] - u
    dx[..., 1] = w - p["a"] * u3 - (p["d"] - p["b"]) * u2
    dx[..., 2] = (p["c"] - p["s"] * u - w) / p["tau_z"]
    return dx


# name -> (required params with defaults, fixed dim or None, field)
_SYSTEMS = {
    "lorenz63": ({"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}, 3, _f_lorenz63),
    "rossler": ({"alpha": 0.2, "beta": 0.2, "gamma": 5.7}, 3, _f_rossler),
    "lorenz96": ({"F": 20.0}, None, _f_lorenz96),
    "forced_fhn": ({"a": 0.7, "b": 0.8, "f": 0.40, "omega": 0.044}, 3, _f_forced_fhn),
    "hindmarsh_rose": ({"a": 0.49, "b": 1.0, "c": 0.0322, "d": 1.0,
                        "s": 1.0, "tau_x": 0.03, "tau_z": 0.8}, 3, _f_hindmarsh_rose),
}

_DEFAULT_X0 = {
    "lorenz63": (1.0, 1.0, 1.0),
    "rossler": (1.0, 1.0, 1.0),
    "forced_fhn": (0.5, 0.5, 0.0),
    "hindmarsh_rose": (0.1, 0.0, 0.0),
}


def make_system(name: str, dim: int | None = None, params: dict | None = None) -> OdeSystem:
    """Build a system with canonical parameters, overridable per key."""
    if name not in _SYSTEMS:
        raise ConfigError(f"unknown system '{name}'; known: {sorted(_SYSTEMS)}")
    defaults, fixed_dim, _ = _SYSTEMS[name]
    merged = dict(defaults)
    for key, value in (params or {}).items():
        if key not in defaults:
            raise ConfigError(f"{name} has no parameter '{key}'")
        merged[key] = float(value)
    if fixed_dim is not None:
        dim = fixed_dim
    elif dim is None:
        dim = 5
    return OdeSystem(name=name, dim=dim, params=merged)


def default_initial_state(system: OdeSystem) -> np.ndarray:
    if system.name == "lorenz96":
        x0 = np.full(system.dim, system.params["F"])
        x0[0] += 0.01  # break the homogeneous equilibrium
        return x0
    return np.asarray(_DEFAULT_X0[system.name], dtype=np.float64)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """A (T x V) state sequence with its sampling interval."""

    states: np.ndarray
    dt: float
    steps_per_lyapunov_time: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ConfigError(f"states must be (T, V) with T >= 1, got {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise IntegrationDivergedError(int(np.argwhere(~np.isfinite(self.states))[0][0]))

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_vars(self) -> int:
        return self.states.shape[1]


def save_trajectory_csv(traj: Trajectory, path: str, meta: dict | None = None) -> None:
    """Write `t,x0,...,x{V-1}` rows with round-tripping float reprs, plus a
    JSON sidecar at `<path>.meta.json`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(traj.n_vars)])
        for i, row in enumerate(traj.states):
            writer.writerow([repr(i * traj.dt)] + [repr(float(v)) for v in row])
    sidecar = {"dt": traj.dt, "steps_per_lyapunov_time": traj.steps_per_lyapunov_time}
    sidecar.update(meta or {})
    with open(path + ".meta.json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_trajectory_csv(path: str) -> tuple[Trajectory, dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    if not rows:
        raise DatasetTooShortError(required=1, got=0)
    meta: dict = {}
    try:
        with open(path + ".meta.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    dt = float(meta.get("dt", 1.0))
    spl = meta.get("steps_per_lyapunov_time")
    traj = Trajectory(np.asarray(rows), dt=dt,
                      steps_per_lyapunov_time=int(spl) if spl else None)
    return traj, meta


# ---------------------------------------------------------------------------
# integration


def rk4_step(system: OdeSystem, state: np.ndarray, dt: float, step_index: int = 0) -> np.ndarray:
    """One classical Runge-Kutta-4 update; raises on non-finite output."""
    x = np.asarray(state, dtype=np.float64)
    f = system.vector_field
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationDivergedError(step_index)
    return out


def integrate(system: OdeSystem, x0: np.ndarray, dt: float, n_steps: int,
              transient_steps: int = 0, seed: int = 0, noise_sigma: float = 0.0) -> Trajectory:
    """Integrate past a discarded transient, then record `n_steps` states.

    Observation noise (if any) is added to the recorded copy only; the
    integration path itself is never perturbed.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (system.dim,):
        raise ConfigError(f"x0 must have shape ({system.dim},), got {x.shape}")
    for i in range(transient_steps):
        x = rk4_step(system, x, dt, step_index=i)
    states = np.empty((n_steps, system.dim))
    states[0] = x
    for i in range(1, n_steps):
        x = rk4_step(system, x, dt, step_index=transient_steps + i)
        states[i] = x
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        states = states + rng.normal(0.0, noise_sigma, size=states.shape)
    return Trajectory(states, dt=dt)


# ---------------------------------------------------------------------------
# maximal Lyapunov exponent (Benettin renormalization)


@dataclass
class TangentState:
    """Bookkeeping for one Benettin renormalization cycle."""

    base: np.ndarray
    perturbation: np.ndarray  # unit vector
    log_stretch_accum: float = 0.0


def estimate_mle(system: OdeSystem, x0: np.ndarray, dt: float, horizon_steps: int,
                 renorm_interval: int = 10, delta0: float = 1e-7,
                 transient_steps: int | None = None, burn_in_fraction: float = 0.1) -> float:
    """Maximal Lyapunov exponent by co-integrating a perturbed trajectory.

    Log stretch factors accumulate at each renormalization; the estimate is
    their sum over total accumulated time. The first `burn_in_fraction` of
    renormalization cycles is excluded so the perturbation can align with
    the most expanding direction.
    """
    if renorm_interval < 1 or horizon_steps < 10 * renorm_interval:
        raise ConfigError("need horizon_steps >> renorm_interval >= 1")
    if transient_steps is None:
        transient_steps = int(round(50.0 / dt))
    x = np.asarray(x0, dtype=np.float64).copy()
    for i in range(transient_steps):
        x = rk4_step(system, x, dt, step_index=i)

    direction = np.zeros(system.dim)
    direction[0] = 1.0
    ts = TangentState(base=x, perturbation=direction)
    n_cycles = horizon_steps // renorm_interval
    burn_in = int(math.ceil(n_cycles * burn_in_fraction))
    counted = 0

    pair = np.stack([ts.base, ts.base + delta0 * ts.perturbation])
    for cycle in range(n_cycles):
        for j in range(renorm_interval):
            pair = rk4_step(system, pair, dt, step_index=cycle * renorm_interval + j)
        diff = pair[1] - pair[0]
        dist = float(np.linalg.norm(diff))
        if dist == 0.0:
            ts.perturbation = direction  # f == 0 stub: no separation at all
        else:
            ts.perturbation = diff / dist
            if cycle >= burn_in:
                ts.log_stretch_accum += math.log(dist / delta0)
                counted += 1
        ts.base = pair[0]
        pair[1] = ts.base + delta0 * ts.perturbation
    if counted == 0:
        return 0.0
    return ts.log_stretch_accum / (counted * renorm_interval * dt)


def lyapunov_time(lambda_max: float) -> float:
    return 1.0 / lambda_max


# ---------------------------------------------------------------------------
# Lyapunov-grid resampling and splits


def resample_to_lyapunov_grid(traj: Trajectory, lambda_max: float,
                              points_per_TL: int) -> Trajectory:
    """Strided subsample so one Lyapunov time spans `points_per_TL` steps.

    The stride is rounded to the nearest integer; a stride below 1 means the
    source sampling is too coarse for the requested grid.
    """
    if lambda_max <= 0:
        raise ConfigError("lambda_max must be positive")
    if points_per_TL < 1:
        raise ConfigError("points_per_TL must be >= 1")
    stride = int(np.round(lyapunov_time(lambda_max) / (points_per_TL * traj.dt)))
    if stride < 1:
        raise ResolutionTooCoarseError(
            f"stride {stride} < 1: dt={traj.dt} too coarse for {points_per_TL}/T_L")
    return Trajectory(traj.states[::stride].copy(), dt=traj.dt * stride,
                      steps_per_lyapunov_time=points_per_TL)


def lyapunov_stride(lambda_max: float, dt: float, points_per_TL: int) -> int:
    return int(np.round(lyapunov_time(lambda_max) / (points_per_TL * dt)))


@dataclass
class DatasetSplit:
    """Windows for the two training stages plus held-out test cases.

    Window arrays are stacked verbatim slices of the source trajectory:
    train/val teacher-forcing windows are (n, window_len_tf, V), student-
    forcing windows (n, window_len_sf, V). Each test case pairs 1 T_L of
    context with 10 T_L of target.
    """

    train_tf: np.ndarray
    train_sf: np.ndarray
    val_tf: np.ndarray
    val_sf: np.ndarray
    test_cases: list
    window_len_tf: int
    window_len_sf: int
    dt: float
    steps_per_TL: int
    train_segment: np.ndarray  # contiguous slice the train windows come from


TEST_TARGET_TLS = 10  # forecast horizon of every test case, in Lyapunov times


def _sliding(arr: np.ndarray, width: int) -> np.ndarray:
    n = arr.shape[0] - width + 1
    if n <= 0:
        return np.empty((0, width, arr.shape[1]))
    idx = np.arange(width)[None, :] + np.arange(n)[:, None]
    return arr[idx]


def build_dataset(traj: Trajectory, points_per_TL: int, n_test_ics: int, seed: int,
                  val_len: int | None = None,
                  test_trajectories: list[Trajectory] | None = None) -> DatasetSplit:
    """Slice a resampled trajectory into shuffled training windows, a held-out
    validation segment, and test cases.

    Teacher-forcing windows span 1 T_L, student-forcing windows 2 T_L, both
    with unit stride. Test cases come from `test_trajectories` (fresh initial
    conditions) when given, otherwise from sliding windows over a reserved
    tail of `traj` (imported-data path).
    """
    wtf = points_per_TL
    wsf = 2 * points_per_TL
    if val_len is None:
        val_len = 5 * points_per_TL
    T = len(traj)
    V = traj.n_vars

    case_len = (1 + TEST_TARGET_TLS) * points_per_TL
    if test_trajectories is not None or n_test_ics == 0:
        tail = 0
    else:
        tail = case_len + (n_test_ics - 1) * points_per_TL
    required = wsf + val_len + tail
    if T < required:
        raise DatasetTooShortError(required=required, got=T)

    train_end = T - val_len - tail
    train_segment = traj.states[:train_end]
    val_segment = traj.states[train_end:train_end + val_len]
    tail_segment = traj.states[T - tail:] if tail else np.empty((0, V))

    rng = np.random.default_rng(seed)
    train_tf = _sliding(train_segment, wtf)
    train_sf = _sliding(train_segment, wsf)
    train_tf = train_tf[rng.permutation(train_tf.shape[0])]
    train_sf = train_sf[rng.permutation(train_sf.shape[0])]
    val_tf = _sliding(val_segment, wtf)
    val_sf = _sliding(val_segment, wsf)

    test_cases = []
    if test_trajectories is not None:
        for i, tt in enumerate(test_trajectories[:n_test_ics]):
            if len(tt) < case_len:
                raise DatasetTooShortError(required=case_len, got=len(tt))
            ctx = Trajectory(tt.states[:points_per_TL].copy(), dt=traj.dt,
                             steps_per_lyapunov_time=points_per_TL)
            tgt = Trajectory(tt.states[points_per_TL:case_len].copy(), dt=traj.dt,
                             steps_per_lyapunov_time=points_per_TL)
            test_cases.append((ctx, tgt))
    else:
        for i in range(n_test_ics):
            start = i * points_per_TL
            chunk = tail_segment[start:start + case_len]
            ctx = Trajectory(chunk[:points_per_TL].copy(), dt=traj.dt,
                             steps_per_lyapunov_time=points_per_TL)
            tgt = Trajectory(chunk[points_per_TL:].copy(), dt=traj.dt,
                             steps_per_lyapunov_time=points_per_TL)
            test_cases.append((ctx, tgt))

    return DatasetSplit(train_tf=train_tf, train_sf=train_sf,
                        val_tf=val_tf, val_sf=val_sf, test_cases=test_cases,
                        window_len_tf=wtf, window_len_sf=wsf,
                        dt=traj.dt, steps_per_TL=points_per_TL,
                        train_segment=train_segment)


def attractor_box(states: np.ndarray, pad_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box of a reference trajectory, slightly padded."""
    lo = states.min(axis=0)
    hi = states.max(axis=0)
    pad = pad_fraction * (hi - lo)
    return lo - pad, hi + pad


def generate_test_trajectories(system: OdeSystem, n: int, dt: float, stride: int,
                               points_per_TL: int, seed: int,
                               box: tuple[np.ndarray, np.ndarray],
                               transient_steps: int) -> list[Trajectory]:
    """Integrate `n` fresh initial conditions sampled uniformly from `box`,
    discard the transient, and resample each by `stride`."""
    rng = np.random.default_rng(seed)
    lo, hi = box
    out = []
    fine_steps = (1 + TEST_TARGET_TLS) * points_per_TL * stride
    for _ in range(n):
        x0 = rng.uniform(lo, hi)
        fine = integrate(system, x0, dt, n_steps=fine_steps,
                         transient_steps=transient_steps)
        out.append(Trajectory(fine.states[::stride].copy(), dt=dt * stride,
                              steps_per_lyapunov_time=points_per_TL))
    return out
