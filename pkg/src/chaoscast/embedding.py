"""Attractor reconstruction: data-driven (m, tau) selection, time-delay
embedding with front zero-padding, and patch tokenization.

Delay selection uses the first local minimum of average mutual information;
dimension selection uses saturation of a log-neighbor-count curve. Both are
invariant under affine rescaling of the series: AMI bins are equiprobable
(quantile) bins and the neighbor radius is expressed in standardized units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    ConfigError,
    DegenerateDistributionError,
    EmptyNeighborhoodError,
    NotEnoughStepsError,
)


@dataclass
class EmbeddingConfig:
    m: int = 1
    tau: int = 1
    enabled: bool = True  # off = feed the raw series (m=1, tau=1)

    def __post_init__(self):
        if self.m < 1 or self.tau < 1:
            raise ConfigError(f"need m >= 1 and tau >= 1, got m={self.m}, tau={self.tau}")

    def effective(self) -> tuple[int, int]:
        return (self.m, self.tau) if self.enabled else (1, 1)


@dataclass
class DelayEmbedded:
    """Per-variable delay coordinates, shape (V, T, m).

    data[v, t, j] = x_v[t - (m-1-j)*tau], zero where the index is negative,
    so the last delay coordinate is the raw series itself.
    """

    data: np.ndarray
    source_len: int


@dataclass
class PatchSequence:
    """N non-overlapping patches flattened to width D*V*m.

    Flattening order is time-within-patch major, then variable, then delay
    coordinate; trailing steps that do not fill a patch are dropped.
    """

    patches: np.ndarray
    patch_size: int
    n_patches: int


@dataclass
class Standardizer:
    """Per-dimension z-score statistics fit on the training segment."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray) -> "Standardizer":
        mean = states.mean(axis=0)
        std = states.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=mean, std=std)

    def apply(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std

    def invert(self, states: np.ndarray) -> np.ndarray:
        return states * self.std + self.mean


# ---------------------------------------------------------------------------
# delay selection


def _quantile_bins(series: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign each value to one of up to n_bins equiprobable bins."""
    edges = np.quantile(series, np.linspace(0.0, 1.0, n_bins + 1))
    inner = np.unique(edges[1:-1])
    if series.max() == series.min():
        raise DegenerateDistributionError("constant series has no distribution to bin")
    return np.searchsorted(inner, series, side="right")


def ami_curve(series: np.ndarray, tau_max: int, n_bins: int = 16) -> np.ndarray:
    """Average mutual information of (x_t, x_{t+tau}) for tau = 1..tau_max.

    Marginals and the joint are histogram estimates on quantile bins; the
    result is in nats.
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    T = series.size
    if tau_max < 1 or T <= tau_max:
        raise ConfigError(f"need T > tau_max >= 1, got T={T}, tau_max={tau_max}")
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    bins = _quantile_bins(series, n_bins)
    k = int(bins.max()) + 1
    out = np.empty(tau_max)
    for tau in range(1, tau_max + 1):
        a = bins[:-tau]
        b = bins[tau:]
        joint = np.bincount(a * k + b, minlength=k * k).astype(np.float64).reshape(k, k)
        joint /= joint.sum()
        pa = joint.sum(axis=1)
        pb = joint.sum(axis=0)
        mask = joint > 0
        denom = np.outer(pa, pb)
        out[tau - 1] = float(np.sum(joint[mask] * np.log(joint[mask] / denom[mask])))
    return out


def select_tau(ami: np.ndarray) -> tuple[int, bool]:
    """First local minimum of the AMI curve.

    Returns (tau, fallback). When no interior local minimum exists the global
    minimum index is returned with fallback=True.
    """
    ami = np.asarray(ami, dtype=np.float64)
    if ami.size < 3:
        raise ConfigError("ami curve must have length >= 3")
    for i in range(1, ami.size - 1):
        if ami[i - 1] > ami[i] < ami[i + 1]:
            return i + 1, False
    return int(np.argmin(ami)) + 1, True


# ---------------------------------------------------------------------------
# embedding-dimension selection


def _delay_vectors(series: np.ndarray, tau: int, m: int) -> np.ndarray:
    """All fully valid delay vectors (no padding), shape (T-(m-1)*tau, m)."""
    T = series.size
    n = T - (m - 1) * tau
    if n < 1:
        raise ConfigError(f"series too short for m={m}, tau={tau}")
    cols = [series[j * tau: j * tau + n] for j in range(m)]
    return np.stack(cols, axis=1)


def fnn_curve(series: np.ndarray, tau: int, m_max: int, radius: float = 0.3,
              max_points: int = 3000) -> np.ndarray:
    """Mean log neighbor count across embedding dimensions.

    The count radius is `radius` times the median pairwise distance of the
    m-dimensional cloud itself, so the statistic tracks how fast neighbor
    counts shrink as the attractor unfolds: it flattens once added delay
    coordinates stop separating points, while for noise every dimension
    keeps thinning neighborhoods. Counts include the point itself, keeping
    each term finite. Raises EmptyNeighborhoodError when the radius isolates
    every point. Long series are evenly subsampled to `max_points` before
    the quadratic distance computation.
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    if m_max < 2:
        raise ConfigError("m_max must be >= 2")
    sd = series.std()
    if sd == 0:
        raise DegenerateDistributionError("constant series")
    z = (series - series.mean()) / sd
    out = np.empty(m_max)
    for m in range(1, m_max + 1):
        pts = _delay_vectors(z, tau, m)
        if pts.shape[0] > max_points:
            idx = np.linspace(0, pts.shape[0] - 1, max_points).astype(int)
            pts = pts[idx]
        if pts.shape[0] == 1:
            out[m - 1] = 0.0  # a single point is its own whole neighborhood
            continue
        d = cdist(pts, pts)
        r = radius * float(np.median(d[np.triu_indices_from(d, k=1)]))
        counts = (d <= r).sum(axis=1)  # self-inclusive, so >= 1
        if np.all(counts == 1):
            raise EmptyNeighborhoodError(
                f"radius fraction {radius} leaves every point isolated at m={m}; increase it")
        out[m - 1] = float(np.mean(np.log(counts)))
    return out


def select_m(fnn: np.ndarray, saturation_tol: float = 0.05) -> tuple[int, bool]:
    """Smallest m whose curve value changed by < saturation_tol (relative).

    Returns (m, fallback); fallback=True means the curve never stabilized and
    m_max was returned.
    """
    fnn = np.asarray(fnn, dtype=np.float64)
    if fnn.size < 2:
        raise ConfigError("fnn curve must have length >= 2")
    for m in range(2, fnn.size + 1):
        prev, cur = fnn[m - 2], fnn[m - 1]
        if abs(cur - prev) < saturation_tol * abs(prev):
            return m, False
    return fnn.size, True


def select_embedding(states: np.ndarray, tau_max: int = 30, m_max: int = 8,
                     n_bins: int = 16, radius: float = 0.3,
                     saturation_tol: float = 0.05) -> tuple[EmbeddingConfig, dict]:
    """Pick (m, tau) on variable 0 and report per-variable disagreement.

    The same pair is applied to every variable; `info["per_variable"]` holds
    each variable's own selection so disagreement is visible.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    per_var = []
    for v in range(states.shape[1]):
        ami = ami_curve(states[:, v], tau_max=tau_max, n_bins=n_bins)
        tau, tau_fb = select_tau(ami)
        fnn = fnn_curve(states[:, v], tau=tau, m_max=m_max, radius=radius)
        m, m_fb = select_m(fnn, saturation_tol=saturation_tol)
        per_var.append({"m": m, "tau": tau, "tau_fallback": tau_fb, "m_fallback": m_fb,
                        "ami": ami.tolist(), "fnn": fnn.tolist()})
    chosen = per_var[0]
    disagree = any(p["m"] != chosen["m"] or p["tau"] != chosen["tau"] for p in per_var[1:])
    info = {"per_variable": per_var, "disagreement": disagree}
    return EmbeddingConfig(m=chosen["m"], tau=chosen["tau"], enabled=True), info


# ---------------------------------------------------------------------------
# embedding and patching


def delay_embed(states: np.ndarray, cfg: EmbeddingConfig) -> DelayEmbedded:
    """Delay-embed each variable of a (T, V) series into (V, T, m).

    The front is zero-padded so the embedded sequence keeps the source
    length; with the config disabled this is the identity embedding (m=1).
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ConfigError(f"states must be (T, V), got {states.shape}")
    m, tau = cfg.effective()
    T, V = states.shape
    if tau * (m - 1) >= T:
        warnings.warn(f"embedding window (m-1)*tau={(m - 1) * tau} >= T={T}: "
                      "output is dominated by zero padding")
    data = np.zeros((V, T, m))
    for j in range(m):
        shift = (m - 1 - j) * tau
        if shift < T:
            data[:, shift:, j] = states[:T - shift].T
    return DelayEmbedded(data=data, source_len=T)


def patchify(embedded: DelayEmbedded, D: int) -> PatchSequence:
    """Cut (V, T, m) into N = floor(T/D) flattened patches of width D*V*m."""
    if D < 1:
        raise ConfigError("patch size must be >= 1")
    V, T, m = embedded.data.shape
    N = T // D
    if N == 0:
        raise NotEnoughStepsError(f"T={T} shorter than one patch (D={D})")
    block = embedded.data[:, :N * D, :]            # (V, N*D, m)
    block = block.reshape(V, N, D, m)              # split time into patches
    block = block.transpose(1, 2, 0, 3)            # (N, D, V, m)
    patches = block.reshape(N, D * V * m)
    return PatchSequence(patches=patches, patch_size=D, n_patches=N)


def states_from_patches(patches: np.ndarray, D: int, V: int, m: int) -> np.ndarray:
    """Recover raw (T, V) states from flattened patches via the last delay
    coordinate (the un-lagged series)."""
    patches = np.asarray(patches, dtype=np.float64)
    N = patches.shape[0]
    block = patches.reshape(N, D, V, m)
    return block[:, :, :, m - 1].reshape(N * D, V)
