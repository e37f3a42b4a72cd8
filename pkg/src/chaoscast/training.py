"""Two-stage optimization.

Stage one feeds ground-truth patches at every position (teacher forcing) and
minimizes the squared next-patch error plus depth-averaged multi-patch terms.
Stage two rolls the model out on its own predictions (student forcing) and
adds a kernel two-sample penalty that pulls the predicted state distribution
toward both the historical and the ground-truth future distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dynamics import DatasetSplit
from .embedding import Standardizer, states_from_patches
from .errors import NotEnoughPatchesError, ShapeError, TrainingDivergedError
from .model import ForecastModel
from .numcore import Adam, Tensor, backward, clip_grad_norm

DEFAULT_KERNEL_SIGMAS = (0.2, 0.5, 0.9, 1.3)


@dataclass
class TrainConfig:
    lambda_p: float = 0.1        # multi-patch objective weight
    lambda_c: float = 1000.0     # ground-truth MMD weight inside the regularizer
    lambda_r: float = 1.0        # regularizer weight
    tf_lr: float = 1e-3
    sf_lr: float = 1e-4
    batch_size: int = 32
    tf_epochs: int = 50
    sf_epochs: int = 20
    patience: int = 5
    sf_window_patches: int | None = None   # W; default = patches per Lyapunov time
    kernel_sigmas: tuple = DEFAULT_KERNEL_SIGMAS
    seed: int = 0
    sf_enabled: bool = True
    mmd_enabled: bool = True
    mpp_squared: bool = False    # squared norm in the multi-patch loss
    grad_clip: float = 1.0       # max global grad norm; 0 disables
    mmd_subsample: int = 256     # equal-n cap on state sets fed to the kernel

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_c, self.lambda_r) < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.kernel_sigmas or min(self.kernel_sigmas) <= 0:
            raise ValueError("kernel_sigmas must be non-empty and positive")


@dataclass
class LossReport:
    l_next: float = 0.0
    l_mpp: dict = field(default_factory=dict)   # depth -> value
    l_stu: float = 0.0
    mmd_hist_pred: float = 0.0
    mmd_gt_pred: float = 0.0
    total: float = 0.0


# ---------------------------------------------------------------------------
# losses


def loss_next(targets: Tensor, preds: Tensor, n_patches: int | None = None) -> Tensor:
    """Mean squared patch error, normalized by (sequence length * batch).

    `targets`/`preds` are the aligned compared pairs (B, K, w); by the
    next-patch convention K = N - 1 comparisons come from an N-patch window,
    so the normalizer defaults to (K + 1) * B.
    """
    if targets.shape != preds.shape:
        raise ShapeError("loss_next", targets.shape, preds.shape)
    B, K = targets.shape[0], targets.shape[1]
    if n_patches is None:
        n_patches = K + 1
    diff = nc.sub(targets, preds)
    return nc.mul(nc.sum_(nc.square(diff)), 1.0 / (n_patches * B))


def loss_mpp(targets: Tensor, preds: Tensor, squared: bool = False) -> Tensor:
    """Mean patch-error norm over batch and valid anchors.

    Unsquared Euclidean norm by default; `squared` switches to the squared
    form used by the next-patch objective.
    """
    if targets.shape != preds.shape:
        raise ShapeError("loss_mpp", targets.shape, preds.shape)
    B, K = targets.shape[0], targets.shape[1]
    if K < 1:
        raise NotEnoughPatchesError("no valid anchors at this depth")
    sq = nc.sum_(nc.square(nc.sub(targets, preds)), axis=-1)   # (B, K)
    per = sq if squared else nc.sqrt(sq)
    return nc.mul(nc.sum_(per), 1.0 / (B * K))


def _kernel_block(x: Tensor, y: Tensor, sigmas) -> Tensor:
    """Mean of the rational-quadratic mixture kernel over all (i, j) pairs."""
    nx, ny = x.shape[0], y.shape[0]
    x2 = nc.sum_(nc.square(x), axis=1, keepdims=True)          # (nx, 1)
    y2 = nc.reshape(nc.sum_(nc.square(y), axis=1, keepdims=True), (1, ny))
    d2 = nc.add(nc.sub(x2, nc.mul(nc.matmul(x, nc.transpose(y)), 2.0)), y2)
    total = None
    for s in sigmas:
        s2 = float(s) * float(s)
        term = nc.mul(nc.reciprocal(nc.add(d2, s2)), s2)
        total = term if total is None else nc.add(total, term)
    return nc.mul(nc.sum_(total), 1.0 / (nx * ny))


def mmd2_t(x: Tensor, y: Tensor, sigmas=DEFAULT_KERNEL_SIGMAS) -> Tensor:
    """Biased squared maximum mean discrepancy between sample sets (n, V).

    Each block is normalized by its own pair count, so unequal sample sizes
    are handled; with x == y the estimate is exactly zero.
    """
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("mmd2 needs at least one sample on each side")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("mmd2", x.shape, y.shape)
    kxx = _kernel_block(x, x, sigmas)
    kyy = _kernel_block(y, y, sigmas)
    kxy = _kernel_block(x, y, sigmas)
    return nc.add(nc.sub(kxx, nc.mul(kxy, 2.0)), kyy)


def mmd2(x: np.ndarray, y: np.ndarray, sigmas=DEFAULT_KERNEL_SIGMAS) -> float:
    with nc.no_grad():
        return float(mmd2_t(Tensor(np.asarray(x, dtype=np.float64)),
                            Tensor(np.asarray(y, dtype=np.float64)), sigmas).item())


def _equal_subsample(arrays: list[np.ndarray], cap: int, rng: np.random.Generator
                     ) -> list[np.ndarray]:
    """Index sets making every state cloud the same (seeded) size."""
    n = min(min(a.shape[0] for a in arrays), cap)
    out = []
    for a in arrays:
        idx = rng.choice(a.shape[0], size=n, replace=False) if a.shape[0] > n \
            else np.arange(a.shape[0])
        out.append(np.sort(idx))
    return out


def loss_student(target_patches: Tensor, pred_patches: Tensor,
                 u_states: np.ndarray, v_states: Tensor, w_states: np.ndarray,
                 cfg: TrainConfig, rng: np.random.Generator) -> tuple[Tensor, LossReport]:
    """Student-forcing objective: rollout MSE plus the MMD regularizer.

    u/w are historical and ground-truth future states (constants); v is the
    predicted future state set, which carries gradients. All three live in
    standardized space and are subsampled to a common size before the kernel.
    """
    if target_patches.shape != pred_patches.shape:
        raise ShapeError("loss_student", target_patches.shape, pred_patches.shape)
    B, W = target_patches.shape[0], target_patches.shape[1]
    l_stu = nc.mul(nc.sum_(nc.square(nc.sub(target_patches, pred_patches))),
                   1.0 / (W * B))
    report = LossReport(l_stu=float(l_stu.item()))
    total = l_stu
    if cfg.mmd_enabled and cfg.lambda_r > 0:
        iu, iv, iw = _equal_subsample([u_states, v_states.data, w_states],
                                      cfg.mmd_subsample, rng)
        v_sub = v_states[iv]
        m_hist = mmd2_t(Tensor(u_states[iu]), v_sub, cfg.kernel_sigmas)
        m_gt = mmd2_t(Tensor(w_states[iw]), v_sub, cfg.kernel_sigmas)
        reg = nc.add(m_hist, nc.mul(m_gt, cfg.lambda_c))
        total = nc.add(l_stu, nc.mul(reg, cfg.lambda_r))
        report.mmd_hist_pred = float(m_hist.item())
        report.mmd_gt_pred = float(m_gt.item())
    report.total = float(total.item())
    return total, report


# ---------------------------------------------------------------------------
# teacher forcing


def _prepare_patches(model: ForecastModel, windows: np.ndarray) -> np.ndarray:
    """Standardize and embed whole windows once; they are constants."""
    std = model.standardizer
    z = (windows - std.mean) / std.std
    with nc.no_grad():
        patches, _ = model.embed_series(Tensor(z))
    return patches.data


def _tf_batch_loss(model: ForecastModel, patch_batch: np.ndarray, cfg: TrainConfig
                   ) -> tuple[Tensor, LossReport]:
    patches = Tensor(patch_batch)
    B, N, w = patches.shape
    tokens = nc.reshape(nc.add(nc.matmul(nc.reshape(patches, (B * N, w)), model.w_emb),
                               model.b_emb), (B, N, model.cfg.d))
    E, _, _ = model.trunk_forward(tokens)
    preds = model.predict_next_patch(E[:, :N - 1])
    l_next = loss_next(patches[:, 1:], preds, n_patches=N)
    report = LossReport(l_next=float(l_next.item()))
    total = l_next
    M = model.cfg.n_mpp
    if M > 0 and cfg.lambda_p > 0:
        mpp_preds = model.mpp_forward(E, tokens)
        terms = []
        for depth, p in mpp_preds.items():
            if p.shape[1] < 1:
                continue
            lm = loss_mpp(patches[:, depth + 1:], p, squared=cfg.mpp_squared)
            report.l_mpp[depth] = float(lm.item())
            terms.append(lm)
        if terms:
            acc = terms[0]
            for t in terms[1:]:
                acc = nc.add(acc, t)
            total = nc.add(l_next, nc.mul(acc, cfg.lambda_p / M))
    report.total = float(total.item())
    return total, report


def _validation_l_next(model: ForecastModel, val_patches: np.ndarray,
                       batch_size: int) -> float:
    if val_patches.shape[0] == 0:
        return float("nan")
    losses = []
    with nc.no_grad():
        for start in range(0, val_patches.shape[0], batch_size):
            batch = val_patches[start:start + batch_size]
            patches = Tensor(batch)
            B, N, w = patches.shape
            tokens = nc.reshape(nc.add(nc.matmul(nc.reshape(patches, (B * N, w)),
                                                 model.w_emb), model.b_emb),
                                (B, N, model.cfg.d))
            E, _, _ = model.trunk_forward(tokens)
            preds = model.predict_next_patch(E[:, :N - 1])
            losses.append(float(loss_next(patches[:, 1:], preds, n_patches=N).item()) * B)
    return sum(losses) / val_patches.shape[0]


def _encoder_batch_loss(model: ForecastModel, window_batch: np.ndarray) -> tuple[Tensor, LossReport]:
    """Next-window MSE for the encoder-oriented variant (needs 2 T_L windows)."""
    T = model.cfg.window_len
    std = model.standardizer
    z = (window_batch - std.mean) / std.std
    ctx, tgt = Tensor(z[:, :T]), z[:, T:2 * T]
    _, tokens = model.embed_series(ctx)
    out = model.encoder_forward(tokens)
    diff = nc.sub(out, Tensor(tgt))
    loss = nc.mean(nc.square(diff))
    report = LossReport(total=float(loss.item()))
    report.l_mpp = {}
    report.l_next = float(loss.item())   # the window loss plays the next-patch role
    return loss, report


def train_teacher_forcing(dataset: DatasetSplit, model: ForecastModel,
                          cfg: TrainConfig, max_steps: int | None = None
                          ) -> list[dict]:
    """Optimize next-patch (+ multi-patch) objectives over shuffled windows.

    Fits the standardizer from the training segment, early-stops on the
    validation next-patch loss with the configured patience, and restores the
    best parameters seen. Returns one history row per epoch.
    """
    model.standardizer = Standardizer.fit(dataset.train_segment)
    rng = np.random.default_rng(cfg.seed)
    encoder = model.cfg.encoder_oriented
    if encoder:
        train_arr = dataset.train_sf
        val_arr = dataset.val_sf
    else:
        train_arr = _prepare_patches(model, dataset.train_tf)
        val_arr = _prepare_patches(model, dataset.val_tf) if dataset.val_tf.shape[0] \
            else np.empty((0,))
    params = model.named_params()
    opt = Adam(params, lr=cfg.tf_lr)
    history: list[dict] = []
    best_val = float("inf")
    best_state = None
    stall = 0
    steps = 0
    # per-op finite checks off in the hot loop: the per-batch loss check
    # still catches divergence, one step later at worst
    with nc.finite_checks(False):
        for epoch in range(cfg.tf_epochs):
            order = rng.permutation(train_arr.shape[0])
            epoch_loss = 0.0
            epoch_next = 0.0
            epoch_mpp: dict[int, float] = {}
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if encoder:
                    total, report = _encoder_batch_loss(model, dataset.train_sf[idx])
                else:
                    total, report = _tf_batch_loss(model, train_arr[idx], cfg)
                if not np.isfinite(report.total):
                    raise TrainingDivergedError(batch_index=steps, stage="teacher-forcing")
                opt.zero_grad()
                backward(total)
                if cfg.grad_clip > 0:
                    clip_grad_norm(params.values(), cfg.grad_clip)
                opt.step()
                epoch_loss += report.total
                epoch_next += report.l_next
                for k, v in report.l_mpp.items():
                    epoch_mpp[k] = epoch_mpp.get(k, 0.0) + v
                n_batches += 1
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            if encoder:
                if val_arr.shape[0] == 0:
                    val = float("nan")
                else:
                    with nc.no_grad():
                        val = float(_encoder_batch_loss(model, val_arr)[0].item())
            else:
                val = _validation_l_next(model, val_arr, cfg.batch_size) \
                    if val_arr.shape[0] else float("nan")
            history.append({
                "stage": "tf", "epoch": epoch + 1,
                "l_next": epoch_next / max(n_batches, 1),
                "l_mpp": {k: v / max(n_batches, 1) for k, v in epoch_mpp.items()},
                "total": epoch_loss / max(n_batches, 1),
                "val_l_next": val,
            })
            if np.isfinite(val):
                if val < best_val - 1e-12:
                    best_val = val
                    best_state = {k: t.data.copy() for k, t in params.items()}
                    stall = 0
                else:
                    stall += 1
                    if stall >= cfg.patience:
                        break
            if max_steps is not None and steps >= max_steps:
                break
    if best_state is not None:
        for k, t in params.items():
            t.data = best_state[k]
    return history


# ---------------------------------------------------------------------------
# student forcing


def train_student_forcing(dataset: DatasetSplit, model: ForecastModel,
                          cfg: TrainConfig) -> list[dict]:
    """Backpropagate through W-patch rollouts on 2 T_L windows.

    Skipped entirely when `sf_enabled` is false. The MMD terms compare raw
    V-dimensional states pooled across the batch: historical (context),
    predicted (rollout output), and ground-truth future.
    """
    if not cfg.sf_enabled:
        return []
    D = model.cfg.patch_size
    W = cfg.sf_window_patches or max(1, dataset.steps_per_TL // D)
    half = dataset.window_len_sf // 2
    if W * D > half:
        raise NotEnoughPatchesError(
            f"W={W} patches of {D} steps exceed the {half}-step target half")
    std = model.standardizer
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.named_params()
    opt = Adam(params, lr=cfg.sf_lr)
    windows = dataset.train_sf
    history: list[dict] = []
    steps = 0
    V = model.cfg.n_vars
    with nc.finite_checks(False):
        for epoch in range(cfg.sf_epochs):
            order = rng.permutation(windows.shape[0])
            agg = {"l_stu": 0.0, "mmd_hist_pred": 0.0, "mmd_gt_pred": 0.0, "total": 0.0}
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                z = (windows[idx] - std.mean) / std.std
                ctx = z[:, :half]
                future = z[:, half:half + W * D]
                with nc.no_grad():
                    tgt_patches, _ = model.embed_series(Tensor(z[:, :half + W * D]))
                n_ctx_patches = half // D
                targets = Tensor(tgt_patches.data[:, n_ctx_patches:n_ctx_patches + W])
                raw_pred, pred_patches = model.rollout_core(Tensor(ctx), W)
                v_states = nc.reshape(raw_pred, (raw_pred.shape[0] * raw_pred.shape[1], V))
                u_states = ctx.reshape(-1, V)
                w_states = future.reshape(-1, V)
                total, report = loss_student(targets, pred_patches, u_states, v_states,
                                             w_states, cfg, rng)
                if not np.isfinite(report.total):
                    raise TrainingDivergedError(batch_index=steps, stage="student-forcing")
                opt.zero_grad()
                backward(total)
                if cfg.grad_clip > 0:
                    clip_grad_norm(params.values(), cfg.grad_clip)
                opt.step()
                agg["l_stu"] += report.l_stu
                agg["mmd_hist_pred"] += report.mmd_hist_pred
                agg["mmd_gt_pred"] += report.mmd_gt_pred
                agg["total"] += report.total
                n_batches += 1
                steps += 1
            history.append({"stage": "sf", "epoch": epoch + 1,
                            **{k: v / max(n_batches, 1) for k, v in agg.items()}})
    return history
