"""Forecasting chaotic dynamics from short observation windows.

Pipeline: integrate a chaotic ODE (or import a series), resample onto a
Lyapunov-time grid, reconstruct the attractor by time-delay embedding, train
a residual stack of selective state-space layers with next-patch /
multi-patch objectives plus a distribution-matching regularizer, and score
forecasts with point-wise and attractor-statistics metrics.
"""

from .dynamics import (
    DatasetSplit,
    OdeSystem,
    Trajectory,
    build_dataset,
    estimate_mle,
    integrate,
    make_system,
    resample_to_lyapunov_grid,
    rk4_step,
)
from .embedding import (
    DelayEmbedded,
    EmbeddingConfig,
    PatchSequence,
    ami_curve,
    delay_embed,
    fnn_curve,
    patchify,
    select_m,
    select_tau,
)
from .metrics import (
    MetricsConfig,
    MetricsReport,
    correlation_dimension,
    d_frac_error,
    d_stsp,
    evaluate,
    smape_at,
    smape_pointwise,
    vpt,
)
from .model import (
    ForecastModel,
    ModelConfig,
    autoregressive_rollout,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    LossReport,
    TrainConfig,
    loss_mpp,
    loss_next,
    loss_student,
    mmd2,
    train_student_forcing,
    train_teacher_forcing,
)

__version__ = "0.1.0"
