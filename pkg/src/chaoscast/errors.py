"""Exception taxonomy shared across the pipeline.

Each error maps onto one CLI exit code family: config problems exit 2,
data/simulation problems exit 3, training problems exit 4, evaluation
problems exit 5.
"""

from __future__ import annotations


class ChaoscastError(Exception):
    """Base class for all library errors."""


class ConfigError(ChaoscastError):
    """Invalid or unparseable run configuration."""


class IntegrationDivergedError(ChaoscastError):
    """A state became non-finite during ODE integration."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class ResolutionTooCoarseError(ChaoscastError):
    """Source sampling too coarse for the requested Lyapunov grid."""


class DatasetTooShortError(ChaoscastError):
    """Trajectory too short for the requested windows."""

    def __init__(self, required: int, got: int):
        self.required = required
        self.got = got
        super().__init__(f"trajectory has {got} steps, need at least {required}")


class DegenerateDistributionError(ChaoscastError):
    """Series has no usable spread (e.g. constant input to AMI)."""


class EmptyNeighborhoodError(ChaoscastError):
    """No neighbors found within the radius; try a larger one."""


class NotEnoughStepsError(ChaoscastError):
    """Fewer time steps than one patch."""


class NotEnoughPatchesError(ChaoscastError):
    """Patch sequence too short for the requested prediction depth."""


class ShapeError(ChaoscastError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class NumericOverflowError(ChaoscastError):
    """An operation produced a non-finite value."""


class NotAScalarError(ChaoscastError):
    """backward() needs a scalar loss."""


class RolloutDivergedError(ChaoscastError):
    """Autoregressive forecast left the configured envelope."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"rollout diverged at step {step}")


class TrainingDivergedError(ChaoscastError):
    """Loss became non-finite during optimization."""

    def __init__(self, batch_index: int, stage: str = ""):
        self.batch_index = batch_index
        self.stage = stage
        super().__init__(f"training diverged at batch {batch_index}" + (f" ({stage})" if stage else ""))


class DegenerateAttractorError(ChaoscastError):
    """Point cloud has zero variance; no dimension estimate possible."""


class HorizonTooShortError(ChaoscastError):
    """Forecast shorter than the metric's evaluation horizon."""
