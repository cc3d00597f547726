"""Selective Jacobi decoding for autoregressive flows."""

from ._sejd import (
    CHECKPOINT_VERSION,
    DEFAULT_TAU,
    CacheDesyncError,
    CheckpointError,
    FlowModel,
    TrainingDivergenceError,
    ablate_tau,
    analyze_convergence,
    analyze_redundancy,
    bench,
    gradient_patches,
    train,
)

__all__ = [
    "CHECKPOINT_VERSION",
    "DEFAULT_TAU",
    "CacheDesyncError",
    "CheckpointError",
    "FlowModel",
    "TrainingDivergenceError",
    "ablate_tau",
    "analyze_convergence",
    "analyze_redundancy",
    "bench",
    "gradient_patches",
    "train",
]
