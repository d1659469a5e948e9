"""Bi-dimensional weight-decomposed low-rank adaptation with LoRA/DoRA baselines."""

__version__ = "0.1.0"

from .adapters import (  # noqa: E402
    AdaptedLinear,
    AdapterConfig,
    ArchSpec,
    Method,
    NormMode,
    Scaling,
    count_trainable,
    init_adapter,
)
from .dynamics import (  # noqa: E402
    DynamicsSeries,
    WeightSnapshot,
    aggregate_layers,
    consecutive_series,
    delta_direction,
    delta_magnitude,
    symmetry_ratio,
    total_change,
)

__all__ = [
    "AdaptedLinear",
    "AdapterConfig",
    "ArchSpec",
    "DynamicsSeries",
    "Method",
    "NormMode",
    "Scaling",
    "WeightSnapshot",
    "aggregate_layers",
    "consecutive_series",
    "count_trainable",
    "delta_direction",
    "delta_magnitude",
    "init_adapter",
    "symmetry_ratio",
    "total_change",
]
