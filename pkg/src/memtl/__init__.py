"""Multi-head ensemble multi-task learning for MEC computation offloading."""

from memtl.mec import (
    Environment,
    FeasibilityReport,
    MtParams,
    OffloadStrategy,
    check_feasible,
    local_cost,
    offload_cost,
    total_cost,
)

__version__ = "0.1.0"

__all__ = [
    "Environment",
    "FeasibilityReport",
    "MtParams",
    "OffloadStrategy",
    "check_feasible",
    "local_cost",
    "offload_cost",
    "total_cost",
]
