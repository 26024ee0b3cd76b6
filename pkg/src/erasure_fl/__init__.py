"""Federated learning over packet-erasure uplinks.

Simulation and analysis of FedAvg-style training when device updates can be
lost on the way to the central node, with three aggregation rules:
error-free, memoryless (drop missing updates) and stale-reuse (substitute the
last update received from a device).
"""

from erasure_fl.errors import (
    DatasetParseError,
    DimensionError,
    DivergenceError,
    ErasureFLError,
    InvalidConfigError,
    NotApplicableError,
    NumericalError,
    RankDeficiencyError,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetParseError",
    "DimensionError",
    "DivergenceError",
    "ErasureFLError",
    "InvalidConfigError",
    "NotApplicableError",
    "NumericalError",
    "RankDeficiencyError",
    "__version__",
]
