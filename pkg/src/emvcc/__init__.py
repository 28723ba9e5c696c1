"""EOV blockchain pipeline simulator with early conflict detection at endorsement."""
from __future__ import annotations

from .analytics import MetricsReport, ModelParams, aggregate
from .config import RunConfig, load_config
from .ledger import Version, WorldState

__all__ = [
    "MetricsReport",
    "ModelParams",
    "RunConfig",
    "Version",
    "WorldState",
    "aggregate",
    "load_config",
]
__version__ = "0.1.0"
