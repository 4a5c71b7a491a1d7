"""MOVO smart-mobility middleware on a deterministic virtual clock."""

from .config import ScenarioConfig
from .harness import MetricsReport, run_charging, run_insurance, run_mechanic, simulate, verify

__all__ = ["MetricsReport", "ScenarioConfig", "run_charging", "run_insurance", "run_mechanic", "simulate", "verify"]
__version__ = "0.1.0"
