"""Simulator for aggregated demand-side flexibility under broadcast price signals."""

__version__ = "0.1.0"

from .errors import FlexLatticeError  # noqa: E402
from .signals import PenaltySignal, Signal, TimeGrid, Unit  # noqa: E402
from .flexfunc import FlexibilityFunction  # noqa: E402
from .config import ScenarioConfig, load_scenario  # noqa: E402
from .engine import RunMetrics, run, sweep  # noqa: E402

__all__ = [
    "FlexLatticeError", "FlexibilityFunction", "PenaltySignal", "RunMetrics", "ScenarioConfig",
    "Signal", "TimeGrid", "Unit", "load_scenario", "run", "sweep", "__version__",
]
