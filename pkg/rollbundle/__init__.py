"""rollbundle - Adaptive trajectory-bundle control for roll-to-roll web tension."""

__version__ = "0.1.0"

from rollbundle.config import ScenarioConfig, load_scenario, shipped_scenario  # noqa: E402
from rollbundle.display import print_comparison  # noqa: E402
from rollbundle.metrics import MetricsReport, compute_metrics  # noqa: E402
from rollbundle.orchestrator import BundleController, closed_loop, tbm_solve  # noqa: E402
from rollbundle.plant import PlantParams  # noqa: E402
from rollbundle.problem import R2RProblem  # noqa: E402
from rollbundle.runner import ControllerRunner  # noqa: E402

__all__ = [
    "BundleController",
    "ControllerRunner",
    "MetricsReport",
    "PlantParams",
    "R2RProblem",
    "ScenarioConfig",
    "closed_loop",
    "compute_metrics",
    "load_scenario",
    "print_comparison",
    "shipped_scenario",
    "tbm_solve",
]
