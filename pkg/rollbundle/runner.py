"""Runner comparing several controllers on one scenario."""

import logging
from typing import Callable, Dict, Optional, Union

from rollbundle.comparison import calculate_comparisons
from rollbundle.config import ScenarioConfig
from rollbundle.metrics import MetricsReport, compute_metrics
from rollbundle.orchestrator import closed_loop, make_controller
from rollbundle.problem import R2RProblem
from rollbundle.traces import ClosedLoopTrace

logger = logging.getLogger(__name__)

ControllerSpec = Union[str, Callable[[R2RProblem, ScenarioConfig], object]]


class ControllerRunner:
    """Run registered controllers on the same scenario and compare their tracking.

    Example:
        >>> runner = ControllerRunner(load_scenario(shipped_scenario("velocity_change")))
        >>> runner.add_controller("atbm").add_controller("tbm-fixed")
        >>> results = runner.run(baseline="tbm-fixed")
        >>> runner.print_comparison()
    """

    def __init__(self, scenario: ScenarioConfig, seed: Optional[int] = None):
        """Initialize the runner.

        Args:
            scenario: Scenario every controller is run on
            seed: Seed override (default: the scenario's seed)
        """
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.problem = R2RProblem(scenario.plant, scenario.problem)
        self.controllers: Dict[str, ControllerSpec] = {}
        self.results: Optional[Dict[str, MetricsReport]] = None
        self.traces: Dict[str, ClosedLoopTrace] = {}
        self._counter = 0

    def add_controller(self, controller: ControllerSpec, name: Optional[str] = None) -> "ControllerRunner":
        """Register a controller kind (``atbm``, ``tbm-fixed``, ``lqr``) or a factory.

        A factory is called with ``(problem, scenario)`` and must return an
        object with ``name`` and ``act``. Duplicate names get a numeric suffix.

        Returns:
            Self for method chaining
        """
        if name is None:
            if isinstance(controller, str):
                name = controller
            else:
                self._counter += 1
                name = f"controller_{self._counter}"

        original_name = name
        counter = 1
        while name in self.controllers:
            name = f"{original_name}_{counter}"
            counter += 1

        self.controllers[name] = controller
        return self

    def run(self, baseline: Optional[str] = None) -> Dict[str, MetricsReport]:
        """Simulate every registered controller and compute its metrics.

        Args:
            baseline: Name of the controller improvements are measured against

        Raises:
            ValueError: If no controllers have been added
        """
        if not self.controllers:
            raise ValueError("No controllers added. Use add_controller() first.")

        self.results = {}
        self.traces = {}
        for name, spec in self.controllers.items():
            if isinstance(spec, str):
                controller = make_controller(spec, self.problem, self.scenario, self.seed)
            else:
                controller = spec(self.problem, self.scenario)
            logger.info("running %s on %s", name, self.scenario.name)
            trace = closed_loop(controller, self.problem, self.scenario, self.seed)
            trace.controller = name
            self.traces[name] = trace
            self.results[name] = compute_metrics(trace, self.scenario)

        calculate_comparisons(self.results, baseline)
        return self.results

    def print_comparison(self, sort_by: str = "tension_rmse") -> None:
        """Print a comparison table of all results.

        Raises:
            ValueError: If run() hasn't been called yet
        """
        if self.results is None:
            raise ValueError("No results available. Call run() first.")

        from rollbundle.display import print_comparison
        print_comparison(self.results, sort_by=sort_by)

    def get_results(self) -> Optional[Dict[str, MetricsReport]]:
        return self.results

    def clear(self) -> None:
        """Remove all controllers and results."""
        self.controllers.clear()
        self.results = None
        self.traces = {}
        self._counter = 0
