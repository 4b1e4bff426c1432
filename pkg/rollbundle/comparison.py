"""Utilities for comparing controllers on one scenario."""

from typing import Dict, Optional

from rollbundle.metrics import MetricsReport

LOWER_IS_BETTER = {"tension_rmse", "velocity_rmse", "max_hard_violation", "mean_iterations", "mean_solve_time"}


def _check_metric(metric: str) -> None:
    if metric not in LOWER_IS_BETTER:
        raise ValueError(f"Invalid metric '{metric}'. Must be one of {sorted(LOWER_IS_BETTER)}")


def calculate_comparisons(results: Dict[str, MetricsReport], baseline: Optional[str] = None) -> None:
    """Calculate comparison metrics for all results.

    This function modifies the results in-place.

    Args:
        results: Dictionary mapping controller names to MetricsReport
        baseline: Controller whose tension RMSE the improvements are measured against

    The best controller (lowest tension RMSE) gets ``relative_rmse = 1.0``;
    the others get their RMSE divided by the best one. With a baseline, every
    controller gets ``improvement = 100 * (baseline - own) / baseline``.

    Raises:
        ValueError: If ``baseline`` is not among the results
    """
    if not results:
        return
    if baseline is not None and baseline not in results:
        raise ValueError(f"Baseline '{baseline}' not among results {sorted(results)}")

    best = results[get_best(results)].tension_rmse
    for result in results.values():
        result.relative_rmse = result.tension_rmse / best if best > 0 else 1.0
        if baseline is not None:
            result.improvement = calculate_improvement(results[baseline], result)


def get_best(results: Dict[str, MetricsReport], metric: str = "tension_rmse") -> str:
    """Get the name of the controller with the lowest ``metric``.

    Raises:
        ValueError: If results is empty or metric is invalid
    """
    if not results:
        raise ValueError("No results to compare")
    _check_metric(metric)
    return min(results.keys(), key=lambda k: getattr(results[k], metric))


def get_worst(results: Dict[str, MetricsReport], metric: str = "tension_rmse") -> str:
    if not results:
        raise ValueError("No results to compare")
    _check_metric(metric)
    return max(results.keys(), key=lambda k: getattr(results[k], metric))


def calculate_improvement(
    baseline: MetricsReport, comparison: MetricsReport, metric: str = "tension_rmse"
) -> float:
    """Relative improvement of ``comparison`` over ``baseline`` in percent.

    Positive values mean ``comparison`` has the lower (better) metric.

    Example:
        >>> calculate_improvement(fixed, adaptive)  # e.g. 11.1 for an 11.1% lower RMSE
    """
    _check_metric(metric)
    reference = getattr(baseline, metric)
    if reference == 0:
        return 0.0 if getattr(comparison, metric) == 0 else float("-inf")
    return 100.0 * (reference - getattr(comparison, metric)) / reference
