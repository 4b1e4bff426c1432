"""Display and formatting utilities for controller comparisons and bound reports."""

from typing import Dict, List, Optional

from rollbundle.certificate import BoundReport
from rollbundle.comparison import get_best, get_worst
from rollbundle.metrics import MetricsReport


def _settling(result: MetricsReport) -> str:
    if not result.settling_times:
        return "-"
    if any(s is None for s in result.settling_times):
        return "never"
    return f"{max(result.settling_times):.2f}s"


def print_comparison(results: Dict[str, MetricsReport], sort_by: str = "tension_rmse") -> None:
    """Print a formatted comparison table of closed-loop results.

    Example output:
        Controller Comparison
        =====================================================

        Controller   Tension RMSE  Velocity RMSE  Max Viol.  Settling  Improvement
        ──────────────────────────────────────────────────────────────────────────
        atbm             0.8123 N     2.101e-04   0.000e+00     0.31s     +12.4% ★
        tbm-fixed        0.9274 N     2.390e-04   0.000e+00     0.38s      +0.0%
        lqr              1.4410 N     4.002e-04   0.000e+00     0.52s     -55.4%
    """
    if not results:
        print("No results to display.")
        return

    sorted_names = sorted(results.keys(), key=lambda k: getattr(results[k], sort_by))
    best_name = get_best(results)

    print("\nController Comparison")
    print("=" * 90)
    print()

    name_width = max(max(len(name) for name in results), len("Controller"))
    header = (
        f"{'Controller':<{name_width}}  {'Tension RMSE':>12}  {'Velocity RMSE':>13}  "
        f"{'Max Viol.':>10}  {'Settling':>8}  {'Improvement':>12}"
    )
    print(header)
    print("─" * len(header))

    for name in sorted_names:
        result = results[name]
        improvement = f"{result.improvement:+.1f}%" if result.improvement is not None else "N/A"
        if name == best_name:
            improvement += " ★"
        print(
            f"{name:<{name_width}}  {result.tension_rmse:>10.4f} N  {result.velocity_rmse:>13.3e}  "
            f"{result.max_hard_violation:>10.3e}  {_settling(result):>8}  {improvement:>12}"
        )

    print()
    worst_name = get_worst(results)
    print("Summary:")
    print(f"  Best:  {best_name} ({results[best_name].tension_rmse:.4f} N)")
    print(f"  Worst: {worst_name} ({results[worst_name].tension_rmse:.4f} N)")
    if len(results) > 1 and results[best_name].tension_rmse > 0:
        ratio = results[worst_name].tension_rmse / results[best_name].tension_rmse
        print(f"  Difference: {ratio:.2f}x higher RMSE")
    truncated = [name for name, r in results.items() if r.trace.status != "completed"]
    if truncated:
        print(f"  Truncated: {', '.join(sorted(truncated))}")
    print()


def format_results_table(results: Dict[str, MetricsReport], sort_by: str = "tension_rmse") -> List[str]:
    """Format results as a list of strings for custom display."""
    if not results:
        return ["No results to display."]

    lines = ["", "Closed-loop Results", "=" * 50]
    for name in sorted(results.keys(), key=lambda k: getattr(results[k], sort_by)):
        result = results[name]
        lines.append("")
        lines.append(f"{name}:")
        lines.append(f"  Tension RMSE:  {result.tension_rmse:.4f} N")
        lines.append(f"  Velocity RMSE: {result.velocity_rmse:.3e} m/s")
        lines.append(f"  Max hard violation: {result.max_hard_violation:.3e}")
        if result.improvement is not None:
            lines.append(f"  Improvement: {result.improvement:+.1f}%")
    return lines


def create_bar_chart(results: Dict[str, MetricsReport], metric: str = "tension_rmse", width: int = 50) -> str:
    """Create a simple ASCII bar chart of one metric.

    Example:
        >>> print(create_bar_chart(results, width=30))

        Bar Chart (tension_rmse)
        ============================================================

        atbm       ███████████████████████  0.8123
        tbm-fixed  ██████████████████████████  0.9274
    """
    if not results:
        return "No results to display."

    values = sorted(((name, getattr(results[name], metric)) for name in results), key=lambda x: x[1])
    max_value = max(v for _, v in values)
    if max_value == 0:
        return "All values are zero."

    lines = ["", f"Bar Chart ({metric})", "=" * (width + 30), ""]
    max_name_len = max(len(name) for name, _ in values)
    for name, value in values:
        bar = "█" * int((value / max_value) * width)
        lines.append(f"{name:<{max_name_len}}  {bar}  {value:.4g}")
    lines.append("")
    return "\n".join(lines)


def print_bound_report(report: BoundReport, title: Optional[str] = None) -> None:
    """Print a bound report under a ruled heading."""
    print(f"\n{title or 'Convergence Bounds'}")
    print("=" * 50)
    print(report)
    print()


def print_metrics(result: MetricsReport) -> None:
    print()
    print(result)
    print()
