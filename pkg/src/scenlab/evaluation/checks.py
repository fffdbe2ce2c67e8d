"""Pass/fail checks on metric reports and sweeps, run by ``--assert``."""

import math
from typing import List, Sequence

from src.scenlab.evaluation.metrics import MetricsReport
from src.scenlab.evaluation.sweeps import ActivationMatrix, SweepResult, check_trend
from src.scenlab.exceptions import AssertionFailure
from src.utils.settings import AssertionConfig


def check_report(report: MetricsReport, bounds: AssertionConfig) -> List[str]:
    """Bounds on one evaluation."""
    failures = []
    if not report.reliability.vacuous and report.reliability.value < bounds.min_reliability:
        failures.append(f"reliability {report.reliability.value:.1f} < {bounds.min_reliability}")
    if not report.generality.vacuous and report.generality.value < bounds.min_generality:
        failures.append(f"generality {report.generality.value:.1f} < {bounds.min_generality}")
    if report.locality.value < bounds.min_locality:
        failures.append(f"locality {report.locality.value:.1f} < {bounds.min_locality}")
    if report.locality.value < report.locality.unrouted:
        failures.append(f"locality {report.locality.value:.1f} below the unrouted share {report.locality.unrouted:.1f}")
    if report.ppl is not None:
        if report.ppl.edited_reduction < bounds.min_ppl_reduction:
            failures.append(f"edited-set perplexity fell by {report.ppl.edited_reduction:.2%}, less than {bounds.min_ppl_reduction:.0%}")
        if report.ppl.unrelated_change >= bounds.max_unrelated_ppl_change:
            failures.append(f"unrelated-set perplexity changed by {report.ppl.unrelated_change:.2%}")
    return failures


def check_threshold_sweep(sweep: SweepResult, bounds: AssertionConfig) -> List[str]:
    """Reliability and generality fall, locality rises with the threshold."""
    failures = []
    for metric, increasing in (("reliability", False), ("generality", False), ("locality", True)):
        if not check_trend(sweep.series(metric), increasing=increasing, slack=bounds.trend_slack):
            direction = "non-decreasing" if increasing else "non-increasing"
            failures.append(f"{metric} is not {direction} over theta within {bounds.trend_slack} inversion(s): {sweep.series(metric)}")
    return failures


def check_layer_sweep(sweep: SweepResult, bounds: AssertionConfig) -> List[str]:
    """Editing the last layer beats editing the first; the first layer keeps locality."""
    reliability = sweep.series("reliability")
    failures = []
    if reliability[-1] - reliability[0] < bounds.layer_margin:
        failures.append(f"last-layer reliability {reliability[-1]:.1f} does not exceed layer {sweep.points[0]} ({reliability[0]:.1f}) by {bounds.layer_margin}")
    if sweep.series("locality")[0] < bounds.min_low_layer_locality:
        failures.append(f"layer {sweep.points[0]} locality {sweep.series('locality')[0]:.1f} < {bounds.min_low_layer_locality}")
    return failures


def check_compression_sweep(sweep: SweepResult, n_edits: int, bounds: AssertionConfig) -> List[str]:
    """Reliability drops with group size by a margin; expert counts and activation patterns match the grouping."""
    failures = []
    reliability = sweep.series("reliability")
    for (k_a, r_a), (k_b, r_b) in zip(zip(sweep.points, reliability), zip(sweep.points[1:], reliability[1:])):
        if r_a - r_b < bounds.compression_margin:
            failures.append(f"reliability at k={k_a} ({r_a:.1f}) does not exceed k={k_b} ({r_b:.1f}) by {bounds.compression_margin}")
    for k, extra, matrix in zip(sweep.points, sweep.extra, sweep.matrices):
        if extra["n_experts"] != math.ceil(n_edits / k):
            failures.append(f"k={k}: {extra['n_experts']} experts, expected {math.ceil(n_edits / k)}")
        failures.extend(check_activation_matrix(matrix, k, bounds))
    return failures


def check_activation_matrix(matrix: ActivationMatrix, group_size: int, bounds: AssertionConfig) -> List[str]:
    """Diagonal rate for single-sample experts, step rate for pairs."""
    if group_size == 1 and matrix.hit_rate(1) < bounds.min_diagonal_rate:
        return [f"diagonal is the row maximum in {matrix.hit_rate(1):.2%} of rows, below {bounds.min_diagonal_rate:.0%}"]
    if group_size == 2 and matrix.hit_rate(2) < bounds.min_step_rate:
        return [f"step pattern holds in {matrix.hit_rate(2):.2%} of rows, below {bounds.min_step_rate:.0%}"]
    return []


def raise_on_failures(failures: Sequence[str]) -> None:
    """
    Raise when any check failed.

    :raises AssertionFailure: one message per failed check.
    """
    if failures:
        raise AssertionFailure("acceptance checks failed:\n  " + "\n  ".join(failures))
