"""Threshold, layer and compression sweeps, and neuron activation matrices."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.scenlab.editing.editor import EditedSystem, sequential_edit
from src.scenlab.editing.records import EditSample, NegativeCache, NeuronBank, ScenConfig
from src.scenlab.evaluation.metrics import MetricsReport, evaluate
from src.scenlab.exceptions import ShapeError
from src.scenlab.lm.model import TransformerLM
from src.utils.decorators import timer

logger = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.60 + 0.01 * i, 2) for i in range(11))
GROUP_SIZES = (1, 2, 4)


@dataclass
class ActivationMatrix:

    """Activation of neuron ``j`` (column) on edit sample ``i``'s cached vector (row)."""

    values: np.ndarray
    sample_ids: List[str]

    def to_frame(self) -> pd.DataFrame:
        """Rows labeled by sample id, columns by neuron index."""
        return pd.DataFrame(self.values, index=pd.Index(self.sample_ids, name="sample"), columns=[f"neuron_{j}" for j in range(self.values.shape[1])])

    def hit_rate(self, group_size: int = 1) -> float:
        """
        Share of rows whose maximum lies in column ``i // group_size``.

        With ``group_size`` 1 this is the diagonal rate; larger groups give the
        step pattern of compressed editing.
        """
        if self.values.shape[0] == 0:
            return 1.0
        expected = np.arange(self.values.shape[0]) // group_size
        return float(np.mean(np.argmax(self.values, axis=1) == expected))


def activation_matrix(bank: NeuronBank, cache: NegativeCache) -> ActivationMatrix:
    """
    Activations of every neuron on every cached edit vector.

    :raises ShapeError: cache and bank widths differ.
    """
    if cache.width != bank.width:
        raise ShapeError("activation_matrix", (len(cache), cache.width), bank.rows.shape)
    return ActivationMatrix(values=bank.activations(cache.matrix()).reshape(len(cache), len(bank)), sample_ids=list(cache.ids))


def check_trend(values: Sequence[float], increasing: bool, slack: int = 1) -> bool:
    """
    Whether ``values`` are monotone up to ``slack`` adjacent inversions.

    Equal neighbours never count as an inversion.
    """
    steps = np.diff(np.asarray(values, dtype=np.float64))
    inversions = int(np.sum(steps < 0)) if increasing else int(np.sum(steps > 0))
    return inversions <= slack


@dataclass
class SweepResult:

    """
    Metrics along one sweep axis.

    :param axis: ``theta``, ``layer`` or ``group_size``.
    :param points: strictly increasing grid.
    :param extra: per-point values beyond the metrics, such as expert counts.
    :param matrices: per-point activation matrices, when recorded.
    """

    axis: str
    points: List[float]
    reports: List[MetricsReport]
    extra: List[Dict] = field(default_factory=list)
    matrices: List[ActivationMatrix] = field(default_factory=list)

    def __post_init__(self):
        """Check the grid."""
        if any(b <= a for a, b in zip(self.points, self.points[1:])):
            raise ValueError(f"sweep points must be strictly increasing, got {self.points}")
        if len(self.reports) != len(self.points):
            raise ValueError("one report per sweep point is required")

    def series(self, metric: str) -> List[float]:
        """One metric along the grid."""
        return [getattr(report, metric).value for report in self.reports]

    def to_frame(self) -> pd.DataFrame:
        """One row per sweep point."""
        rows = []
        for index, (point, report) in enumerate(zip(self.points, self.reports)):
            row = {
                self.axis: point,
                "reliability": report.reliability.value,
                "generality": report.generality.value,
                "locality": report.locality.value,
                "unrouted": report.locality.unrouted,
            }
            if self.extra:
                row.update(self.extra[index])
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> dict:
        """Plain-data view for the JSON report."""
        return {"axis": self.axis, "points": list(self.points), "reports": [r.summary() for r in self.reports], "extra": self.extra}


def default_layers(n_layers: int) -> List[int]:
    """Even layers plus the last one."""
    return sorted(set(range(0, n_layers, 2)) | {n_layers - 1})


@timer
def run_threshold_sweep(system: EditedSystem, edits: Sequence[EditSample], loc: Sequence[EditSample], grid: Sequence[float] = THRESHOLD_GRID) -> SweepResult:
    """
    Evaluate one edited system at every threshold of ``grid``.

    Activations and answers are memoized inside ``system``, so each query is routed
    and decoded at most once per expert.
    """
    points = [float(theta) for theta in grid]
    reports = [evaluate(system, edits, loc, theta=theta) for theta in points]
    return SweepResult(axis="theta", points=points, reports=reports)


@timer
def run_layer_sweep(
    model: TransformerLM,
    edits: Sequence[EditSample],
    loc: Sequence[EditSample],
    cfg: ScenConfig,
    layers: Optional[Sequence[int]] = None,
) -> SweepResult:
    """Repeat the full sequential edit at each layer and evaluate it."""
    layers = default_layers(model.config.n_layers) if layers is None else sorted(layers)
    reports, extra = [], []
    for layer in layers:
        model.check_layer(layer)
        layer_cfg = replace(cfg, layer=layer)
        run = sequential_edit(model, edits, layer_cfg)
        reports.append(evaluate(EditedSystem(model, run.bank, run.experts, layer_cfg), edits, loc))
        extra.append({"n_experts": len(run.experts), **run.log.success_counts()})
    return SweepResult(axis="layer", points=list(layers), reports=reports, extra=extra)


@timer
def run_compression_sweep(
    model: TransformerLM,
    edits: Sequence[EditSample],
    loc: Sequence[EditSample],
    cfg: ScenConfig,
    group_sizes: Sequence[int] = GROUP_SIZES,
) -> SweepResult:
    """Repeat the sequential edit with ``group_size`` samples per expert; records each run's activation matrix."""
    group_sizes = sorted(group_sizes)
    reports, extra, matrices = [], [], []
    for k in group_sizes:
        k_cfg = replace(cfg, group_size=k)
        run = sequential_edit(model, edits, k_cfg)
        reports.append(evaluate(EditedSystem(model, run.bank, run.experts, k_cfg), edits, loc))
        matrix = activation_matrix(run.bank, run.cache)
        matrices.append(matrix)
        extra.append({"n_experts": len(run.experts), "hit_rate": matrix.hit_rate(k), "last_group_short": bool(len(edits) % k)})
    return SweepResult(axis="group_size", points=list(group_sizes), reports=reports, extra=extra, matrices=matrices)
