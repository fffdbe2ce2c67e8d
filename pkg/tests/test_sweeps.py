"""Test sweeps, activation matrices and the acceptance checks."""

import numpy as np
import pytest

from src.scenlab.editing.records import EditSample, ExpertTrainingConfig, NegativeCache, NeuronBank, NeuronTrainingConfig, ScenConfig
from src.scenlab.evaluation import checks
from src.scenlab.evaluation.metrics import LocalityResult, MetricResult, MetricsReport, evaluate
from src.scenlab.evaluation.sweeps import (
    THRESHOLD_GRID,
    ActivationMatrix,
    SweepResult,
    activation_matrix,
    check_trend,
    default_layers,
    run_compression_sweep,
    run_layer_sweep,
    run_threshold_sweep,
)
from src.scenlab.exceptions import AssertionFailure, ShapeError
from src.utils.settings import AssertionConfig
from tests.conftest import FakeSystem

FAST = ScenConfig(
    layer=1,
    expert=ExpertTrainingConfig(max_steps=2, check_every=1),
    neuron=NeuronTrainingConfig(lr=1e-2, max_steps=10),
)


@pytest.fixture
def scripted():
    """Edits whose activations spread over the threshold grid, and one misrouted locality query."""
    routes = {f"q{i}": (0.6 + 0.02 * i, 0, "new") for i in range(5)}
    routes["p0"] = (0.64, 0, "new")
    base = {f"q{i}": "old" for i in range(5)} | {"p0": "lima", "p1": "oslo"}
    edits = [EditSample(id=f"e{i}", prompt=f"q{i}", target="new") for i in range(5)]
    loc = [EditSample(id="l0", prompt="p0", target="lima"), EditSample(id="l1", prompt="p1", target="oslo")]
    return FakeSystem(routes, base), edits, loc


def test_threshold_grid():
    """Eleven thresholds from 0.60 to 0.70."""
    assert len(THRESHOLD_GRID) == 11
    assert THRESHOLD_GRID[0] == 0.6
    assert THRESHOLD_GRID[-1] == 0.7
    assert all(b > a for a, b in zip(THRESHOLD_GRID, THRESHOLD_GRID[1:]))


@pytest.mark.parametrize(
    "values,increasing,slack,expected",
    [
        ([1, 2, 2, 3], True, 0, True),
        ([1, 3, 2, 4], True, 0, False),
        ([1, 3, 2, 4], True, 1, True),
        ([5, 4, 4, 1], False, 0, True),
        ([5, 6, 4, 5, 1], False, 1, False),
    ],
)
def test_check_trend(values, increasing, slack, expected):
    """Monotone up to the allowed number of inversions."""
    assert check_trend(values, increasing=increasing, slack=slack) is expected


def test_threshold_sweep_trends(scripted):
    """Reliability falls and locality rises as the threshold grows."""
    system, edits, loc = scripted
    sweep = run_threshold_sweep(system, edits, loc)
    assert sweep.points == list(THRESHOLD_GRID)
    reliability = sweep.series("reliability")
    locality = sweep.series("locality")
    assert reliability[0] == 80.0
    assert reliability[-1] == 0.0
    assert locality[0] == 50.0
    assert locality[-1] == 100.0
    assert checks.check_threshold_sweep(sweep, AssertionConfig()) == []
    frame = sweep.to_frame()
    assert list(frame["theta"]) == list(THRESHOLD_GRID)
    assert sweep.to_dict()["axis"] == "theta"


def test_sweep_points_must_increase(scripted):
    """Sweep grids are strictly increasing."""
    system, edits, loc = scripted
    report = evaluate(system, edits, loc)
    with pytest.raises(ValueError):
        SweepResult(axis="theta", points=[0.7, 0.6], reports=[report, report])


def test_hit_rates():
    """Diagonal and step patterns of the activation matrix."""
    diagonal = ActivationMatrix(values=np.array([[0.9, 0.2], [0.3, 0.8], [0.7, 0.1]]), sample_ids=["a", "b", "c"])
    assert diagonal.hit_rate(1) == pytest.approx(2 / 3)
    steps = ActivationMatrix(values=np.array([[0.9, 0.2], [0.8, 0.1], [0.2, 0.9], [0.1, 0.7]]), sample_ids=list("abcd"))
    assert steps.hit_rate(2) == 1.0
    assert ActivationMatrix(values=np.zeros((0, 0)), sample_ids=[]).hit_rate() == 1.0
    assert list(steps.to_frame().columns) == ["neuron_0", "neuron_1"]


def test_activation_matrix_columns():
    """Column j holds neuron j's activations; adding a neuron leaves other columns alone."""
    cache = NegativeCache(width=2)
    cache.append("a", np.array([1.0, 0.0]))
    cache.append("b", np.array([0.0, 1.0]))
    one = NeuronBank(layer=0, theta=0.65, rows=np.array([[2.0, -2.0]], dtype=np.float32))
    two = NeuronBank(layer=0, theta=0.65, rows=np.array([[2.0, -2.0], [-2.0, 2.0]], dtype=np.float32))
    small, large = activation_matrix(one, cache), activation_matrix(two, cache)
    assert large.values.shape == (2, 2)
    np.testing.assert_array_equal(large.values[:, 0], small.values[:, 0])
    assert np.all((large.values > 0) & (large.values < 1))
    assert large.hit_rate(1) == 1.0
    with pytest.raises(ShapeError):
        activation_matrix(one, NegativeCache(width=3))


def test_default_layers():
    """Even layers plus the last."""
    assert default_layers(4) == [0, 2, 3]
    assert default_layers(5) == [0, 2, 4]
    assert default_layers(1) == [0]


def test_compression_sweep(tiny_model, edit_samples):
    """Expert counts follow the group size and matrices cover every edit."""
    sweep = run_compression_sweep(tiny_model, edit_samples[:3], edit_samples[3:], FAST, group_sizes=[2, 1])
    assert sweep.points == [1, 2]
    assert [e["n_experts"] for e in sweep.extra] == [3, 2]
    assert [e["last_group_short"] for e in sweep.extra] == [False, True]
    assert [m.values.shape for m in sweep.matrices] == [(3, 3), (3, 2)]
    assert checks.check_compression_sweep(sweep, 3, AssertionConfig(compression_margin=-101.0, min_diagonal_rate=0.0, min_step_rate=0.0)) == []


def test_layer_sweep(tiny_model, edit_samples):
    """One report per layer."""
    sweep = run_layer_sweep(tiny_model, edit_samples[:2], edit_samples[2:3], FAST, layers=[1, 0])
    assert sweep.points == [0, 1]
    assert len(sweep.reports) == 2
    assert all(0.0 <= v <= 100.0 for v in sweep.series("locality"))


def test_check_report_flags_low_metrics(scripted):
    """Bounds below the measured values pass; above them they fail and raise."""
    system, edits, loc = scripted
    report = evaluate(system, edits, loc, theta=0.6)
    assert checks.check_report(report, AssertionConfig(min_reliability=0, min_generality=0, min_locality=0)) == []
    failures = checks.check_report(report, AssertionConfig())
    assert any(f.startswith("reliability") for f in failures)
    with pytest.raises(AssertionFailure) as info:
        checks.raise_on_failures(failures)
    assert info.value.exit_code == 5
    checks.raise_on_failures([])


def test_check_layer_sweep():
    """The last layer must beat the first by the margin."""
    flat = SweepResult(axis="layer", points=[0, 3], reports=[_report(90.0, 100.0), _report(95.0, 100.0)])
    assert checks.check_layer_sweep(flat, AssertionConfig()) != []
    good = SweepResult(axis="layer", points=[0, 3], reports=[_report(40.0, 100.0), _report(95.0, 90.0)])
    assert checks.check_layer_sweep(good, AssertionConfig()) == []


def _report(reliability, locality):
    """A report with only the aggregate values filled in."""
    return MetricsReport(
        reliability=MetricResult(value=reliability, count=1, hits=1),
        generality=MetricResult(value=reliability, count=1, hits=1),
        locality=LocalityResult(value=locality, count=1, hits=1),
        theta=0.65,
    )
