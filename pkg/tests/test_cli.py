"""Test the CLI commands end to end on a tiny model."""

import json
import logging

import pandas as pd
import pytest
from click.testing import CliRunner

from src.scenlab.cli import cli
from src.scenlab.evaluation.dataset import gen_synthetic_facts, write_dataset
from src.scenlab.experiment_controller import CHECKPOINT_FILE, EDIT_LOG_FILE, KB_FILE, METRICS_DETAIL_FILE, METRICS_FILE, ExperimentController
from src.utils.settings import load_config

TINY = [
    "model.d_model=16",
    "model.n_layers=2",
    "model.n_heads=2",
    "model.d_ffn=32",
    "training.steps=2",
    "training.batch_size=0",
    "dataset.n_facts=10",
    "dataset.n_passages=1",
    "dataset.n_edits=2",
    "dataset.n_loc=2",
    "scen.layer=1",
    "scen.expert.max_steps=2",
    "scen.expert.check_every=1",
    "scen.neuron.max_steps=10",
    "sweeps.thresholds=[0.6, 0.65, 0.7]",
]


def sets(output_dir, *extra):
    """``--set`` arguments for the tiny experiment writing to ``output_dir``."""
    args = []
    for item in (*TINY, f"output_dir={output_dir}", *extra):
        args += ["--set", item]
    return args


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Output directory holding a trained tiny checkpoint and its dataset."""
    output_dir = tmp_path_factory.mktemp("run")
    result = CliRunner().invoke(cli, ["train-base", *sets(output_dir)])
    assert result.exit_code == 0, result.output
    return output_dir


def test_train_base_is_reproducible(trained, tmp_path):
    """Training twice with the same config writes identical checkpoints."""
    result = CliRunner().invoke(cli, ["train-base", *sets(tmp_path)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / CHECKPOINT_FILE).read_bytes() == (trained / CHECKPOINT_FILE).read_bytes()
    report = json.loads((tmp_path / "training_report.json").read_text())
    assert report["steps"] == 2
    assert report["config"]["model"]["d_model"] == 16


def test_pipeline(trained, mocker):
    """Edit, evaluate, sweep and export against the trained checkpoint."""
    mocker.patch("src.scenlab.evaluation.dataset.decodes_to", return_value=True)
    runner = CliRunner()

    result = runner.invoke(cli, ["edit", *sets(trained)])
    assert result.exit_code == 0, result.output
    summary = next(line for line in result.output.splitlines() if line.startswith("{"))
    assert json.loads(summary)["steps"] == 2
    assert (trained / KB_FILE).stat().st_size > 0
    assert len((trained / EDIT_LOG_FILE).read_text().splitlines()) == 2

    result = runner.invoke(cli, ["eval", *sets(trained)])
    assert result.exit_code == 0, result.output
    report = json.loads((trained / METRICS_FILE).read_text())
    assert 0.0 <= report["reliability"] <= 100.0
    assert report["locality"] >= report["unrouted"]
    assert len(pd.read_csv(trained / METRICS_DETAIL_FILE)) == report["reliability_count"] + report["generality_count"] + report["locality_count"]

    result = runner.invoke(cli, ["sweep", "threshold", *sets(trained)])
    assert result.exit_code == 0, result.output
    assert list(pd.read_csv(trained / "sweep_threshold.csv")["theta"]) == [0.6, 0.65, 0.7]

    result = runner.invoke(cli, ["export-activations", *sets(trained)])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(trained / "activations.csv", index_col=0).shape == (2, 2)

    result = runner.invoke(cli, ["eval", "--assert", *sets(trained, "assertions.min_locality=101")])
    assert result.exit_code == 5
    assert "locality" in result.output


def test_invalid_override_exit_code(tmp_path):
    """Configuration errors exit with code 2."""
    result = CliRunner().invoke(cli, ["train-base", *sets(tmp_path, "scen.theta=2")])
    assert result.exit_code == 2
    result = CliRunner().invoke(cli, ["train-base", "--set", "scen.nothing=1"])
    assert result.exit_code == 2


def test_missing_checkpoint_exit_code(tmp_path):
    """Commands that need a checkpoint fail cleanly without one."""
    result = CliRunner().invoke(cli, ["edit", *sets(tmp_path)])
    assert result.exit_code == 2
    assert "does not exist" in result.output


def test_foreign_dataset_exit_code(trained, tmp_path):
    """A dataset the checkpoint was not trained on exits with code 4."""
    write_dataset(tmp_path / "other", gen_synthetic_facts(seed=99, n_facts=10))
    result = CliRunner().invoke(cli, ["edit", "--dataset", str(tmp_path / "other"), *sets(trained)])
    assert result.exit_code == 4


def test_unknown_sweep_kind(trained):
    """Only the three sweeps exist."""
    result = CliRunner().invoke(cli, ["sweep", "depth", *sets(trained)])
    assert result.exit_code == 2


def test_train_base_logs_its_time_once(tmp_path, caplog):
    """One timing line per base training run."""
    config = load_config(overrides=[*TINY, f"output_dir={tmp_path}"])
    with caplog.at_level(logging.INFO, logger="src.utils.decorators"):
        ExperimentController(config).train_base()
    timings = [r.getMessage() for r in caplog.records if r.getMessage().startswith("Execution time for train_base")]
    assert len(timings) == 1
