"""Module contains the CLI commands for the scenlab package."""

import functools
import logging
import sys

import click
import coloredlogs

from src.scenlab.exceptions import ScenlabError
from src.scenlab.experiment_controller import SWEEP_KINDS, ExperimentController, summary_text
from src.utils.settings import load_config

logger = logging.getLogger(__name__)


def handle_errors(func):
    """Turn scenlab errors into a message on stderr and the error's exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ScenlabError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Experiment YAML; packaged defaults when omitted.")
set_option = click.option("--set", "overrides", multiple=True, help="Override one config value, e.g. --set scen.theta=0.62 (repeatable).")
checkpoint_option = click.option("--checkpoint", type=click.Path(), default=None, help="Base checkpoint; <output_dir>/checkpoint.bin by default.")
dataset_option = click.option("--dataset", type=click.Path(), default=None, help="Dataset directory; <output_dir>/dataset by default.")
kb_option = click.option("--kb", type=click.Path(), default=None, help="Knowledge base; <output_dir>/kb.bin by default.")
assert_option = click.option("--assert", "check", is_flag=True, default=False, help="Exit with code 5 when an acceptance check fails.")


# Create a group for the CLI commands
@click.group()
@click.option("--verbose", "-v", is_flag=True, default=False, help="Log at DEBUG level.")
def cli(verbose: bool):
    """Sequential model editing experiments on a toy transformer."""
    coloredlogs.install(level=logging.DEBUG if verbose else logging.INFO, fmt="%(asctime)s %(name)s %(levelname)s %(message)s")


@cli.command(name="train-base")
@config_option
@set_option
@handle_errors
def train_base(config_path, overrides):
    """Generate the synthetic dataset and train the base model on it."""
    controller = ExperimentController(load_config(config_path, overrides))
    checkpoint = controller.train_base()
    click.echo(f"checkpoint: {checkpoint}")


@cli.command(name="edit")
@config_option
@set_option
@checkpoint_option
@dataset_option
@handle_errors
def edit(config_path, overrides, checkpoint, dataset):
    """Apply the configured edits in sequence and write the knowledge base."""
    controller = ExperimentController(load_config(config_path, overrides))
    summary = controller.edit(checkpoint=checkpoint, dataset=dataset)
    click.echo(summary_text(summary))


@cli.command(name="eval")
@config_option
@set_option
@checkpoint_option
@kb_option
@dataset_option
@assert_option
@handle_errors
def evaluate(config_path, overrides, checkpoint, kb, dataset, check):
    """Score reliability, generality and locality of the edited system."""
    controller = ExperimentController(load_config(config_path, overrides), check=check)
    report = controller.evaluate(checkpoint=checkpoint, kb=kb, dataset=dataset)
    click.echo(summary_text({key: value for key, value in report.summary().items() if key != "config"}))


@cli.command(name="sweep")
@click.argument("kind", type=click.Choice(SWEEP_KINDS))
@config_option
@set_option
@checkpoint_option
@kb_option
@dataset_option
@assert_option
@handle_errors
def sweep(kind, config_path, overrides, checkpoint, kb, dataset, check):
    """Run the threshold, layer or compression sweep."""
    controller = ExperimentController(load_config(config_path, overrides), check=check)
    result = controller.sweep(kind, checkpoint=checkpoint, kb=kb, dataset=dataset)
    click.echo(result.to_frame().to_string(index=False))


@cli.command(name="export-activations")
@config_option
@set_option
@checkpoint_option
@kb_option
@dataset_option
@assert_option
@handle_errors
def export_activations(config_path, overrides, checkpoint, kb, dataset, check):
    """Write the activation matrix of every stored neuron on every stored edit."""
    controller = ExperimentController(load_config(config_path, overrides), check=check)
    matrix = controller.export_activations(checkpoint=checkpoint, kb=kb, dataset=dataset)
    click.echo(summary_text({"rows": len(matrix.sample_ids), "diagonal_rate": matrix.hit_rate(1)}))


if __name__ == "__main__":
    """
    Execute the CLI commands via this entrypoint.

    """
    cli()
