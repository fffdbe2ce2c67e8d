"""Module that processes the settings for the application."""

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from os import path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

from src.scenlab.editing.records import ExpertTrainingConfig, NeuronTrainingConfig, ScenConfig
from src.scenlab.evaluation.dataset import DatasetConfig
from src.scenlab.exceptions import ConfigError, ScenlabError
from src.scenlab.lm.model import ModelConfig
from src.scenlab.lm.training import TrainingConfig

CONFIG = path.join(path.dirname(path.abspath(__file__)), "../config/experiment_config.yaml")
logger = logging.getLogger(__name__)

MODES = ("qa", "sequence")


@dataclass(frozen=True)
class SweepConfig:

    """Sweep grids; ``layers`` None means even layers plus the last."""

    thresholds: Tuple[float, ...] = ()
    layers: Optional[Tuple[int, ...]] = None
    group_sizes: Tuple[int, ...] = (1, 2, 4)

    def validate(self) -> "SweepConfig":
        """Check the grids."""
        for name in ("thresholds", "layers", "group_sizes"):
            grid = getattr(self, name)
            if grid is not None and any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError(f"sweeps.{name} must be strictly increasing")
        if any(not 0 < t < 1 for t in self.thresholds):
            raise ConfigError("sweeps.thresholds must lie in (0, 1)")
        if any(k < 1 for k in self.group_sizes):
            raise ConfigError("sweeps.group_sizes must be >= 1")
        return self


@dataclass(frozen=True)
class AssertionConfig:

    """Pass/fail bounds checked by ``--assert``; percentages in [0, 100], rates in [0, 1]."""

    min_reliability: float = 95.0
    min_generality: float = 70.0
    min_locality: float = 90.0
    trend_slack: int = 1
    compression_margin: float = 5.0
    layer_margin: float = 20.0
    min_low_layer_locality: float = 95.0
    min_diagonal_rate: float = 0.95
    min_step_rate: float = 0.90
    min_ppl_reduction: float = 0.5
    max_unrelated_ppl_change: float = 0.02


@dataclass(frozen=True)
class ExperimentConfig:

    """A validated experiment."""

    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scen: ScenConfig = field(default_factory=ScenConfig)
    sweeps: SweepConfig = field(default_factory=SweepConfig)
    assertions: AssertionConfig = field(default_factory=AssertionConfig)
    output_dir: Optional[str] = None
    mode: str = "qa"

    def to_dict(self) -> dict:
        """Plain-data echo for reports."""
        out = asdict(self)
        out["scen"]["neuron_input"] = self.scen.neuron_input.value
        return out


def read_yaml(file_path: str) -> Dict[str, Any]:
    """
    Read a YAML mapping.

    :raises ConfigError: missing file, invalid YAML or not a mapping.
    """
    if not path.isfile(file_path):
        raise ConfigError(f"config file {file_path} does not exist")
    try:
        with open(file_path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {file_path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{file_path} must contain a mapping at top level")
    return data


def load_defaults() -> Dict[str, Any]:
    """The packaged default experiment as a nested dict."""
    return read_yaml(CONFIG)


def deep_merge(base: Dict[str, Any], update: Dict[str, Any], where: str = "") -> Dict[str, Any]:
    """
    Merge ``update`` into a copy of ``base``.

    :raises ConfigError: a key of ``update`` does not exist in ``base``.
    """
    merged = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{where}{key}"
        if key not in merged:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a mapping")
            merged[key] = deep_merge(merged[key], value, f"{dotted}.")
        else:
            merged[key] = value
    return merged


def parse_override(item: str) -> Dict[str, Any]:
    """
    Turn ``section.key=value`` into a nested dict; the value is parsed as YAML.

    :raises ConfigError: no ``=`` or an empty key.
    """
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} must look like section.key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from e
    nested: Dict[str, Any] = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return nested


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply every ``--set`` override in order."""
    for item in overrides:
        data = deep_merge(data, parse_override(item))
    return data


def _build(cls, data: Dict[str, Any], section: str):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, dict) and not is_dataclass(value):
            nested = {"expert": ExpertTrainingConfig, "neuron": NeuronTrainingConfig}.get(f.name)
            if nested is None:
                raise ConfigError(f"{section}.{f.name} must not be a mapping")
            value = _build(nested, value, f"{section}.{f.name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from e


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a merged config dict into an :class:`ExperimentConfig`.

    :raises ConfigError: unknown keys, wrong types or values out of range.
    """
    defaults = load_defaults()
    data = deep_merge(defaults, data)
    mode = data.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    try:
        config = ExperimentConfig(
            model=_build(ModelConfig, data["model"], "model").validate(),
            training=_build(TrainingConfig, data["training"], "training").validate(),
            dataset=_build(DatasetConfig, data["dataset"], "dataset").validate(),
            scen=_build(ScenConfig, data["scen"], "scen").validate(),
            sweeps=_build(SweepConfig, data["sweeps"], "sweeps").validate(),
            assertions=_build(AssertionConfig, data["assertions"], "assertions"),
            output_dir=data.get("output_dir"),
            mode=mode,
        )
    except ConfigError:
        raise
    except (ScenlabError, ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    if config.scen.layer >= config.model.n_layers:
        raise ConfigError(f"scen.layer {config.scen.layer} out of range for {config.model.n_layers} layers")
    if config.sweeps.layers is not None and any(not 0 <= layer < config.model.n_layers for layer in config.sweeps.layers):
        raise ConfigError("sweeps.layers out of range")
    return config


def load_config(file_path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """
    Load the packaged defaults, merge an optional user file and apply overrides.

    :param file_path: user YAML file; only the keys it sets change.
    :param overrides: ``section.key=value`` strings, applied after the file.
    :return: the validated experiment.
    """
    data: Dict[str, Any] = {}
    if file_path is not None:
        data = read_yaml(file_path)
    data = apply_overrides(deep_merge(load_defaults(), data), overrides)
    config = build_config(data)
    logger.debug("loaded config %s", config)
    return config
