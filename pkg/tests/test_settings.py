"""Test the settings module."""

import pytest

from src.scenlab.editing.records import NeuronInput
from src.scenlab.exceptions import ConfigError
from src.utils.settings import apply_overrides, deep_merge, load_config, load_defaults, parse_override


def test_defaults():
    """The packaged defaults load and validate."""
    config = load_config()
    assert config.mode == "qa"
    assert config.model.d_model == 64
    assert config.model.n_layers == 4
    assert config.scen.layer == 3
    assert config.scen.theta == 0.65
    assert config.scen.neuron_input is NeuronInput.POST_ACTIVATION
    assert config.scen.expert.max_steps == 100
    assert config.scen.neuron.target_activation == 0.9
    assert config.training.steps == 1000
    assert config.training.stop_loss == 0.05
    assert config.sweeps.thresholds[0] == 0.6
    assert len(config.sweeps.thresholds) == 11
    assert config.sweeps.layers is None
    assert config.to_dict()["scen"]["neuron_input"] == "post_activation"


def test_parse_override():
    """Values are parsed as YAML under a dotted path."""
    assert parse_override("scen.theta=0.6") == {"scen": {"theta": 0.6}}
    assert parse_override("sweeps.layers=[0, 1]") == {"sweeps": {"layers": [0, 1]}}
    assert parse_override("scen.expert.max_steps=5") == {"scen": {"expert": {"max_steps": 5}}}
    with pytest.raises(ConfigError):
        parse_override("scen.theta")


def test_overrides_apply_in_order():
    """Later overrides win."""
    data = apply_overrides(load_defaults(), ["scen.theta=0.6", "scen.theta=0.62", "mode=sequence"])
    assert data["scen"]["theta"] == 0.62
    assert data["mode"] == "sequence"


def test_unknown_key_rejected():
    """Typos are configuration errors."""
    with pytest.raises(ConfigError, match="scen.thetaa"):
        load_config(overrides=["scen.thetaa=0.6"])
    with pytest.raises(ConfigError):
        deep_merge({"a": {"b": 1}}, {"a": 3})


def test_user_file(tmp_path):
    """A user file only needs the keys it changes."""
    path = tmp_path / "experiment.yaml"
    path.write_text("scen:\n  layer: 1\n  group_size: 2\nmode: sequence\n")
    config = load_config(str(path), overrides=["scen.neuron_input=pre_activation"])
    assert config.scen.layer == 1
    assert config.scen.group_size == 2
    assert config.mode == "sequence"
    assert config.scen.neuron_input is NeuronInput.PRE_ACTIVATION
    assert config.scen.theta == 0.65


@pytest.mark.parametrize(
    "override",
    ["scen.theta=1.5", "scen.layer=4", "mode=poetry", "model.n_heads=5", "sweeps.thresholds=[0.7, 0.6]", "dataset.n_rewrites=2", "scen.neuron_input=logits"],
)
def test_invalid_values(override):
    """Out-of-range or inconsistent values are configuration errors."""
    with pytest.raises(ConfigError) as info:
        load_config(overrides=[override])
    assert info.value.exit_code == 2


def test_missing_and_broken_files(tmp_path):
    """Missing files and non-mapping YAML are configuration errors."""
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(str(tmp_path / "nothing.yaml"))
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(str(path))
