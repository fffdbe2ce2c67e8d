"""Test the editing data types: samples, config, negative cache and neuron bank."""

import numpy as np
import pytest

from src.scenlab.editing.records import EditSample, NegativeCache, NeuronBank, NeuronInput, NeuronRecord, ScenConfig, merge_neurons
from src.scenlab.exceptions import ConfigError, DatasetError, ShapeError


def neuron(index, weight, layer=2):
    """A neuron record around ``weight``."""
    return NeuronRecord(index=index, layer=layer, weight=np.asarray(weight, dtype=np.float32), member_ids=(f"s{index}",))


def test_sample_validation():
    """Prompts and targets must not be blank."""
    with pytest.raises(DatasetError):
        EditSample(id="x", prompt=" ", target="oslo")
    with pytest.raises(DatasetError):
        EditSample(id="x", prompt="where ?", target="")


def test_sample_record_round_trip(sample):
    """Dataset records carry the answer under ``answer``."""
    record = sample.to_record()
    assert record["answer"] == "oslo"
    assert EditSample.from_record(record) == sample
    with pytest.raises(DatasetError, match="missing"):
        EditSample.from_record({"id": "x", "prompt": "p"})


def test_scen_config_modes():
    """The neuron input is parsed from its string form."""
    assert ScenConfig(neuron_input="pre_activation").neuron_input is NeuronInput.PRE_ACTIVATION
    with pytest.raises(ConfigError):
        ScenConfig(neuron_input="logits")


@pytest.mark.parametrize("change", [{"theta": 1.0}, {"m": 0.0}, {"alpha": -0.1}, {"group_size": 0}])
def test_scen_config_ranges(change):
    """Out-of-range hyperparameters raise."""
    with pytest.raises(ConfigError):
        ScenConfig(**change).validate()


def test_negative_cache():
    """Vectors are kept in order and must have the neuron width."""
    cache = NegativeCache(width=3)
    assert cache.matrix().shape == (0, 3)
    cache.append("a", np.ones(3))
    cache.append("b", np.zeros(3))
    assert len(cache) == 2
    np.testing.assert_array_equal(cache.matrix()[0], [1, 1, 1])
    with pytest.raises(ShapeError):
        cache.append("c", np.ones(4))


def test_merge_keeps_order_and_values():
    """Merged rows equal the neuron weights in order."""
    records = [neuron(0, [1.0, 0.0]), neuron(1, [0.0, 2.0])]
    bank = merge_neurons(records, theta=0.6)
    assert len(bank) == 2
    assert bank.layer == 2
    np.testing.assert_array_equal(bank.rows, [[1.0, 0.0], [0.0, 2.0]])
    assert bank.member_ids == [("s0",), ("s1",)]


def test_merge_single_and_empty():
    """One neuron gives a one-row bank; an empty bank needs its shape spelled out."""
    assert merge_neurons([neuron(0, [1.0, 2.0, 3.0])], theta=0.6).rows.shape == (1, 3)
    assert len(merge_neurons([], theta=0.6, layer=1, width=3)) == 0
    with pytest.raises(ValueError):
        merge_neurons([], theta=0.6)


def test_merge_rejects_mixed_widths():
    """Neurons of different lengths cannot share a bank."""
    with pytest.raises(ShapeError):
        merge_neurons([neuron(0, [1.0, 2.0]), neuron(1, [1.0, 2.0, 3.0])], theta=0.6)


def test_bank_activations():
    """Each activation is the sigmoid of one row against the vector."""
    bank = NeuronBank(layer=0, theta=0.6, rows=np.array([[1.0, 0.0], [0.0, -2.0]], dtype=np.float32))
    vector = np.array([0.5, 1.0])
    expected = 1 / (1 + np.exp(-np.array([0.5, -2.0])))
    np.testing.assert_allclose(bank.activations(vector), expected, atol=1e-12)
    assert bank.activations(np.stack([vector, vector])).shape == (2, 2)
    assert np.all((bank.activations(vector) > 0) & (bank.activations(vector) < 1))
    with pytest.raises(ShapeError):
        bank.activations(np.ones(3))


def test_bank_remove():
    """Removing a neuron leaves the others untouched."""
    bank = merge_neurons([neuron(0, [1.0]), neuron(1, [2.0]), neuron(2, [3.0])], theta=0.6)
    smaller = bank.remove(1)
    np.testing.assert_array_equal(smaller.rows[:, 0], [1.0, 3.0])
    assert smaller.member_ids == [("s0",), ("s2",)]
