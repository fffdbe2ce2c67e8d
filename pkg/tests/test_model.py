"""Test the toy transformer, greedy decoding and perplexity."""

import math

import numpy as np
import pytest

from src.scenlab.exceptions import ConfigError, ShapeError
from src.scenlab.lm.generation import greedy_decode, perplexity, token_nll
from src.scenlab.lm.model import FnnOverride, ModelConfig, TapRequest, TransformerLM, down_name
from src.scenlab.lm.tokenizer import BOS_ID, PAD_ID
from tests.conftest import TINY_MODEL, clone_model


@pytest.fixture(scope="module")
def prompt(tiny_model, tiny_dataset):
    """Prompt ids of the first fact."""
    return tiny_model.tokenizer.prompt_ids(tiny_dataset.facts[0].prompt)


def test_init_is_deterministic(tiny_model):
    """The same config and tokenizer give bit-identical weights."""
    again = TransformerLM.init(TINY_MODEL, tiny_model.tokenizer)
    assert again.state_bytes() == tiny_model.state_bytes()


def test_forward_shapes(tiny_model, prompt):
    """Logits cover every position and the whole vocabulary."""
    logits = tiny_model.logits(prompt)
    assert logits.shape == (1, len(prompt), tiny_model.tokenizer.vocab_size)
    batch = np.array([prompt, prompt])
    assert tiny_model.logits(batch).shape == (2, len(prompt), tiny_model.tokenizer.vocab_size)


def test_forward_rejects_long_input(tiny_model):
    """Sequences longer than the context raise."""
    with pytest.raises(ShapeError):
        tiny_model.logits([BOS_ID] * (TINY_MODEL.max_seq_len + 1))


def test_config_validation():
    """Heads must divide the model width."""
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(nonlinearity="tanh").validate()


def test_fnn_input_shape_and_determinism(tiny_model, prompt):
    """The tap returns one row per batch entry and repeats exactly."""
    tap = tiny_model.fnn_input(prompt, 1)
    assert tap.x_att.shape == (1, TINY_MODEL.d_model)
    assert tap.up.shape == (1, TINY_MODEL.d_ffn)
    assert tap.hidden.shape == (1, TINY_MODEL.d_ffn)
    again = tiny_model.fnn_input(prompt, 1)
    np.testing.assert_array_equal(tap.hidden, again.hidden)


def test_fnn_input_ignores_weights_above_the_tap(tiny_model, prompt):
    """Changing later layers or the tapped layer's W_down leaves the FNN input alone."""
    changed = clone_model(tiny_model)
    changed.params["h1.w_q"].data += 1.0
    changed.params[down_name(0)].data *= -3.0
    np.testing.assert_array_equal(changed.fnn_input(prompt, 0).up, tiny_model.fnn_input(prompt, 0).up)


def test_tap_matches_full_forward(tiny_model, prompt):
    """Stopping early gives the same FNN input as a full pass."""
    full = tiny_model.forward(prompt, tap=TapRequest(layer=1))
    assert full.logits is not None
    np.testing.assert_array_equal(full.tap.hidden, tiny_model.fnn_input(prompt, 1).hidden)


@pytest.mark.parametrize("layer", [0, 1])
def test_tap_leaves_logits_unchanged(tiny_model, prompt, layer):
    """A non-stopping tap returns byte-identical logits to an untapped pass."""
    tapped = tiny_model.forward(prompt, tap=TapRequest(layer=layer, stop=False))
    plain = tiny_model.forward(prompt)
    assert tapped.tap is not None
    assert plain.tap is None
    assert tapped.logits.data.tobytes() == plain.logits.data.tobytes()


def test_override_with_base_weight_is_identity(tiny_model, prompt):
    """Overriding W_down with its own values changes nothing."""
    weight = tiny_model.params[down_name(1)]
    override = FnnOverride(layer=1, weight=type(weight)(weight.data.copy()))
    np.testing.assert_array_equal(tiny_model.logits(prompt, fnn_override=override), tiny_model.logits(prompt))


def test_override_changes_output(tiny_model, prompt):
    """A different W_down changes the logits."""
    weight = tiny_model.params[down_name(1)]
    override = FnnOverride(layer=1, weight=type(weight)(weight.data * 5.0))
    assert not np.array_equal(tiny_model.logits(prompt, fnn_override=override), tiny_model.logits(prompt))


def test_override_shape_checked(tiny_model, prompt):
    """A wrongly shaped override raises."""
    with pytest.raises(ShapeError):
        tiny_model.logits(prompt, fnn_override=FnnOverride(layer=0, weight=tiny_model.params["h0.w_up"]))


@pytest.fixture(scope="module")
def flat_model(tiny_model):
    """A model whose logits are all zero."""
    model = clone_model(tiny_model)
    model.params["w_out"].data[:] = 0.0
    return model


def test_greedy_ties_pick_lowest_id(flat_model, prompt):
    """With all logits equal the lowest id wins every step."""
    assert greedy_decode(flat_model, prompt, max_new=4) == [PAD_ID] * 4


def test_greedy_stops_when_context_is_full(tiny_model):
    """No token is generated once the prompt fills the context."""
    assert greedy_decode(tiny_model, [BOS_ID] * TINY_MODEL.max_seq_len, max_new=3) == []


def test_uniform_model_perplexity_is_vocab_size(flat_model, prompt):
    """Equal logits give perplexity equal to the vocabulary size."""
    assert perplexity(flat_model, prompt) == pytest.approx(flat_model.tokenizer.vocab_size, rel=1e-9)


def test_perplexity_bounds(tiny_model, prompt):
    """Perplexity is at least 1 and scoring a suffix uses only its tokens."""
    assert perplexity(tiny_model, prompt) >= 1.0
    nll = token_nll(tiny_model, prompt, start=3)
    assert len(nll) == len(prompt) - 3
    assert perplexity(tiny_model, prompt, start=3) == pytest.approx(math.exp(nll.mean()))


def test_perplexity_needs_two_tokens(tiny_model):
    """A single token has nothing to predict."""
    with pytest.raises(ValueError):
        perplexity(tiny_model, [BOS_ID])
