"""Shared fixtures: a tiny synthetic dataset and tiny models built on its vocabulary."""

from dataclasses import replace

import numpy as np
import pytest

from src.scenlab.autodiff.tensor import Tensor
from src.scenlab.editing.editor import Generation
from src.scenlab.editing.records import EditSample, ExpertTrainingConfig, NeuronBank, NeuronTrainingConfig, ScenConfig, decide
from src.scenlab.evaluation.dataset import gen_synthetic_facts
from src.scenlab.lm.model import ModelConfig, TransformerLM

TINY_MODEL = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ffn=32, max_seq_len=32, seed=3)


def clone_model(model: TransformerLM) -> TransformerLM:
    """Deep copy of a model's weights."""
    params = {name: Tensor(t.data.copy(), name=name) for name, t in model.params.items()}
    return TransformerLM(model.config, model.tokenizer, params)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Twelve facts and two passages per set."""
    return gen_synthetic_facts(seed=1, n_facts=12, n_rewrites=3, n_passages=2)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    """Untrained two-layer model over the tiny dataset's vocabulary."""
    return TransformerLM.init(TINY_MODEL, tiny_dataset.tokenizer())


@pytest.fixture(scope="session")
def edit_samples(tiny_dataset):
    """Four counterfactual edits with rewrites."""
    return [fact.counterfactual_sample() for fact in tiny_dataset.facts[:4]]


@pytest.fixture
def fast_scen():
    """Editing settings small enough for unit tests."""
    return ScenConfig(
        layer=1,
        expert=ExpertTrainingConfig(lr=5e-3, max_steps=3, target_loss=0.05, check_every=1),
        neuron=NeuronTrainingConfig(lr=1e-2, max_steps=20),
    )


@pytest.fixture
def sample():
    """A single hand-written edit sample."""
    return EditSample(id="s0", prompt="[INST] where was kato miren born ? [/INST]", target="oslo", rewrites=("[INST] in which city was kato miren born ? [/INST]",))


class FakeSystem:

    """
    Stand-in for an edited system with scripted routing.

    :param routes: prompt -> (activation of its best neuron, expert index, routed answer).
    :param base: prompt -> base model answer.
    :param ppl: (prompt, routed) -> perplexity.
    """

    def __init__(self, routes, base, ppl=None, theta=0.65):
        """Store the script."""
        self.routes = routes
        self.base = base
        self.ppl = ppl or {}
        self.bank = NeuronBank(layer=0, theta=theta, rows=np.zeros((0, 1), dtype=np.float32))

    def generate(self, prompt, theta=None):
        """Routed answer when the scripted activation clears ``theta``."""
        activation, expert, answer = self.routes.get(prompt, (0.0, None, None))
        decision = decide(np.array([activation]), self.bank.theta if theta is None else theta)
        if not decision.routed or expert is None:
            return Generation(answer=self.base[prompt], decision=replace(decision, expert=None))
        return Generation(answer=answer, decision=replace(decision, expert=expert))

    def base_answer(self, prompt):
        """Scripted base answer."""
        return self.base[prompt]

    def perplexity(self, prompt, continuation, theta=None, routed=True):
        """Scripted perplexity."""
        return self.ppl[(prompt, routed)]
