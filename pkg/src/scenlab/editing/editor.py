"""Sequential editing driver and the edited system that serves queries through the neuron bank."""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.scenlab.editing.experts import capture_fnn_input, check_encodable, expert_overrides, train_expert
from src.scenlab.editing.indexing import train_indexing_neuron
from src.scenlab.editing.records import (
    EditSample,
    ExpertRecord,
    NegativeCache,
    NeuronBank,
    NeuronRecord,
    RoutingDecision,
    ScenConfig,
    decide,
    merge_neurons,
)
from src.scenlab.exceptions import DatasetError, IntegrityError
from src.scenlab.lm.checkpoint import checkpoint_fingerprint
from src.scenlab.lm.generation import greedy_decode, perplexity
from src.scenlab.lm.model import TransformerLM
from src.utils.decorators import timer

logger = logging.getLogger(__name__)


@dataclass
class EditLog:

    """One structured entry per edit step."""

    entries: List[dict] = field(default_factory=list)

    def add(self, expert: ExpertRecord, neuron: NeuronRecord) -> dict:
        """Record the outcome of one step."""
        entry = {
            "step": expert.index + 1,
            "sample_ids": list(expert.member_ids),
            "expert_steps": expert.steps,
            "expert_loss": expert.final_loss,
            "expert_success": expert.success,
            "neuron_steps": neuron.steps,
            "neuron_loss": neuron.final_loss,
            "a_t": neuron.target_activation,
            "max_negative": neuron.max_negative,
            "n_negatives": neuron.n_negatives,
            "neuron_success": neuron.success,
        }
        self.entries.append(entry)
        return entry

    def success_counts(self) -> Dict[str, int]:
        """Per-step success totals."""
        return {
            "steps": len(self.entries),
            "expert_success": sum(e["expert_success"] for e in self.entries),
            "neuron_success": sum(e["neuron_success"] for e in self.entries),
            "both_success": sum(e["expert_success"] and e["neuron_success"] for e in self.entries),
        }

    def to_jsonl(self) -> str:
        """Line-delimited JSON, one entry per line."""
        return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in self.entries)


@dataclass
class EditRun:

    """Everything a sequential editing run produces."""

    bank: NeuronBank
    experts: List[ExpertRecord]
    neurons: List[NeuronRecord]
    cache: NegativeCache
    log: EditLog


def group_samples(edits: Sequence[EditSample], group_size: int) -> List[List[EditSample]]:
    """Consecutive groups of ``group_size`` samples; the last group may be smaller."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return [list(edits[i : i + group_size]) for i in range(0, len(edits), group_size)]


@timer
def sequential_edit(model: TransformerLM, edits: Sequence[EditSample], cfg: ScenConfig) -> EditRun:
    """
    Apply ``edits`` in order, one expert and one indexing neuron per group.

    For each group the FNN vectors are captured first, then the expert is trained,
    then the neuron is trained against every vector cached so far; only then are
    the group's vectors added to the cache. The base model is never modified.

    :param model: frozen base model.
    :param edits: edit samples in edit order; ids must be unique.
    :param cfg: editing settings.
    :return: bank, experts, neurons, negative cache and log.
    :raises IntegrityError: indices disagree or the base weights changed.
    :raises DatasetError: duplicate ids or samples the tokenizer cannot encode.
    """
    cfg.validate()
    model.check_layer(cfg.layer)
    ids = [sample.id for sample in edits]
    if len(set(ids)) != len(ids):
        raise DatasetError("edit sample ids must be unique")
    check_encodable(model.tokenizer, edits, model.config.max_seq_len)
    before = checkpoint_fingerprint(model)

    groups = group_samples(edits, cfg.group_size)
    if groups and len(groups[-1]) < cfg.group_size:
        logger.warning("%d edits do not divide into groups of %d; the last group has %d", len(edits), cfg.group_size, len(groups[-1]))
    cache = NegativeCache(width=model.fnn_width)
    experts: List[ExpertRecord] = []
    neurons: List[NeuronRecord] = []
    log = EditLog()
    for t, group in enumerate(groups):
        vectors = np.stack([capture_fnn_input(model, model.tokenizer.prompt_ids(s.prompt), cfg.layer, cfg.neuron_input) for s in group])
        expert = train_expert(model, group, cfg, index=t)
        neuron = train_indexing_neuron(vectors, cache, cfg, index=t, member_ids=[s.id for s in group])
        if expert.index != t or neuron.index != t or expert.member_ids != neuron.member_ids:
            raise IntegrityError(f"step {t}: expert {expert.index} and neuron {neuron.index} do not match")
        for sample, vector in zip(group, vectors):
            cache.append(sample.id, vector)
        experts.append(expert)
        neurons.append(neuron)
        entry = log.add(expert, neuron)
        logger.debug("edit step %d: %s", t + 1, entry)

    if checkpoint_fingerprint(model) != before:
        raise IntegrityError("base model weights changed during editing")
    bank = merge_neurons(neurons, cfg.theta, layer=cfg.layer, width=model.fnn_width)
    logger.info("sequential editing done: %s", log.success_counts())
    return EditRun(bank=bank, experts=experts, neurons=neurons, cache=cache, log=log)


@dataclass
class Generation:

    """Answer text of a query and the routing decision behind it."""

    answer: str
    decision: RoutingDecision


class EditedSystem:

    """
    The frozen base model plus a neuron bank and its experts.

    Routing is evaluated once per query on the prompt's last token and the chosen
    FNN is held for every decoding step. Activations are cached per prompt and
    answers per (prompt, expert), so threshold sweeps reuse earlier work.

    :param model: frozen base model.
    :param bank: indexing neurons; row ``i`` belongs to ``experts[i]``.
    :param experts: experts in index order.
    :param cfg: editing settings (neuron input mode).
    :param max_new: most tokens greedy decoding may add.
    """

    def __init__(self, model: TransformerLM, bank: NeuronBank, experts: Sequence[ExpertRecord], cfg: ScenConfig, max_new: int = 16):
        """Build the expert overrides."""
        for position, expert in enumerate(experts):
            if expert.index != position or expert.layer != bank.layer:
                raise IntegrityError(f"expert at position {position} has index {expert.index}, layer {expert.layer}")
        self.model = model
        self.bank = bank
        self.experts = list(experts)
        self.cfg = cfg
        self.max_new = max_new
        self._overrides = expert_overrides(self.experts)
        self._activations: Dict[Tuple[int, ...], np.ndarray] = {}
        self._answers: Dict[Tuple[Tuple[int, ...], Optional[int]], str] = {}

    def activations(self, prompt: str) -> np.ndarray:
        """Activations of every neuron on a prompt."""
        key = tuple(self.model.tokenizer.prompt_ids(prompt))
        if key not in self._activations:
            if len(self.bank) == 0:
                self._activations[key] = np.zeros(0)
            else:
                vector = capture_fnn_input(self.model, key, self.bank.layer, self.cfg.neuron_input)
                self._activations[key] = self.bank.activations(vector)
        return self._activations[key]

    def route(self, prompt: str, theta: Optional[float] = None) -> RoutingDecision:
        """Routing decision for a prompt at ``theta`` (the bank's threshold by default)."""
        decision = decide(self.activations(prompt), self.bank.theta if theta is None else theta)
        if decision.expert is not None and decision.expert >= len(self.experts):
            raise IntegrityError(f"neuron {decision.expert} has no matching expert ({len(self.experts)} stored)")
        return decision

    def _answer(self, prompt: str, expert: Optional[int]) -> str:
        ids = tuple(self.model.tokenizer.prompt_ids(prompt))
        key = (ids, expert)
        if key not in self._answers:
            override = None if expert is None else self._overrides[expert]
            self._answers[key] = self.model.tokenizer.decode(greedy_decode(self.model, ids, max_new=self.max_new, fnn_override=override))
        return self._answers[key]

    def generate(self, prompt: str, theta: Optional[float] = None) -> Generation:
        """Greedy answer of the edited system."""
        decision = self.route(prompt, theta)
        return Generation(answer=self._answer(prompt, decision.expert), decision=decision)

    def base_answer(self, prompt: str) -> str:
        """Greedy answer of the unedited model."""
        return self._answer(prompt, None)

    def perplexity(self, prompt: str, continuation: str, theta: Optional[float] = None, routed: bool = True) -> float:
        """
        Perplexity of ``continuation`` given ``prompt``.

        :param routed: route on the prompt; otherwise score with the base model.
        """
        tokenizer = self.model.tokenizer
        head = tokenizer.prompt_ids(prompt)
        tokens = head + list(tokenizer.encode(continuation).ids)
        expert = self.route(prompt, theta).expert if routed else None
        override = None if expert is None else self._overrides[expert]
        return perplexity(self.model, tokens, fnn_override=override, start=len(head))


def edited_generate(model: TransformerLM, query: str, bank: NeuronBank, experts: Sequence[ExpertRecord], cfg: ScenConfig) -> Generation:
    """Answer one query with the edited system."""
    return EditedSystem(model, bank, experts, cfg).generate(query)
