"""Per-edit expert ``W_down`` matrices trained with everything else frozen."""

import logging
from typing import List, Sequence

import numpy as np

from src.scenlab.autodiff.ops import cross_entropy
from src.scenlab.autodiff.optim import Adam, AdamHyper
from src.scenlab.autodiff.tensor import Graph, Tensor, backward
from src.scenlab.editing.records import EditSample, ExpertRecord, NeuronInput, ScenConfig
from src.scenlab.exceptions import DatasetError
from src.scenlab.lm.generation import greedy_decode
from src.scenlab.lm.model import FnnOverride, TransformerLM, down_name
from src.scenlab.lm.tokenizer import Tokenizer
from src.scenlab.lm.training import build_batch

logger = logging.getLogger(__name__)


def capture_fnn_input(model: TransformerLM, prompt_ids: Sequence[int], layer: int, mode: NeuronInput) -> np.ndarray:
    """
    The length-``h`` vector an indexing neuron reads for a prompt.

    Only weights up to layer ``layer``'s ``W_up`` are used.

    :param model: the frozen base model.
    :param prompt_ids: prompt ids, begin marker included.
    :param layer: edited layer.
    :param mode: ``W_up(x_att)`` or its activation, both at the last prompt token.
    :raises ValueError: empty prompt.
    """
    tap = model.fnn_input(prompt_ids, layer)
    vector = tap.up if NeuronInput(mode) is NeuronInput.PRE_ACTIVATION else tap.hidden
    return vector[0]


def check_encodable(tokenizer: Tokenizer, samples: Sequence[EditSample], max_len: int) -> None:
    """
    Reject samples the base model cannot represent.

    :raises DatasetError: out-of-vocabulary words or sequences longer than the context.
    """
    for sample in samples:
        for text in (sample.prompt, sample.target, *sample.rewrites):
            if tokenizer.encode(text).has_unknown:
                raise DatasetError(f"sample {sample.id}: {text!r} has words outside the checkpoint vocabulary")
        ids, _ = tokenizer.example_ids(sample.prompt, sample.target)
        if len(ids) - 1 > max_len:
            raise DatasetError(f"sample {sample.id}: {len(ids)} tokens exceed the context of {max_len}")


def decodes_to(model: TransformerLM, prompt: str, target: str, override: FnnOverride = None) -> bool:
    """Whether greedy decoding of ``prompt`` yields exactly ``target``."""
    tokenizer = model.tokenizer
    answer = list(tokenizer.encode(target).ids)
    generated = greedy_decode(model, tokenizer.prompt_ids(prompt), max_new=len(answer) + 1, fnn_override=override)
    return generated == answer


def train_expert(model: TransformerLM, samples: Sequence[EditSample], cfg: ScenConfig, index: int = 0) -> ExpertRecord:
    """
    Train a replacement ``W_down`` for layer ``cfg.layer`` on one group of samples.

    The expert starts as a copy of the base ``W_down`` and is trained with Adam on
    answer-token cross-entropy; gradients flow through the frozen upper layers but
    only the expert is updated. Training stops once the loss is below
    ``cfg.expert.target_loss`` and every member decodes to its target.

    :param model: frozen base model.
    :param samples: the group's samples (one unless editing is compressed).
    :param cfg: editing settings.
    :param index: expert index recorded on the result.
    :return: the expert; ``success`` is False when training ran out of steps.
    """
    if not samples:
        raise ValueError("an expert needs at least one sample")
    model.check_layer(cfg.layer)
    settings = cfg.expert
    expert = Tensor(model.params[down_name(cfg.layer)].data.copy(), name=f"expert{index}")
    override = FnnOverride(layer=cfg.layer, weight=expert)
    batch = build_batch([model.tokenizer.example_ids(s.prompt, s.target) for s in samples])
    optimizer = Adam([expert], AdamHyper(lr=settings.lr))

    def succeeded() -> bool:
        return all(decodes_to(model, s.prompt, s.target, override) for s in samples)

    steps = 0
    loss_value = float("nan")
    success = False
    for step in range(settings.max_steps + 1):
        with Graph([expert]) as graph:
            loss = cross_entropy(model.forward(batch.inputs, fnn_override=override).logits, batch.targets, batch.weights)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            logger.warning("expert %d: non-finite loss at step %d, keeping the last finite weights", index, step)
            break
        if loss_value < settings.target_loss and step % settings.check_every == 0 and succeeded():
            success = True
            break
        if step == settings.max_steps:
            break
        optimizer.step(backward(graph, loss, step))
        steps += 1
    expert.requires_grad = False
    if not success:
        success = succeeded()
    if not success:
        logger.warning("expert %d did not reproduce its targets after %d steps (loss %.4f)", index, steps, loss_value)
    return ExpertRecord(
        index=index,
        layer=cfg.layer,
        weight=expert.data,
        member_ids=tuple(s.id for s in samples),
        steps=steps,
        final_loss=loss_value,
        success=success,
    )


def expert_overrides(experts: Sequence[ExpertRecord]) -> List[FnnOverride]:
    """One override per expert, in index order."""
    return [FnnOverride(layer=e.layer, weight=Tensor(np.asarray(e.weight, dtype=np.float32))) for e in experts]
