"""
Indexing neurons and routing.

An indexing neuron is a length-``h`` vector ``w``; its activation on an FNN vector
``u`` is ``sigmoid(w . u)``. Each neuron is trained to fire on its own edit and to
stay below its own activation, by a margin, on every earlier edit.
"""

import logging
from typing import Optional, Sequence

import numpy as np

from src.scenlab.autodiff import ops
from src.scenlab.autodiff.optim import Adam, AdamHyper
from src.scenlab.autodiff.tensor import Graph, Tensor, backward
from src.scenlab.editing.experts import capture_fnn_input
from src.scenlab.editing.records import NegativeCache, NeuronBank, NeuronRecord, RoutingDecision, ScenConfig, decide
from src.scenlab.exceptions import DivergenceError, ShapeError
from src.scenlab.lm.model import TransformerLM

logger = logging.getLogger(__name__)


def indexing_loss_tensor(a_t: Tensor, negatives: Optional[Tensor], alpha: float, beta: float, m: float) -> Tensor:
    """
    Differentiable indexing loss.

    ``exp(-a_t) + m * (mean exp(a_i + alpha) + mean exp(a_i - a_t + beta))``; with no
    negatives only the first term remains.

    :param a_t: single-element activation on the edit being indexed.
    :param negatives: ``(n, 1)`` activations on earlier edits, or None.
    """
    loss = ops.exp(ops.scale(a_t, -1.0))
    if negatives is None or negatives.data.size == 0:
        return loss
    disactivate = ops.mean(ops.exp(ops.add_scalar(negatives, alpha)))
    gap = ops.sub(negatives, ops.expand_scalar(a_t, negatives.shape))
    margin = ops.mean(ops.exp(ops.add_scalar(gap, beta)))
    return ops.add(loss, ops.scale(ops.add(disactivate, margin), m))


def indexing_loss(a_t: float, negatives: Sequence[float], alpha: float, beta: float, m: float) -> float:
    """
    Evaluate the indexing loss on plain activations.

    :raises ValueError: an activation outside ``(0, 1)``.
    """
    values = [a_t, *negatives]
    if not all(0.0 < float(v) < 1.0 for v in values):
        raise ValueError(f"activations must lie in (0, 1), got {values}")
    target = Tensor(np.array(float(a_t), dtype=np.float64))
    others = Tensor(np.asarray(negatives, dtype=np.float64).reshape(-1, 1)) if len(negatives) else None
    return indexing_loss_tensor(target, others, alpha, beta, m).item()


def train_indexing_neuron(
    target_vectors: np.ndarray,
    cache: NegativeCache,
    cfg: ScenConfig,
    index: int = 0,
    member_ids: Sequence[str] = (),
) -> NeuronRecord:
    """
    Train one indexing neuron against every vector in ``cache``.

    The weight starts at zero and is optimized in float64 with Adam for at most
    ``cfg.neuron.max_steps`` steps, stopping early once the activations clear
    ``cfg.neuron.target_activation``. With several target vectors (compressed
    editing) ``a_t`` is their mean activation.

    :param target_vectors: ``(k, h)`` FNN vectors of the group being indexed.
    :param cache: vectors of all earlier edits, used as negatives.
    :param cfg: editing settings.
    :param index: neuron index recorded on the result.
    :param member_ids: sample ids of the group.
    :return: the neuron, stored as float32.
    :raises DivergenceError: the loss became non-finite.
    """
    targets = np.atleast_2d(np.asarray(target_vectors, dtype=np.float64))
    width = targets.shape[1]
    if width != cache.width:
        raise ShapeError("train_indexing_neuron", targets.shape, (len(cache), cache.width))
    positives = Tensor(targets)
    negatives = Tensor(cache.matrix().astype(np.float64)) if len(cache) else None
    weight = Tensor(np.zeros((width, 1), dtype=np.float64), name=f"neuron{index}")
    optimizer = Adam([weight], AdamHyper(lr=cfg.neuron.lr))
    stop_at = cfg.neuron.target_activation
    steps = cfg.neuron.max_steps

    for step in range(cfg.neuron.max_steps):
        with Graph([weight]) as graph:
            a_t = ops.mean(ops.sigmoid(ops.matmul(positives, weight)))
            a_neg = ops.sigmoid(ops.matmul(negatives, weight)) if negatives is not None else None
            loss = indexing_loss_tensor(a_t, a_neg, cfg.alpha, cfg.beta, cfg.m)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(step, loss_value)
        if stop_at is not None and a_t.item() >= stop_at and (a_neg is None or float(a_neg.data.max()) <= 1.0 - stop_at):
            steps = step
            break
        optimizer.step(backward(graph, loss, step))

    row = weight.data[:, 0].astype(np.float32)
    bank = NeuronBank(layer=cfg.layer, theta=cfg.theta, rows=row[None, :])
    target_activation = float(bank.activations(targets)[:, 0].mean())
    negative_activations = bank.activations(cache.matrix())[:, 0]
    max_negative = float(negative_activations.max()) if len(cache) else None
    final = indexing_loss_tensor(
        Tensor(np.array(target_activation)),
        Tensor(negative_activations.reshape(-1, 1)) if len(cache) else None,
        cfg.alpha,
        cfg.beta,
        cfg.m,
    )
    success = target_activation > cfg.theta and (max_negative is None or target_activation > max_negative)
    if not success:
        logger.warning("neuron %d: a_t=%.4f, max negative=%s, theta=%.2f", index, target_activation, max_negative, cfg.theta)
    return NeuronRecord(
        index=index,
        layer=cfg.layer,
        weight=row,
        member_ids=tuple(member_ids),
        steps=steps,
        final_loss=final.item(),
        success=success,
        target_activation=target_activation,
        max_negative=max_negative,
        n_negatives=len(cache),
    )


def route(model: TransformerLM, prompt_ids: Sequence[int], bank: NeuronBank, cfg: ScenConfig, theta: Optional[float] = None) -> RoutingDecision:
    """
    Decide which expert, if any, serves a query.

    Activations are computed once from the query's last prompt token; an empty bank
    never routes and skips the forward pass.

    :param theta: threshold override; defaults to the bank's.
    """
    threshold = bank.theta if theta is None else theta
    if len(bank) == 0:
        return decide(np.zeros(0), threshold)
    vector = capture_fnn_input(model, prompt_ids, bank.layer, cfg.neuron_input)
    return decide(bank.activations(vector), threshold)
