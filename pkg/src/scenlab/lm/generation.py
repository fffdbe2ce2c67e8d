"""Greedy decoding and perplexity."""

import math
from typing import List, Optional, Sequence

import numpy as np

from src.scenlab.lm.model import FnnOverride, TransformerLM
from src.scenlab.lm.tokenizer import EOS_ID


def greedy_decode(model: TransformerLM, prompt_ids: Sequence[int], max_new: int = 8, fnn_override: Optional[FnnOverride] = None) -> List[int]:
    """
    Argmax decoding until the end-of-sequence token or ``max_new`` tokens.

    Ties go to the lowest token id. Decoding also stops when the context is full.

    :param model: the language model.
    :param prompt_ids: prompt ids, including the begin-of-sequence marker.
    :param max_new: maximum number of generated tokens.
    :param fnn_override: optional replacement ``W_down`` held for every step.
    :return: generated ids, without the end-of-sequence token.
    """
    ids = list(prompt_ids)
    answer: List[int] = []
    for _ in range(max_new):
        if len(ids) >= model.config.max_seq_len:
            break
        next_id = int(np.argmax(model.logits(ids, fnn_override=fnn_override)[0, -1]))
        if next_id == EOS_ID:
            break
        answer.append(next_id)
        ids.append(next_id)
    return answer


def token_nll(model: TransformerLM, tokens: Sequence[int], fnn_override: Optional[FnnOverride] = None, start: int = 1) -> np.ndarray:
    """Negative log-likelihood (float64) of ``tokens[start:]``, each given its prefix."""
    if len(tokens) < 2:
        raise ValueError(f"perplexity needs at least 2 tokens, got {len(tokens)}")
    if not 1 <= start < len(tokens):
        raise ValueError(f"start must lie in [1, {len(tokens)}), got {start}")
    ids = np.asarray(tokens, dtype=np.int64)
    z = model.logits(ids[:-1], fnn_override=fnn_override)[0].astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = log_probs[np.arange(len(ids) - 1), ids[1:]]
    return -picked[start - 1 :]


def perplexity(model: TransformerLM, tokens: Sequence[int], fnn_override: Optional[FnnOverride] = None, start: int = 1) -> float:
    """
    ``exp`` of the mean next-token negative log-likelihood.

    :param tokens: the full sequence, at least two ids.
    :param start: first position that is scored; earlier tokens only condition.
    :return: perplexity, at least 1.
    """
    return math.exp(float(token_nll(model, tokens, fnn_override=fnn_override, start=start).mean()))
