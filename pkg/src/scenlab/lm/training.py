"""Base-model training on prompt/answer pairs."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.scenlab.autodiff.ops import cross_entropy
from src.scenlab.autodiff.optim import Adam, AdamHyper
from src.scenlab.autodiff.tensor import Graph, backward
from src.scenlab.exceptions import ConfigError, DivergenceError
from src.scenlab.lm.generation import greedy_decode
from src.scenlab.lm.model import ModelConfig, TransformerLM
from src.scenlab.lm.tokenizer import PAD_ID, Tokenizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:

    """
    Optimization settings for base training; ``batch_size`` 0 means full batch.

    Every ``check_every`` steps the corpus loss is measured; once it is below
    ``stop_loss`` and every pair decodes exactly, training stops. ``stop_loss``
    None always runs ``steps``.
    """

    steps: int = 1000
    batch_size: int = 128
    lr: float = 3e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    check_every: int = 100
    stop_loss: Optional[float] = 0.05

    def validate(self) -> "TrainingConfig":
        """Check ranges."""
        if self.steps < 0 or self.batch_size < 0 or self.log_every < 1 or self.check_every < 1:
            raise ConfigError("training.steps and training.batch_size must be >= 0, training.log_every and training.check_every >= 1")
        if self.stop_loss is not None and self.stop_loss <= 0:
            raise ConfigError(f"training.stop_loss must be > 0 or null, got {self.stop_loss}")
        if self.lr <= 0 or self.eps <= 0 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("training.lr and training.eps must be > 0 and betas in [0, 1)")
        return self

    @property
    def hyper(self) -> AdamHyper:
        """Adam hyperparameters."""
        return AdamHyper(lr=self.lr, betas=tuple(self.betas), eps=self.eps)


@dataclass
class Batch:

    """Right-padded next-token batch; ``weights`` is 1 on answer positions only."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray


@dataclass
class TrainingReport:

    """Summary of a base training run."""

    steps: int
    initial_loss: float
    final_loss: float
    exact_match: Optional[float] = None
    losses: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Plain-data view for the JSON report (without the loss curve)."""
        return {"steps": self.steps, "initial_loss": self.initial_loss, "final_loss": self.final_loss, "exact_match": self.exact_match}


def encode_pairs(tokenizer: Tokenizer, pairs: Sequence[Tuple[str, str]]) -> List[Tuple[List[int], int]]:
    """Encode every (prompt, answer) pair as ``([BOS] prompt answer [EOS], prompt length)``."""
    return [tokenizer.example_ids(prompt, answer) for prompt, answer in pairs]


def build_batch(encoded: Sequence[Tuple[List[int], int]]) -> Batch:
    """
    Stack encoded examples into a right-padded batch.

    Position ``j`` predicts token ``j + 1``; only answer tokens and the closing end
    marker are weighted.
    """
    width = max(len(seq) for seq, _ in encoded) - 1
    inputs = np.full((len(encoded), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(encoded), width), PAD_ID, dtype=np.int64)
    weights = np.zeros((len(encoded), width), dtype=np.float32)
    for row, (seq, prompt_len) in enumerate(encoded):
        inputs[row, : len(seq) - 1] = seq[:-1]
        targets[row, : len(seq) - 1] = seq[1:]
        weights[row, prompt_len - 1 : len(seq) - 1] = 1.0
    return Batch(inputs=inputs, targets=targets, weights=weights)


def corpus_loss(model: TransformerLM, encoded: Sequence[Tuple[List[int], int]], chunk: int = 256) -> float:
    """Answer-token loss over the whole corpus, without recording a graph."""
    total = 0.0
    count = 0.0
    for start in range(0, len(encoded), chunk):
        batch = build_batch(encoded[start : start + chunk])
        n = float(batch.weights.sum())
        total += cross_entropy(model.forward(batch.inputs).logits, batch.targets, batch.weights).item() * n
        count += n
    return total / count


def exact_match(model: TransformerLM, pairs: Sequence[Tuple[str, str]], max_new: int = 16) -> float:
    """Fraction of prompts whose greedy answer equals the expected answer."""
    if not pairs:
        return 1.0
    tokenizer = model.tokenizer
    hits = 0
    for prompt, answer in pairs:
        decoded = tokenizer.decode(greedy_decode(model, tokenizer.prompt_ids(prompt), max_new=max_new))
        hits += decoded == " ".join(answer.split())
    return hits / len(pairs)


def memorized_corpus(model: TransformerLM, encoded: Sequence[Tuple[List[int], int]], pairs: Sequence[Tuple[str, str]], training: TrainingConfig) -> bool:
    """True once the corpus loss is below ``training.stop_loss`` and every pair decodes exactly."""
    if training.stop_loss is None:
        return False
    loss = corpus_loss(model, encoded)
    logger.debug("corpus loss %.5f", loss)
    return loss < training.stop_loss and exact_match(model, pairs) == 1.0


@dataclass
class BaseTrainingResult:

    """The trained model and its report."""

    model: TransformerLM
    report: TrainingReport


def train_base(
    pairs: Sequence[Tuple[str, str]],
    config: ModelConfig,
    training: TrainingConfig,
    tokenizer: Optional[Tokenizer] = None,
    evaluate: bool = True,
) -> BaseTrainingResult:
    """
    Train a fresh model to memorize ``pairs``.

    :param pairs: (prompt, answer) training examples.
    :param config: model sizes; ``vocab_size`` is taken from the tokenizer.
    :param training: optimizer settings.
    :param tokenizer: vocabulary; built from ``pairs`` when omitted.
    :param evaluate: compute greedy exact-match over ``pairs`` after training.
    :return: model and training report.
    :raises DivergenceError: the loss became non-finite.
    """
    if not pairs:
        raise ValueError("training corpus is empty")
    training.validate()
    if tokenizer is None:
        tokenizer = Tokenizer.from_texts(text for pair in pairs for text in pair)
    model = TransformerLM.init(config, tokenizer)
    encoded = encode_pairs(tokenizer, pairs)
    params = list(model.params.values())
    optimizer = Adam(params, training.hyper)
    rng = np.random.Generator(np.random.Philox(training.seed))

    n = len(encoded)
    batch_size = n if training.batch_size == 0 or training.batch_size >= n else training.batch_size
    order = rng.permutation(n)
    cursor = 0
    losses: List[float] = []
    steps = training.steps
    memorized: Optional[float] = None
    for step in range(training.steps):
        if step and step % training.check_every == 0 and memorized_corpus(model, encoded, pairs, training):
            steps = step
            memorized = 1.0
            logger.info("corpus memorized after %d steps", step)
            break
        if batch_size == n:
            picked = range(n)
        else:
            if cursor + batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            picked = order[cursor : cursor + batch_size]
            cursor += batch_size
        batch = build_batch([encoded[i] for i in picked])
        with Graph(params) as graph:
            loss = cross_entropy(model.forward(batch.inputs).logits, batch.targets, batch.weights)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        optimizer.step(backward(graph, loss, step))
        losses.append(value)
        if step % training.log_every == 0:
            logger.debug("base training step %d loss %.5f", step, value)
    for param in params:
        param.requires_grad = False

    initial = losses[0] if losses else corpus_loss(model, encoded)
    final = corpus_loss(model, encoded)
    if not np.isfinite(final):
        raise DivergenceError(steps, final)
    report = TrainingReport(steps=steps, initial_loss=initial, final_loss=final, losses=losses)
    if evaluate:
        report.exact_match = memorized if memorized is not None else exact_match(model, pairs)
    logger.info("base training done: %d steps, loss %.4f -> %.4f, exact match %s", steps, initial, final, report.exact_match)
    return BaseTrainingResult(model=model, report=report)
