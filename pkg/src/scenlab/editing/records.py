"""Data types of the editing method: samples, experts, neurons, the neuron bank and its config."""

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.scenlab.autodiff import ops
from src.scenlab.autodiff.tensor import Tensor
from src.scenlab.exceptions import ConfigError, DatasetError, ShapeError


class NeuronInput(str, enum.Enum):

    """Which FNN vector an indexing neuron reads: ``W_up(x_att)`` or its activation."""

    PRE_ACTIVATION = "pre_activation"
    POST_ACTIVATION = "post_activation"


@dataclass(frozen=True)
class EditSample:

    """
    One edit: prompt, desired answer and paraphrased prompts sharing that answer.

    :param id: unique sample id.
    :param prompt: prompt text, nonempty.
    :param target: desired answer text, nonempty.
    :param rewrites: paraphrases of ``prompt``; may be empty.
    """

    id: str
    prompt: str
    target: str
    rewrites: Tuple[str, ...] = ()

    def __post_init__(self):
        """Validate the sample."""
        if not self.prompt.strip():
            raise DatasetError(f"sample {self.id}: prompt is empty")
        if not self.target.strip():
            raise DatasetError(f"sample {self.id}: target is empty")
        object.__setattr__(self, "rewrites", tuple(self.rewrites))

    def to_record(self) -> dict:
        """Dataset-file record."""
        return {"id": self.id, "prompt": self.prompt, "answer": self.target, "rewrites": list(self.rewrites)}

    @classmethod
    def from_record(cls, record: dict) -> "EditSample":
        """Inverse of :meth:`to_record`."""
        try:
            return cls(id=str(record["id"]), prompt=record["prompt"], target=record["answer"], rewrites=tuple(record.get("rewrites", ())))
        except KeyError as e:
            raise DatasetError(f"dataset record missing field {e}") from e


@dataclass(frozen=True)
class ExpertTrainingConfig:

    """Expert optimizer settings; training stops early once loss is below ``target_loss`` and decoding succeeds."""

    lr: float = 5e-3
    max_steps: int = 100
    target_loss: float = 0.05
    check_every: int = 5
    max_new: int = 16


@dataclass(frozen=True)
class NeuronTrainingConfig:

    """
    Indexing-neuron optimizer settings.

    Training stops once the mean activation on the new edit reaches
    ``target_activation`` and no earlier edit's prompt scores above
    ``1 - target_activation``. ``None`` always runs ``max_steps``.
    """

    lr: float = 1e-3
    max_steps: int = 300
    target_activation: Optional[float] = 0.9


@dataclass(frozen=True)
class ScenConfig:

    """
    Editing hyperparameters.

    :param layer: edited transformer block.
    :param alpha: disactivate-loss offset.
    :param beta: margin-loss offset.
    :param m: weight of the locality terms.
    :param theta: routing threshold.
    :param neuron_input: which FNN vector neurons read.
    :param group_size: samples per expert (compressed editing when > 1).
    """

    layer: int = 3
    alpha: float = 0.7
    beta: float = 0.3
    m: float = 1.0
    theta: float = 0.65
    neuron_input: NeuronInput = NeuronInput.POST_ACTIVATION
    group_size: int = 1
    expert: ExpertTrainingConfig = field(default_factory=ExpertTrainingConfig)
    neuron: NeuronTrainingConfig = field(default_factory=NeuronTrainingConfig)

    def __post_init__(self):
        """Coerce the neuron input mode from its string form."""
        try:
            object.__setattr__(self, "neuron_input", NeuronInput(self.neuron_input))
        except ValueError:
            raise ConfigError(f"scen.neuron_input must be one of {[m.value for m in NeuronInput]}") from None

    def validate(self) -> "ScenConfig":
        """Check ranges."""
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("scen.alpha and scen.beta must be >= 0")
        if self.m <= 0:
            raise ConfigError("scen.m must be > 0")
        if not 0 < self.theta < 1:
            raise ConfigError("scen.theta must lie in (0, 1)")
        if self.group_size < 1:
            raise ConfigError("scen.group_size must be >= 1")
        if self.layer < 0:
            raise ConfigError("scen.layer must be >= 0")
        if self.expert.lr <= 0 or self.expert.max_steps < 0 or self.expert.check_every < 1:
            raise ConfigError("scen.expert: lr must be > 0, max_steps >= 0, check_every >= 1")
        if self.neuron.lr <= 0 or self.neuron.max_steps < 0:
            raise ConfigError("scen.neuron: lr must be > 0, max_steps >= 0")
        target = self.neuron.target_activation
        if target is not None and not self.theta < target < 1:
            raise ConfigError(f"scen.neuron.target_activation must lie in (theta, 1), got {target}")
        return self


@dataclass
class ExpertRecord:

    """A trained replacement ``W_down`` (``h x d_model``) for one layer and one group of samples."""

    index: int
    layer: int
    weight: np.ndarray
    member_ids: Tuple[str, ...]
    steps: int = 0
    final_loss: float = float("nan")
    success: bool = False


@dataclass
class NeuronRecord:

    """An indexing neuron: a length-``h`` weight vector plus training diagnostics."""

    index: int
    layer: int
    weight: np.ndarray
    member_ids: Tuple[str, ...]
    steps: int = 0
    final_loss: float = float("nan")
    success: bool = False
    target_activation: float = float("nan")
    max_negative: Optional[float] = None
    n_negatives: int = 0


@dataclass
class NegativeCache:

    """FNN vectors of every earlier edit sample, in edit order; all have length ``h``."""

    width: int
    ids: List[str] = field(default_factory=list)
    vectors: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        """Number of cached samples."""
        return len(self.ids)

    def append(self, sample_id: str, vector: np.ndarray) -> None:
        """Cache the vector of one sample."""
        if vector.shape != (self.width,):
            raise ShapeError("negative cache", vector.shape, (self.width,))
        self.ids.append(sample_id)
        self.vectors.append(np.array(vector, dtype=np.float32))

    def matrix(self) -> np.ndarray:
        """Cached vectors stacked as ``(n, h)``."""
        if not self.vectors:
            return np.zeros((0, self.width), dtype=np.float32)
        return np.stack(self.vectors)


@dataclass
class RoutingDecision:

    """Activations of every neuron on a query and the expert chosen, if any."""

    activations: np.ndarray
    max_value: Optional[float]
    expert: Optional[int]
    theta: float

    @property
    def routed(self) -> bool:
        """Whether an expert replaces the original FNN."""
        return self.expert is not None


def decide(activations: np.ndarray, theta: float) -> RoutingDecision:
    """
    Pick the most active neuron if it clears ``theta``.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    activations = np.asarray(activations, dtype=np.float64)
    if activations.size == 0:
        return RoutingDecision(activations=activations, max_value=None, expert=None, theta=theta)
    best = int(np.argmax(activations))
    value = float(activations[best])
    return RoutingDecision(activations=activations, max_value=value, expert=best if value > theta else None, theta=theta)


@dataclass
class NeuronBank:

    """
    Row-stack of all indexing neurons of one layer, in edit order.

    :param layer: edited layer.
    :param theta: routing threshold.
    :param rows: ``(t, h)`` neuron weights; row ``i`` is neuron ``i``.
    :param member_ids: sample ids covered by each row.
    """

    layer: int
    theta: float
    rows: np.ndarray
    member_ids: List[Tuple[str, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        """Number of neurons."""
        return int(self.rows.shape[0])

    @property
    def width(self) -> int:
        """Neuron length ``h``."""
        return int(self.rows.shape[1])

    def activations(self, vectors: np.ndarray) -> np.ndarray:
        """
        Sigmoid activations of every row on one vector (``(t,)``) or a stack of vectors (``(n, t)``).

        Computed in float64, where the sigmoid stays strictly inside (0, 1) for the
        scores trained neurons reach.
        """
        single = vectors.ndim == 1
        stacked = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if stacked.shape[1] != self.width:
            raise ShapeError("neuron bank", stacked.shape, self.rows.shape)
        if len(self) == 0:
            out = np.zeros((stacked.shape[0], 0))
        else:
            out = ops.sigmoid(ops.matmul(Tensor(stacked), Tensor(self.rows.astype(np.float64).T.copy()))).data
        return out[0] if single else out

    def remove(self, index: int) -> "NeuronBank":
        """A bank without row ``index``; the other rows are unchanged."""
        keep = [i for i in range(len(self)) if i != index]
        return NeuronBank(layer=self.layer, theta=self.theta, rows=self.rows[keep], member_ids=[self.member_ids[i] for i in keep])


def merge_neurons(records: Sequence[NeuronRecord], theta: float, layer: Optional[int] = None, width: Optional[int] = None) -> NeuronBank:
    """
    Concatenate neuron weights into a bank, in the given order, without retraining.

    :param records: neurons in edit order.
    :param theta: routing threshold stored with the bank.
    :param layer: layer of an empty bank (taken from the records otherwise).
    :param width: ``h`` of an empty bank (taken from the records otherwise).
    :raises ShapeError: neurons of different widths.
    """
    if not records:
        if layer is None or width is None:
            raise ValueError("an empty bank needs an explicit layer and width")
        return NeuronBank(layer=layer, theta=theta, rows=np.zeros((0, width), dtype=np.float32))
    first = records[0]
    for record in records[1:]:
        if record.weight.shape != first.weight.shape:
            raise ShapeError("merge_neurons", first.weight.shape, record.weight.shape)
        if record.layer != first.layer:
            raise ValueError(f"neurons of different layers: {first.layer} and {record.layer}")
    rows = np.stack([np.asarray(r.weight, dtype=np.float32) for r in records])
    return NeuronBank(layer=first.layer, theta=theta, rows=rows, member_ids=[tuple(r.member_ids) for r in records])
