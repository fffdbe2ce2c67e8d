"""
Tensors and the recording graph behind reverse-mode differentiation.

A :class:`Graph` is a tape. While it is active (``with graph:``) every op whose inputs
include a tracked tensor appends a :class:`Node`; tracked tensors are the graph's
trainable parameters plus everything computed from them. Ops on untracked inputs run
forward only, so frozen weights never enter the tape and never receive gradients.
"""

import contextvars
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.scenlab.exceptions import GradientError, ShapeError

logger = logging.getLogger(__name__)

_uids = itertools.count()
_active_graph: contextvars.ContextVar = contextvars.ContextVar("scenlab_active_graph", default=None)

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:

    """
    A dense row-major tensor.

    Values are stored as 32-bit floats unless a float64 array is passed in, which is
    kept as is (finite-difference checks run in double precision).

    :param data: array-like values.
    :param requires_grad: whether the tensor is meant to be trained.
    :param name: optional label used in logs.
    """

    __slots__ = ("data", "requires_grad", "name", "uid")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        """Wrap ``data`` without copying when it already has a float dtype."""
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            array = np.ascontiguousarray(data)
        else:
            array = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.uid = next(_uids)

    @property
    def shape(self) -> Tuple[int, ...]:
        """Dimension sizes."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self.data.ndim

    @property
    def dtype(self):
        """Element type of the underlying array."""
        return self.data.dtype

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Return the underlying array (not a copy)."""
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:

    """One recorded op: its kind, inputs, output and backward rule."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    rule: BackwardRule


class Graph:

    """
    A tape of recorded ops plus the set of trainable tensors.

    :param parameters: tensors to train; all others are frozen.
    """

    def __init__(self, parameters: Iterable[Tensor] = ()):
        """Create an empty tape that watches ``parameters``."""
        self.nodes: List[Node] = []
        self.parameters: Dict[int, Tensor] = {}
        self._tracked: set = set()
        self._token = None
        self.finalized = False
        for tensor in parameters:
            self.watch(tensor)

    def watch(self, tensor: Tensor) -> None:
        """Mark ``tensor`` as trainable."""
        tensor.requires_grad = True
        self.parameters[tensor.uid] = tensor
        self._tracked.add(tensor.uid)

    def tracks(self, tensor: Tensor) -> bool:
        """Whether gradients flow through ``tensor`` in this graph."""
        return tensor.uid in self._tracked

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, rule: BackwardRule) -> None:
        """Append a node; inputs were recorded before it, so the tape stays topologically ordered."""
        if self.finalized:
            raise GradientError("cannot record into a finalized graph")
        self.nodes.append(Node(op=op, inputs=tuple(inputs), output=output, rule=rule))
        self._tracked.add(output.uid)

    def __enter__(self) -> "Graph":
        """Make this graph the active tape."""
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        """Deactivate the tape and freeze its node list."""
        _active_graph.reset(self._token)
        self._token = None
        self.finalized = True


def active_graph() -> Optional[Graph]:
    """Return the graph currently recording, if any."""
    return _active_graph.get()


def emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, rule: BackwardRule) -> Tensor:
    """
    Wrap an op result and record it when any input is tracked by the active graph.

    :param op: op name stored on the node.
    :param inputs: tensor operands, in the order ``rule`` returns their gradients.
    :param value: forward result.
    :param rule: maps the output gradient to one gradient (or None) per input.
    :return: the output tensor.
    """
    out = Tensor(value)
    graph = _active_graph.get()
    if graph is not None and any(graph.tracks(t) for t in inputs):
        graph.record(op, inputs, out, rule)
    return out


def backward(graph: Graph, loss: Tensor, step: Optional[int] = None) -> Dict[int, np.ndarray]:
    """
    Differentiate ``loss`` with respect to the graph's trainable tensors.

    :param graph: a finalized graph that recorded ``loss``.
    :param loss: single-element tensor.
    :param step: training step, quoted in error messages.
    :return: map from parameter uid to gradient; frozen or unreachable tensors are absent.
    :raises GradientError: loss is not scalar or not finite.
    """
    where = f" at step {step}" if step is not None else ""
    if loss.data.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}{where}")
    value = float(loss.data.reshape(()))
    if not np.isfinite(value):
        raise GradientError(f"non-finite loss {value}{where}")
    if not graph.finalized:
        raise GradientError("graph must be finalized (leave its context) before backward")
    if not graph.tracks(loss):
        return {}

    grads: Dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(node.output.uid, None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.rule(upstream)):
            if grad is None or not graph.tracks(tensor):
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(f"{node.op} backward", grad.shape, tensor.shape)
            previous = grads.get(tensor.uid)
            grads[tensor.uid] = grad if previous is None else previous + grad
    return {uid: grads[uid].astype(param.dtype, copy=False) for uid, param in graph.parameters.items() if uid in grads}
