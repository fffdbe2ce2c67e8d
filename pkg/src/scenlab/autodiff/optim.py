"""Adam optimizer over :class:`Tensor` parameters."""

from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from src.scenlab.autodiff.tensor import Tensor
from src.scenlab.exceptions import ShapeError


@dataclass(frozen=True)
class AdamHyper:

    """Adam hyperparameters."""

    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class AdamState:

    """First and second moment estimates keyed by parameter uid, plus the step counter."""

    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Dict[int, np.ndarray], state: AdamState, hyper: AdamHyper) -> Tuple[Sequence[Tensor], AdamState]:
    """
    Apply one Adam update in place.

    A parameter missing from ``grads`` is treated as having a zero gradient, which
    leaves its value unchanged while the moment estimates decay.

    :param params: parameters to update.
    :param grads: gradients keyed by parameter uid, as returned by ``backward``.
    :param state: optimizer state, updated in place.
    :param hyper: learning rate, betas and epsilon.
    :return: the updated parameters and state.
    """
    state.step += 1
    b1, b2 = hyper.betas
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for param in params:
        grad = grads.get(param.uid)
        if grad is None:
            grad = np.zeros_like(param.data)
        elif grad.shape != param.shape:
            raise ShapeError("adam_step", param.shape, grad.shape)
        dtype = param.dtype.type
        m = state.m.get(param.uid)
        v = state.v.get(param.uid)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = dtype(b1) * m + dtype(1.0 - b1) * grad
        v = dtype(b2) * v + dtype(1.0 - b2) * grad * grad
        state.m[param.uid] = m
        state.v[param.uid] = v
        update = dtype(hyper.lr) * (m / dtype(correction1)) / (np.sqrt(v / dtype(correction2)) + dtype(hyper.eps))
        param.data -= update.astype(param.dtype, copy=False)
    return params, state


class Adam:

    """
    Stateful wrapper around :func:`adam_step`.

    :param params: the tensors this optimizer owns.
    :param hyper: Adam hyperparameters.
    """

    def __init__(self, params: Sequence[Tensor], hyper: AdamHyper = AdamHyper()):
        """Start from an empty state."""
        self.params = list(params)
        self.hyper = hyper
        self.state = AdamState()

    def step(self, grads: Dict[int, np.ndarray]) -> None:
        """Update every owned parameter from ``grads``."""
        adam_step(self.params, grads, self.state, self.hyper)
