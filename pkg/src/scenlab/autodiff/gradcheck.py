"""Central finite-difference check of analytic gradients."""

from typing import Callable

import numpy as np

from src.scenlab.autodiff.tensor import Graph, Tensor, backward


def finite_diff_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-3) -> float:
    """
    Compare the gradient from :func:`backward` with central differences.

    ``f`` is evaluated in float64 so the comparison measures the backward rules,
    not rounding.

    :param f: maps a tensor to a single-element tensor.
    :param point: where to evaluate the gradient.
    :param eps: finite-difference step, in ``[1e-5, 1e-2]``.
    :return: max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x0 = np.array(np.asarray(point), dtype=np.float64)
    x = Tensor(x0.copy())
    with Graph([x]) as graph:
        y = f(x)
    analytic = backward(graph, y).get(x.uid, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        plus = x0.copy().reshape(-1)
        minus = x0.copy().reshape(-1)
        plus[i] += eps
        minus[i] -= eps
        f_plus = f(Tensor(plus.reshape(x0.shape))).item()
        f_minus = f(Tensor(minus.reshape(x0.shape))).item()
        flat[i] = (f_plus - f_minus) / (2 * eps)

    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
