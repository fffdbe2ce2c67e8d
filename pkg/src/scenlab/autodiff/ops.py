"""
Primitive differentiable ops.

Shapes are explicit: the only broadcasting is a 1-D bias added along the last axis,
everything else requires matching shapes or works row-wise over the last axis.
Reductions accumulate in float64 and cast back to the input dtype.
"""

import math
from typing import Optional, Sequence

import numpy as np

from src.scenlab.autodiff.tensor import Tensor, emit
from src.scenlab.exceptions import ShapeError

EXP_CLAMP = 30.0
_GELU_C = math.sqrt(2.0 / math.pi)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared by every leading index of ``a`` or has the
    same leading dimensions as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    x, w = a.data, b.data

    def rule(g):
        ga = g @ _swap(w)
        if shared:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(x) @ g
        return ga, gb

    return emit("matmul", (a, b), x @ w, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal shapes, or ``a`` plus a 1-D bias along its last axis."""
    if a.shape == b.shape:
        return emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return emit("add", (a, b), a.data + b.data, lambda g: (g, g.reshape(-1, width).sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of equal shapes."""
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    c = a.dtype.type(factor)
    return emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, shift: float) -> Tensor:
    """Add a constant to every element."""
    c = a.dtype.type(shift)
    return emit("add_scalar", (a,), a.data + c, lambda g: (g,))


def exp(a: Tensor, clamp: float = EXP_CLAMP) -> Tensor:
    """Exponential with the argument clamped to ``[-clamp, clamp]``."""
    inside = np.abs(a.data) <= clamp
    value = np.exp(np.clip(a.data, -clamp, clamp))
    return emit("exp", (a,), value, lambda g: (g * value * inside,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, written through tanh so it never overflows."""
    half = a.dtype.type(0.5)
    value = half * (np.tanh(a.data * half) + 1)
    return emit("sigmoid", (a,), value, lambda g: (g * value * (1 - value),))


def relu(a: Tensor) -> Tensor:
    """Rectified linear unit."""
    mask = a.data > 0
    return emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    t = np.tanh(c * (x + k * x**3))
    value = half * x * (1 + t)

    def rule(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * dt),)

    return emit("gelu", (a,), value, rule)


NONLINEARITIES = {"relu": relu, "gelu": gelu}


def activation(a: Tensor, kind: str) -> Tensor:
    """Apply the FNN nonlinearity named ``kind``."""
    try:
        return NONLINEARITIES[kind](a)
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}; expected one of {sorted(NONLINEARITIES)}") from None


def softmax(a: Tensor, causal: bool = False) -> Tensor:
    """
    Softmax over the last axis.

    With ``causal`` the last two axes form a square score matrix and entries above the
    diagonal get zero probability.
    """
    x = a.data
    if causal:
        if a.ndim < 2 or x.shape[-1] != x.shape[-2]:
            raise ShapeError("softmax(causal)", a.shape, a.shape)
        keep = np.tril(np.ones(x.shape[-2:], dtype=bool))
        x = np.where(keep, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = (e / e.sum(axis=-1, keepdims=True)).astype(a.dtype, copy=False)

    def rule(g):
        inner = (g * value).sum(axis=-1, keepdims=True)
        return (value * (g - inner),)

    return emit("softmax", (a,), value, rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply ``gain`` and ``bias``."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gain.shape if gain.shape != (width,) else bias.shape)
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1 / np.sqrt(var + data.dtype.type(eps))
    xhat = centered * inv_std
    value = xhat * gain.data + bias.data

    def rule(g):
        gx_hat = g * gain.data
        gx = inv_std / width * (width * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, width)
        return gx, (flat_g * xhat.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return emit("layer_norm", (x, gain, bias), value, rule)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``weight``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape)

    def rule(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return emit("embedding", (weight,), weight.data[ids], rule)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean next-token negative log-likelihood.

    :param logits: ``(..., V)`` scores.
    :param targets: integer class per leading position.
    :param weights: optional per-position weights (0 masks a position out).
    :return: scalar loss, the weighted mean over positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    w = np.ones(targets.shape, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != targets.shape:
        raise ShapeError("cross_entropy", targets.shape, w.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one position with positive weight")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - log_norm
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    value = np.asarray(-(picked * w).sum() / total, dtype=logits.dtype)

    def rule(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (w / total)[..., None] * g.item()
        return (grad.astype(logits.dtype),)

    return emit("cross_entropy", (logits,), value, rule)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the first axis; trailing shapes must agree."""
    if not tensors:
        raise ValueError("concat_rows needs at least one tensor")
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise ShapeError("concat_rows", tensors[0].shape, t.shape)
    bounds = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return emit("concat_rows", tuple(tensors), np.concatenate([t.data for t in tensors], axis=0), lambda g: tuple(np.split(g, bounds, axis=0)))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the first axis."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError("slice_rows", a.shape, (start, stop))

    def rule(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return emit("slice_rows", (a,), a.data[start:stop], rule)


def mean(a: Tensor) -> Tensor:
    """Mean of all elements as a scalar."""
    n = a.data.size
    value = np.asarray(a.data.astype(np.float64).mean(), dtype=a.dtype)
    return emit("mean", (a,), value, lambda g: (np.full_like(a.data, g.item() / n),))


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar."""
    value = np.asarray(a.data.astype(np.float64).sum(), dtype=a.dtype)
    return emit("sum", (a,), value, lambda g: (np.full_like(a.data, g.item()),))


def expand_scalar(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat a single-element tensor to ``shape``."""
    if a.data.size != 1:
        raise ShapeError("expand_scalar", a.shape, tuple(shape))
    value = np.full(tuple(shape), a.data.reshape(()), dtype=a.dtype)
    return emit("expand_scalar", (a,), value, lambda g: (np.asarray(g.sum(), dtype=a.dtype).reshape(a.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """View with a new shape of the same size."""
    value = a.data.reshape(tuple(shape))
    return emit("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes."""
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))
