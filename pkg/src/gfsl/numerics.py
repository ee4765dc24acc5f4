"""Dense float64 linear algebra helpers, loss primitives and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add the shape checking and numerically stable forms that the rest of the
package relies on.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateNormError, ShapeError

NORM_EPS = 1e-12


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_rows(m, axis: int = -1) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Entries equal to ``-inf`` are treated as masked and receive zero mass.
    """
    m = np.asarray(m, dtype=np.float64)
    shift = m.max(axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(m - shift)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_rows(m, axis: int = -1) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shift = m.max(axis=axis, keepdims=True)
    z = m - shift
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def l2_normalize(v, axis: int = 0, eps: float = NORM_EPS) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along ``axis`` (columns by default)."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateNormError(f"vector norm below {eps:g}; cannot normalize")
    return v / norm


def l2_normalize_backward(unit, norm, grad_unit, axis: int = -1) -> np.ndarray:
    """Gradient of ``x / |x|`` given the unit output, the norm and the upstream gradient."""
    proj = (unit * grad_unit).sum(axis=axis, keepdims=True)
    return (grad_unit - unit * proj) / norm


def cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if not 0 <= label < logits.size:
        raise ShapeError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax_rows(logits)[label])


def cross_entropy_batch(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the leading axes and its gradient w.r.t. ``logits``.

    ``logits`` has shape ``(..., C)`` and ``labels`` the matching leading shape.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ShapeError(f"label out of range for {logits.shape[-1]} classes")
    logp = log_softmax_rows(logits)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = labels.size
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / count), grad / count


def grad_check(
    loss_and_grad: Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grad(params)`` must return ``(loss, grads)`` with one gradient
    array per parameter array. Returns the largest relative error
    ``|a - n| / max(1e-8, |a| + |n|)`` over all coordinates.
    """
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    _, analytic = loss_and_grad(params)
    worst = 0.0
    for i, p in enumerate(params):
        a = np.asarray(analytic[i], dtype=np.float64)
        if a.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {a.shape}, parameter has {p.shape}")
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = loss_and_grad(params)
            flat[j] = orig - eps
            down, _ = loss_and_grad(params)
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            an = a.reshape(-1)[j]
            err = abs(an - numeric) / max(1e-8, abs(an) + abs(numeric))
            worst = max(worst, err)
    return worst
