"""Dense float64 vector/matrix ops with hand-derived analytic gradients.

Every differentiable operation returns its gradient alongside the value so
callers can assemble composite losses without an autodiff graph, and
``finite_diff_check`` verifies any (loss, grad) pair against central
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

NORM_FLOOR = 1e-12


class NumericError(ValueError):
    """Violated numeric precondition (non-finite input, bad shape, ...)."""


class DegenerateInputError(NumericError):
    """Input too close to a singular configuration to be meaningful."""


class NonFiniteGradientError(NumericError):
    """A parameter gradient contains NaN/Inf; the update step was aborted."""


def check_finite(arr: np.ndarray | Iterable[float], name: str = "array") -> np.ndarray:
    """Return ``arr`` as a float64 ndarray, rejecting NaN/Inf entries."""
    out = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{name} contains non-finite entries")
    return out


@dataclass(eq=False)
class Param:
    """A trainable tensor with its gradient and SGD momentum buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    momentum_buf: np.ndarray

    @classmethod
    def create(cls, name: str, value: np.ndarray | Iterable[float]) -> "Param":
        value = check_finite(value, name)
        return cls(
            name=name,
            value=value,
            grad=np.zeros_like(value),
            momentum_buf=np.zeros_like(value),
        )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction."""
    v = check_finite(v, "v")
    norm = float(np.linalg.norm(v))
    if norm <= NORM_FLOOR:
        raise DegenerateInputError(f"cannot normalize near-zero vector (norm={norm:.3e})")
    return v / norm


def l2_normalize_jacobian(v: np.ndarray) -> np.ndarray:
    """Jacobian d(v/||v||)/dv, shape (d, d): (I - u u^T) / ||v||."""
    v = check_finite(v, "v")
    norm = float(np.linalg.norm(v))
    if norm <= NORM_FLOOR:
        raise DegenerateInputError(f"cannot normalize near-zero vector (norm={norm:.3e})")
    u = v / norm
    return (np.eye(v.shape[0]) - np.outer(u, u)) / norm


def l2_normalize_vjp(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backpropagate ``grad_out`` (w.r.t. the unit vector) through l2_normalize."""
    norm = float(np.linalg.norm(v))
    if norm <= NORM_FLOOR:
        raise DegenerateInputError(f"cannot normalize near-zero vector (norm={norm:.3e})")
    u = v / norm
    return (grad_out - float(grad_out @ u) * u) / norm


def cosine_sim_matrix(z: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Pairwise dot products of unit rows: symmetric, unit diagonal, entries in [-1, 1].

    Rows must already be normalized; each upper-triangle entry is computed
    once and mirrored so the result is exactly symmetric.
    """
    z = check_finite(z, "z")
    if z.ndim != 2:
        raise NumericError("cosine_sim_matrix expects a 2-D array")
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise NumericError(f"row {worst} is not unit norm (|norm-1|={abs(norms[worst]-1.0):.3e})")
    s = z @ z.T
    s = np.triu(s) + np.triu(s, 1).T
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a 1-D logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / np.sum(e)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``label`` under softmax(logits).

    Returns (loss, grad) with grad = softmax(logits) - one_hot(label).
    """
    logits = check_finite(logits, "logits")
    if not 0 <= label < logits.shape[0]:
        raise NumericError(f"label {label} out of range for {logits.shape[0]} logits")
    m = float(np.max(logits))
    lse = m + math.log(float(np.sum(np.exp(logits - m))))
    loss = lse - float(logits[label])
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return loss, grad


def softmax_cross_entropy_batch(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`softmax_cross_entropy` over a (n, c) logit matrix."""
    logits = check_finite(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise NumericError(f"labels out of range for {c} classes")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    losses = lse - logits[np.arange(n), labels]
    grads = np.exp(logits - lse[:, None])
    grads[np.arange(n), labels] -= 1.0
    return losses, grads


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Huber-style box loss summed over coordinates; gradient clamps to +/-1."""
    pred = check_finite(pred, "pred")
    target = check_finite(target, "target")
    err = pred - target
    abs_err = np.abs(err)
    quadratic = abs_err < 1.0
    loss = float(np.sum(np.where(quadratic, 0.5 * err * err, abs_err - 0.5)))
    grad = np.where(quadratic, err, np.sign(err))
    return loss, grad


def sigmoid(x: float) -> float:
    """Overflow-safe logistic function."""
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def binary_cross_entropy(logit: float, label: int) -> tuple[float, float]:
    """Stable logistic BCE on a single logit; grad = sigmoid(logit) - label."""
    if not math.isfinite(logit):
        raise NumericError("logit is non-finite")
    if label not in (0, 1):
        raise NumericError(f"label must be 0 or 1, got {label}")
    # max(x,0) - x*y + log(1 + exp(-|x|)) avoids overflow on either tail
    loss = max(logit, 0.0) - logit * label + math.log1p(math.exp(-abs(logit)))
    grad = sigmoid(logit) - label
    return loss, grad


def smooth_l1_batch(
    pred: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`smooth_l1` over (n, k) prediction/target matrices."""
    pred = check_finite(pred, "pred")
    target = check_finite(target, "target")
    err = pred - target
    abs_err = np.abs(err)
    quadratic = abs_err < 1.0
    losses = np.sum(np.where(quadratic, 0.5 * err * err, abs_err - 0.5), axis=1)
    grads = np.where(quadratic, err, np.sign(err))
    return losses, grads


def binary_cross_entropy_batch(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise :func:`binary_cross_entropy` over logit/label vectors."""
    logits = check_finite(logits, "logits")
    labels = np.asarray(labels, dtype=np.float64)
    losses = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    sig = np.where(
        logits >= 0.0,
        1.0 / (1.0 + np.exp(-np.clip(logits, 0.0, None))),
        np.exp(np.clip(logits, None, 0.0)) / (1.0 + np.exp(np.clip(logits, None, 0.0))),
    )
    grads = sig - labels
    return losses, grads


def sgd_step(
    params: Iterable[Param],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """One SGD-with-momentum update over ``params``; zeroes grads afterwards.

    buf <- momentum * buf + (grad + weight_decay * value)
    value <- value - lr * buf

    Aborts before touching any value if a gradient is non-finite.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter '{p.name}'")
    for p in params:
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad + weight_decay * p.value
        p.value -= lr * p.momentum_buf
        p.zero_grad()


def finite_diff_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f`` maps a point to (scalar loss, gradient). Each coordinate is probed
    with (f(x+eps*e) - f(x-eps*e)) / (2*eps); the max absolute deviation is
    reported relative to the largest finite-difference coordinate.
    """
    x = check_finite(x, "x").ravel().copy()
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).ravel().copy()
    numeric = np.zeros_like(x)
    for i in range(x.shape[0]):
        step = np.zeros_like(x)
        step[i] = eps
        lo, _ = f(x - step)
        hi, _ = f(x + step)
        numeric[i] = (hi - lo) / (2.0 * eps)
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale
