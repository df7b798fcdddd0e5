"""Linear hinge-loss SVM solved in the dual by coordinate descent.

The bias is learned through an extra constant feature, so the dual keeps
simple box constraints ``0 <= alpha_i <= C`` and every coordinate update has a
closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidArgumentError


@dataclass
class SVMResult:
    w: np.ndarray
    b: float
    duals: np.ndarray
    sweeps: int
    kkt_violation: float
    objective: float


def _design(positives, negatives) -> tuple[np.ndarray, np.ndarray]:
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise InvalidArgumentError("SVM needs at least one positive and one negative")
    if pos.shape[1] != neg.shape[1]:
        raise InvalidArgumentError("positives and negatives differ in dimension")
    x = np.vstack([pos, neg])
    x = np.hstack([x, np.ones((x.shape[0], 1))])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    return x, y


def projected_gradient(grad: np.ndarray, alpha: np.ndarray, c: float) -> np.ndarray:
    pg = grad.copy()
    pg[(alpha <= 0) & (grad > 0)] = 0.0
    pg[(alpha >= c) & (grad < 0)] = 0.0
    return pg


def dual_objective(alpha: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    w = (alpha * y) @ x
    return 0.5 * float(w @ w) - float(alpha.sum())


def svm_train(positives, negatives, c: float, *, tol: float = 1e-6, max_sweeps: int = 10000,
              seed: int = 0) -> SVMResult:
    if c <= 0:
        raise InvalidArgumentError(f"SVM C must be positive, got {c}")
    x, y = _design(positives, negatives)
    n = len(y)
    qdiag = np.einsum("ij,ij->i", x, x)
    alpha = np.zeros(n)
    w = np.zeros(x.shape[1])
    rng = np.random.default_rng(seed)
    violation = np.inf
    for sweep in range(1, max_sweeps + 1):
        for i in rng.permutation(n):
            g = y[i] * (w @ x[i]) - 1.0
            if (alpha[i] <= 0 and g >= 0) or (alpha[i] >= c and g <= 0):
                continue
            old = alpha[i]
            alpha[i] = min(max(old - g / qdiag[i], 0.0), c)
            w += (alpha[i] - old) * y[i] * x[i]
        w = (alpha * y) @ x  # resync to avoid drift from incremental updates
        grad = y * (x @ w) - 1.0
        violation = float(np.max(np.abs(projected_gradient(grad, alpha, c))))
        if violation < tol:
            return SVMResult(w[:-1].copy(), float(w[-1]), alpha, sweep, violation,
                             dual_objective(alpha, x, y))
    raise ConvergenceError(
        f"SVM dual coordinate descent did not converge in {max_sweeps} sweeps "
        f"(KKT residual {violation:.3g})", residual=violation)
