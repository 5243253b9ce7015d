"""Confusion-based target-proportion estimation with CMA smoothing.

The estimator inverts the soft confusion matrix of the target classifier on
the mapped labelled domain against its prediction marginal on the unlabelled
target, as a simplex-constrained least squares solved by projected gradient
with exact Euclidean projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DatasetError,
    DegenerateConfusionWarning,
    IllConditionedWarning,
    InvalidProportionsError,
    ShapeError,
)
from .nn import DenseNet, dense_forward, softmax

CONDITION_LIMIT = 1e8


def soft_confusion(head: DenseNet, latents: np.ndarray, labels: np.ndarray,
                   n_classes: int) -> np.ndarray:
    """Soft confusion matrix C[i, j] = (1/n) sum_{y=j} softmax_i(head(z)).

    Column j sums to the empirical frequency of class j; the whole matrix sums
    to 1. A missing class triggers DegenerateConfusionWarning but the matrix
    is still returned (rank problems surface in the solver).
    """
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_classes:
        raise DatasetError(f"labels must lie in [0, {n_classes})")
    probs = softmax(dense_forward(head, latents).output)
    n = labels.shape[0]
    confusion = np.zeros((n_classes, n_classes))
    for j in range(n_classes):
        mask = labels == j
        if not mask.any():
            warnings.warn(
                f"class {j} absent from the confusion sample", DegenerateConfusionWarning
            )
            continue
        confusion[:, j] = probs[mask].sum(axis=0) / n
    return confusion


def prediction_marginal(head: DenseNet, latents: np.ndarray, soft: bool = True) -> np.ndarray:
    """Estimated label marginal of the classifier on a batch.

    soft averages the softmax outputs (the default, matching the soft
    confusion matrix); hard counts argmax votes.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] == 0:
        raise DatasetError("prediction marginal needs a nonempty batch")
    logits = dense_forward(head, latents).output
    if soft:
        return softmax(logits).mean(axis=0)
    k = logits.shape[1]
    votes = np.bincount(logits.argmax(axis=1), minlength=k)
    return votes / votes.sum()


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u + (1.0 - css) / np.arange(1, v.size + 1) > 0)[0][-1]
    theta = (1.0 - css[rho]) / (rho + 1.0)
    return np.maximum(v + theta, 0.0)


@dataclass
class ProportionEstimate:
    values: np.ndarray
    objective: float
    iterations: int
    ill_conditioned: bool


def solve_proportions(confusion: np.ndarray, target_marginal: np.ndarray,
                      source_proportions: np.ndarray, max_iter: int = 10000,
                      movement_tol: float = 1e-10) -> ProportionEstimate:
    """argmin_{p on simplex} 0.5 * ||target_marginal - confusion (p / p_S)||^2.

    Projected gradient with step 1/L, L the top eigenvalue of A^T A for
    A = confusion diag(1/p_S), estimated by power iteration. Iterates stay on
    the simplex and the objective never increases.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    target_marginal = np.asarray(target_marginal, dtype=np.float64)
    source_proportions = np.asarray(source_proportions, dtype=np.float64)
    k = confusion.shape[0]
    if confusion.shape != (k, k) or target_marginal.shape != (k,) \
            or source_proportions.shape != (k,):
        raise ShapeError("confusion, target marginal and source proportions must share K")
    if (source_proportions <= 0).any():
        raise InvalidProportionsError("source proportions must be strictly positive")

    ill = bool(np.linalg.cond(confusion) > CONDITION_LIMIT)
    if ill:
        warnings.warn(
            "confusion matrix is numerically rank-deficient", IllConditionedWarning
        )

    a = confusion / source_proportions[None, :]
    lipschitz = _top_eigenvalue(a.T @ a)
    step = 1.0 / max(lipschitz, 1e-12)

    p = np.full(k, 1.0 / k)
    best_p, best_obj = p, _objective(a, p, target_marginal)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad = a.T @ (a @ p - target_marginal)
        new_p = project_to_simplex(p - step * grad)
        obj = _objective(a, new_p, target_marginal)
        if obj < best_obj:
            best_p, best_obj = new_p, obj
        movement = np.abs(new_p - p).max()
        p = new_p
        if movement < movement_tol:
            break
    return ProportionEstimate(best_p, best_obj, iterations, ill)


def _objective(a: np.ndarray, p: np.ndarray, target: np.ndarray) -> float:
    r = a @ p - target
    return 0.5 * float(r @ r)


def _top_eigenvalue(mat: np.ndarray, iters: int = 200) -> float:
    v = np.full(mat.shape[0], 1.0 / mat.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ mat @ v)
    return lam


@dataclass
class CmaState:
    """Running mean of successive proportion estimates."""

    value: np.ndarray
    count: int = 0


def cma_update(state: CmaState, estimate: np.ndarray) -> CmaState:
    """Cumulative moving average: value <- (count * value + estimate) / (count + 1)."""
    estimate = np.asarray(estimate, dtype=np.float64)
    if estimate.shape != state.value.shape:
        raise ShapeError("estimate dimension does not match the running state")
    if (estimate < 0).any() or abs(estimate.sum() - 1.0) > 1e-9:
        raise InvalidProportionsError("estimate must lie on the simplex")
    if state.count == 0:
        return CmaState(estimate.copy(), 1)
    merged = (state.count * state.value + estimate) / (state.count + 1)
    return CmaState(merged, state.count + 1)
