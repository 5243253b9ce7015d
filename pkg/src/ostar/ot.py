"""Exact discrete optimal transport plus the adversarial alignment losses.

The primal solvers are oracles: uniform equal-size clouds go through the
Hungarian assignment, everything else through an exact LP (HiGHS simplex).
The dual side holds the weighted critic loss, the gradient penalty with its
exact second-order backward pass, and the residual-map transport cost in its
static and dynamic forms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from . import rng
from .errors import (
    InvalidBatchError,
    InvalidInputError,
    InvalidWeightError,
    OstarError,
    ShapeError,
)
from .nn import (
    DenseNet,
    GradientSet,
    ResidualMap,
    dense_backward,
    dense_forward,
    residual_backward,
    residual_forward,
    scalar_input_gradients,
)

_MARGINAL_TOL = 1e-8


@dataclass
class WeightedCloud:
    """A weighted empirical measure: points (n, d), weights on the simplex."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise InvalidInputError("a cloud needs at least one point with shape (n, d)")
        if self.weights.shape != (self.points.shape[0],):
            raise ShapeError("one weight per point is required")
        if (self.weights < 0).any():
            raise InvalidWeightError("cloud weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidInputError("cloud weights must sum to 1 within 1e-9")

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, atol=1e-12, rtol=0.0))


def uniform_cloud(points) -> WeightedCloud:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise InvalidInputError("a cloud needs at least one point with shape (n, d)")
    return WeightedCloud(points, np.full(points.shape[0], 1.0 / points.shape[0]))


@dataclass
class Coupling:
    """Transport plan whose marginals match the two cloud weights."""

    plan: np.ndarray
    row_weights: np.ndarray
    col_weights: np.ndarray

    def __post_init__(self):
        if self.plan.min(initial=0.0) < -_MARGINAL_TOL:
            raise InvalidInputError("coupling entries must be nonnegative")
        if np.abs(self.plan.sum(axis=1) - self.row_weights).max() > _MARGINAL_TOL:
            raise InvalidInputError("row marginals violated beyond 1e-8")
        if np.abs(self.plan.sum(axis=0) - self.col_weights).max() > _MARGINAL_TOL:
            raise InvalidInputError("column marginals violated beyond 1e-8")


def pairwise_cost(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    """Ground cost matrix ||x_i - y_j||_2^p."""
    diff = x[:, None, :] - y[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    return dist if p == 1 else dist**p


def exact_wasserstein(a: WeightedCloud, b: WeightedCloud, p: int = 2):
    """W_p between two weighted clouds, solved exactly.

    Returns (W_p, Coupling). Equal-size uniform clouds reduce to the optimal
    assignment; the general case solves the discrete Kantorovich LP.
    """
    if p not in (1, 2):
        raise InvalidInputError("p must be 1 or 2")
    if a.dim != b.dim:
        raise ShapeError(f"point dimensions differ: {a.dim} vs {b.dim}")
    cost = pairwise_cost(a.points, b.points, p)

    if a.size == b.size and a.is_uniform() and b.is_uniform():
        rows, cols = linear_sum_assignment(cost)
        total = float(cost[rows, cols].sum() / a.size)
        plan = np.zeros_like(cost)
        plan[rows, cols] = 1.0 / a.size
    else:
        total, plan = _kantorovich_lp(cost, a.weights, b.weights)
    return total ** (1.0 / p), Coupling(plan, a.weights, b.weights)


def _kantorovich_lp(cost: np.ndarray, a: np.ndarray, b: np.ndarray):
    n, m = cost.shape
    row_sums = sparse.kron(sparse.eye(n, format="csr"), np.ones((1, m)), format="csr")
    col_sums = sparse.kron(np.ones((1, n)), sparse.eye(m, format="csr"), format="csr")
    constraints = sparse.vstack([row_sums, col_sums]).tocsc()
    res = linprog(
        cost.ravel(),
        A_eq=constraints,
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if not res.success:
        raise OstarError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    return float(res.fun), plan


def optimal_assignment(cost: np.ndarray) -> np.ndarray:
    """Permutation sigma minimising sum_k cost[k, sigma(k)], exactly.

    Ties are broken toward the lexicographically smallest permutation by
    fixing rows in order and keeping the earliest column that still attains
    the optimal total.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidInputError("cost matrix must be square")
    if not np.isfinite(cost).all():
        raise InvalidInputError("cost matrix must be finite")
    k = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    sigma = np.empty(k, dtype=np.int64)
    free = list(range(k))
    fixed = 0.0
    for i in range(k):
        rest_rows = np.arange(i + 1, k)
        for j in sorted(free):
            others = [c for c in free if c != j]
            if rest_rows.size:
                sub = cost[np.ix_(rest_rows, others)]
                r, c = linear_sum_assignment(sub)
                tail = float(sub[r, c].sum())
            else:
                tail = 0.0
            if fixed + cost[i, j] + tail <= best + tol:
                sigma[i] = j
                fixed += cost[i, j]
                free.remove(j)
                break
        else:
            raise OstarError("assignment refinement failed to place a row")
    return sigma


def conditional_cost_matrix(source_conditionals, target_conditionals, p: int = 2) -> np.ndarray:
    """K x K matrix of exact W_p distances between class-conditional clouds."""
    k = len(source_conditionals)
    if k != len(target_conditionals):
        raise InvalidInputError("need the same number of source and target conditionals")
    out = np.zeros((k, k))
    for i, src in enumerate(source_conditionals):
        for j, tgt in enumerate(target_conditionals):
            out[i, j] = exact_wasserstein(src, tgt, p=p)[0]
    return out


@dataclass
class MonotonicityReport:
    holds: bool
    margin: float
    challenger: np.ndarray
    cost_matrix: np.ndarray


def check_cyclical_monotonicity(source_conditionals, target_conditionals) -> MonotonicityReport:
    """Does the identity pairing minimise the summed conditional W_2 costs?

    margin = (best non-identity total) - (identity total); negative margin
    means some permutation beats the identity and the check fails. The
    challenger is the most competitive non-identity permutation.
    """
    k = len(source_conditionals)
    if k < 2:
        raise InvalidInputError("need at least two classes")
    cost = conditional_cost_matrix(source_conditionals, target_conditionals, p=2)
    identity_total = float(np.trace(cost))

    if k <= 8:
        best_other, challenger = np.inf, None
        for perm in itertools.permutations(range(k)):
            if all(perm[i] == i for i in range(k)):
                continue
            total = float(cost[np.arange(k), perm].sum())
            if total < best_other:
                best_other, challenger = total, np.array(perm)
    else:
        best_other, challenger = np.inf, None
        big = cost.sum() + 1.0
        for forbidden in range(k):
            tweaked = cost.copy()
            tweaked[forbidden, forbidden] = big
            rows, cols = linear_sum_assignment(tweaked)
            total = float(tweaked[rows, cols].sum())
            if total < best_other:
                best_other, challenger = total, cols.astype(np.int64)

    margin = best_other - identity_total
    return MonotonicityReport(bool(margin >= 0.0), float(margin), challenger, cost)


@dataclass
class WdLoss:
    value: float
    critic_grads: GradientSet
    mapped_input_grads: np.ndarray


def critic_wd_loss(critic: DenseNet, mapped_source: np.ndarray, class_weights: np.ndarray,
                   target: np.ndarray) -> WdLoss:
    """Weighted dual Wasserstein-1 term.

    value = (1/n) sum_i w_i v(z_N_i) - (1/m) sum_j v(z_T_j), with gradients for
    the critic parameters and for the mapped source points (the transport
    map's chain rule enters through the latter).
    """
    mapped_source = np.asarray(mapped_source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    n, m = mapped_source.shape[0], target.shape[0]
    if class_weights.shape != (n,):
        raise ShapeError("one class weight per mapped source sample")
    if (class_weights < 0).any():
        raise InvalidWeightError("class weights must be nonnegative")

    acts_n = dense_forward(critic, mapped_source)
    acts_t = dense_forward(critic, target)
    value = float(
        (class_weights * acts_n.output[:, 0]).sum() / n - acts_t.output[:, 0].mean()
    )
    grads_n, d_mapped = dense_backward(critic, acts_n, (class_weights / n)[:, None])
    grads_t, _ = dense_backward(critic, acts_t, np.full((m, 1), -1.0 / m))
    return WdLoss(value, grads_n.add_(grads_t), d_mapped)


def gradient_penalty(critic: DenseNet, mapped_source: np.ndarray, target: np.ndarray, seed):
    """Two-sided gradient penalty at random interpolates, with exact critic grads.

    Both batches are shuffled with the operation's seed, truncated to the
    common length and paired by index; one interpolation point is drawn per
    pair. penalty = mean_i (||grad_z v(z_i)|| - 1)^2. The parameter gradient
    is the exact second-order backward pass through the input-gradient chain
    (relu curvature vanishes almost everywhere, so bias gradients are zero).
    """
    mapped_source = np.asarray(mapped_source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mapped_source.shape[0] == 0 or target.shape[0] == 0:
        raise InvalidBatchError("gradient penalty needs nonempty batches")
    gen = rng.stream(seed, "gradient-penalty")
    n = min(mapped_source.shape[0], target.shape[0])
    za = mapped_source[gen.permutation(mapped_source.shape[0])[:n]]
    zb = target[gen.permutation(target.shape[0])[:n]]
    t = gen.random((n, 1))
    z_hat = t * za + (1.0 - t) * zb

    acts = dense_forward(critic, z_hat)
    input_grad, gammas = scalar_input_gradients(critic, acts)
    norms = np.sqrt((input_grad * input_grad).sum(axis=1))
    penalty = float(np.mean((norms - 1.0) ** 2))

    safe = np.maximum(norms, 1e-12)
    h = (2.0 / n) * ((norms - 1.0) / safe)[:, None] * input_grad

    grads = GradientSet.zeros_like(critic)
    q = h @ critic.weights[0]
    grads.weights[0] += h.T @ gammas[0]
    for l in range(1, critic.n_layers):
        if critic.activations[l - 1] == "relu":
            q = q * (acts.pre[l - 1] > 0)
        grads.weights[l] += q.T @ gammas[l]
        q = q @ critic.weights[l]
    return penalty, grads


def transport_cost(rmap: ResidualMap, class_groups, mode: str = "dynamic"):
    """Class-averaged transport cost of the residual map and its gradients.

    static: sum_k (1/n_k) sum_{i in k} ||phi(z_i) - z_i||^2.
    dynamic: same class averaging, but the per-sample cost is the sum of
    squared block residuals along the trajectory, which upper-bounds the
    static displacement for the same map.
    Class groups with no samples are skipped; all-empty raises.
    """
    if mode not in ("static", "dynamic"):
        raise InvalidInputError(f"unknown transport-cost mode {mode!r}")
    kept = [np.asarray(g, dtype=np.float64) for g in class_groups
            if np.asarray(g).shape[0] > 0]
    if not kept:
        raise InvalidBatchError("every class group is empty")
    coeff = np.concatenate([np.full(g.shape[0], 1.0 / g.shape[0]) for g in kept])
    z = np.vstack(kept)

    acts = residual_forward(rmap, z)
    if mode == "static":
        disp = acts.output - z
        value = float((coeff * (disp * disp).sum(axis=1)).sum())
        block_grads, _ = residual_backward(rmap, acts, 2.0 * coeff[:, None] * disp)
    else:
        value = float(
            sum((coeff * (r * r).sum(axis=1)).sum() for r in acts.residuals)
        )
        direct = [2.0 * coeff[:, None] * r for r in acts.residuals]
        block_grads, _ = residual_backward(rmap, acts, np.zeros_like(z), direct)
    return value, block_grads


def mean_squared_displacement(rmap: ResidualMap, latents: np.ndarray) -> float:
    """Mean per-sample squared displacement ||phi(z) - z||^2."""
    latents = np.asarray(latents, dtype=np.float64)
    out = residual_forward(rmap, latents).output
    return float(((out - latents) ** 2).sum(axis=1).mean())
