"""
Entropic optimal transport between persistence diagrams.

Diagrams are turned into balanced measures by diagonal augmentation: each side
gets its own points plus one diagonal slot per point of the other side, all
with mass 1/(|P|+|Q|). The Sinkhorn solver runs in the log domain; an exact
assignment/LP solver serves as an oracle on small instances.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from . import config
from .exceptions import NumericError, SizeError, ValidationError

logger = logging.getLogger('transport')

MAX_EXACT_SUPPORT = 12
WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class DiagramMeasure:
    """Discrete measure on (birth, death) points.

    Attributes:
        support: (k, 2) coordinates; diagonal slots hold the projection
            ((b+d)/2, (b+d)/2) of the opposite point they stand for
        weights: (k,) probability vector
        diagonal: (k,) True where the slot is a diagonal projection
    """
    support: np.ndarray
    weights: np.ndarray
    diagonal: np.ndarray

    def __post_init__(self):
        support = np.array(self.support, dtype=np.float64).reshape(-1, 2)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        diagonal = np.array(self.diagonal, dtype=bool).reshape(-1)
        if not len(support) == len(weights) == len(diagonal):
            raise ValidationError("Measure support, weights and diagonal flags differ in length")
        if not np.all(np.isfinite(support)):
            raise ValidationError("Measure support must be finite (clamp infinite deaths first)")
        if np.any(weights < 0):
            raise ValidationError("Measure weights must be non-negative")
        if len(weights) and abs(weights.sum() - 1.0) > WEIGHT_TOL * max(len(weights), 1) * 10:
            raise ValidationError(f"Measure weights sum to {weights.sum()}, expected 1")
        for array in (support, weights, diagonal):
            array.flags.writeable = False
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "diagonal", diagonal)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def n_real(self) -> int:
        return int((~self.diagonal).sum())

    @property
    def persistence(self) -> np.ndarray:
        """Death minus birth of every slot (0 on diagonal slots)."""
        return np.where(self.diagonal, 0.0, self.support[:, 1] - self.support[:, 0])

    @classmethod
    def from_points(cls, points: np.ndarray, weights: Optional[Sequence[float]] = None) -> "DiagramMeasure":
        """Plain measure on real points, uniform unless weights are given."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if weights is None:
            weights = np.full(len(points), 1.0 / len(points)) if len(points) else np.empty(0)
        return cls(points, weights, np.zeros(len(points), dtype=bool))


def _diagonal_projection(points: np.ndarray) -> np.ndarray:
    mid = points.mean(axis=1)
    return np.stack([mid, mid], axis=1)


def augment(p: np.ndarray, q: np.ndarray) -> Tuple[DiagramMeasure, DiagramMeasure]:
    """Balanced measures for diagrams P (m points) and Q (n points).

    Side a is P followed by the n projections of Q; side b is Q followed by
    the m projections of P. Every slot carries mass 1/(m+n).
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 2)
    m, n = len(p), len(q)
    size = m + n
    weights = np.full(size, 1.0 / size) if size else np.empty(0)
    a = DiagramMeasure(
        np.concatenate([p, _diagonal_projection(q)]), weights,
        np.concatenate([np.zeros(m, dtype=bool), np.ones(n, dtype=bool)]),
    )
    b = DiagramMeasure(
        np.concatenate([q, _diagonal_projection(p)]), weights,
        np.concatenate([np.zeros(n, dtype=bool), np.ones(m, dtype=bool)]),
    )
    return a, b


def ground_cost(a: DiagramMeasure, b: DiagramMeasure) -> np.ndarray:
    """Squared Euclidean ground cost with diagonal slots.

    Every entry involving a real point is (b_i - b_j)^2 + (d_i - d_j)^2 with
    diagonal slots at their projection point, so a point against its own
    projection pays pers^2 / 2 and against any other slot pays more.
    Diagonal-to-diagonal is free.
    """
    diff = a.support[:, None, :] - b.support[None, :, :]
    cost = np.sum(diff ** 2, axis=2)
    cost[np.ix_(a.diagonal, b.diagonal)] = 0.0
    return cost


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two measures together with its ground cost.

    Attributes:
        plan: (m, n) non-negative coupling
        cost: (m, n) ground-cost matrix
        epsilon: Entropic regularization (0 for exact plans)
        iterations: Sinkhorn iterations used
        converged: Whether the marginal tolerance was reached
        marginal_error: L1 violation of row plus column marginals
        source: Row measure
        target: Column measure
    """
    plan: np.ndarray
    cost: np.ndarray
    epsilon: float
    iterations: int
    converged: bool
    marginal_error: float
    source: DiagramMeasure
    target: DiagramMeasure

    @property
    def shape(self) -> Tuple[int, int]:
        return self.plan.shape

    @property
    def transport_cost(self) -> float:
        return float(np.sum(self.plan * self.cost))

    @property
    def entropy(self) -> float:
        """H(plan) = sum plan * (log plan - 1), with 0 log 0 = 0."""
        positive = self.plan[self.plan > 0]
        return float(np.sum(positive * (np.log(positive) - 1.0)))

    @property
    def entropic_cost(self) -> float:
        return self.transport_cost + self.epsilon * self.entropy

    def transposed(self) -> "TransportPlan":
        return TransportPlan(self.plan.T, self.cost.T, self.epsilon, self.iterations,
                             self.converged, self.marginal_error, self.target, self.source)


def _marginal_error(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(plan.sum(axis=1) - a).sum() + np.abs(plan.sum(axis=0) - b).sum())


def sinkhorn(a: DiagramMeasure, b: DiagramMeasure,
             epsilon: float = config.DEFAULT_EPSILON,
             max_iter: int = config.DEFAULT_MAX_ITER,
             tol: float = config.DEFAULT_TOL) -> TransportPlan:
    """Entropic OT plan by log-domain Sinkhorn iterations.

    Args:
        a: Row measure
        b: Column measure
        epsilon: Regularization strength (> 0)
        max_iter: Iteration cap
        tol: Stop once the L1 violation of row plus column marginals drops below tol

    Returns:
        TransportPlan; `converged` is False when max_iter was hit first

    Raises:
        NumericError: if the cost or the resulting plan is not finite
    """
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter}")

    cost = ground_cost(a, b)
    if len(a) == 0 or len(b) == 0:
        empty = np.zeros((len(a), len(b)))
        return TransportPlan(empty, cost, epsilon, 0, True, 0.0, a, b)
    if not np.all(np.isfinite(cost)):
        raise NumericError("Ground cost contains non-finite entries")

    with np.errstate(divide="ignore"):
        log_a = np.log(a.weights)
        log_b = np.log(b.weights)
    scaled = -cost / epsilon
    f = np.zeros(len(a))
    g = np.zeros(len(b))

    converged = False
    iterations = 0
    error = math.inf
    for iterations in range(1, max_iter + 1):
        g = epsilon * (log_b - logsumexp(scaled + f[:, None] / epsilon, axis=0))
        log_plan = scaled + (f[:, None] + g[None, :]) / epsilon
        error = _marginal_error(np.exp(log_plan), a.weights, b.weights)
        if error < tol:
            converged = True
            break
        f = epsilon * (log_a - logsumexp(scaled + g[None, :] / epsilon, axis=1))

    plan = np.exp(scaled + (f[:, None] + g[None, :]) / epsilon)
    if not np.all(np.isfinite(plan)):
        raise NumericError(f"Sinkhorn plan became non-finite (epsilon={epsilon})")
    if not converged:
        logger.warning(f"Sinkhorn did not converge in {max_iter} iterations (marginal error {error:.3e})")
    error = _marginal_error(plan, a.weights, b.weights)
    return TransportPlan(plan, cost, epsilon, iterations, converged, error, a, b)


def exact_ot(a: DiagramMeasure, b: DiagramMeasure) -> Tuple[float, np.ndarray]:
    """Exact optimal transport on small instances.

    Equal-size uniform measures are solved as an assignment problem; any
    other weights go through the transport linear program.

    Returns:
        (optimal cost, optimal plan)

    Raises:
        SizeError: if either side has more than MAX_EXACT_SUPPORT slots
    """
    m, n = len(a), len(b)
    if max(m, n) > MAX_EXACT_SUPPORT:
        raise SizeError(f"exact_ot supports at most {MAX_EXACT_SUPPORT} slots per side, got {m}x{n}")
    cost = ground_cost(a, b)
    if m == 0 or n == 0:
        return 0.0, np.zeros((m, n))

    uniform = m == n and np.allclose(a.weights, 1.0 / m) and np.allclose(b.weights, 1.0 / n)
    if uniform:
        rows, cols = linear_sum_assignment(cost)
        plan = np.zeros((m, n))
        plan[rows, cols] = 1.0 / m
        return float(np.sum(plan * cost)), plan

    # row marginals then column marginals over the row-major flattened plan
    a_eq = np.vstack([np.kron(np.eye(m), np.ones(n)), np.kron(np.ones(m), np.eye(n))])
    b_eq = np.concatenate([a.weights, b.weights])
    result = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not result.success:
        raise NumericError(f"Transport LP failed: {result.message}")
    plan = result.x.reshape(m, n)
    return float(result.fun), plan
