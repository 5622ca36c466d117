"""
OT chaining of per-threshold persistence diagrams.

Features are tracked across consecutive thresholds of one filtration by
coupling neighbouring diagrams with Sinkhorn and extending chains along the
strongest non-diagonal couplings. Surviving chains of the sub- and superlevel
filtrations are then scored against each other, the best candidates are kept
and backprojected into a pseudo-label mask.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import ndimage

from . import config
from .exceptions import ValidationError
from .grid_io import BinaryMask, ScoreGrid
from .topology.filtration import FiltrationTag, ThresholdSchedule, build_complex
from .topology.persistence import PersistenceDiagram, PersistencePoint, compute_diagrams, diagrams_at
from .transport import TransportPlan, augment, sinkhorn

logger = logging.getLogger('chaining')

AGGREGATES = ("sum", "mean")
DIMENSIONS = (0, 1)
FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class ChainConfig:
    """Chaining, selection and backprojection settings."""
    alpha: float = config.DEFAULT_ALPHA
    top_m: int = config.DEFAULT_TOP_M
    top_k: int = config.DEFAULT_TOP_K
    delta_sub: float = config.DEFAULT_DELTA_SUB
    delta_sup: float = config.DEFAULT_DELTA_SUP
    aggregate: str = config.DEFAULT_AGGREGATE
    max_points: Optional[int] = config.DEFAULT_MAX_POINTS
    restrict_component: bool = False
    epsilon: float = config.DEFAULT_EPSILON
    max_iter: int = config.DEFAULT_MAX_ITER
    tol: float = config.DEFAULT_TOL

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.top_m < 1 or self.top_k < 1:
            raise ValidationError(f"top_m and top_k must be positive, got {self.top_m} and {self.top_k}")
        if self.top_k > self.top_m:
            raise ValidationError(f"top_k ({self.top_k}) cannot exceed top_m ({self.top_m})")
        for name in ("delta_sub", "delta_sup"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.aggregate not in AGGREGATES:
            raise ValidationError(f"aggregate must be one of {AGGREGATES}, got '{self.aggregate}'")
        if self.max_points is not None and self.max_points < 1:
            raise ValidationError(f"max_points must be positive, got {self.max_points}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")

    def delta(self, tag: FiltrationTag) -> float:
        return self.delta_sub if tag is FiltrationTag.SUBLEVEL else self.delta_sup


@dataclass
class FeatureChain:
    """A feature followed through consecutive per-threshold diagrams.

    Attributes:
        tag: Filtration of the chain
        dim: Homology dimension
        start: Index of the threshold where the chain first appears
        members: Point index into each diagram from `start` on
        points: The member points themselves
        link_scores: Pair score earned at every consecutive coupling
        score: Cumulative score (sum or mean of link_scores)
        essential: The chain follows a class that never dies in the full
            filtration
    """
    tag: FiltrationTag
    dim: int
    start: int
    members: List[int] = field(default_factory=list)
    points: List[PersistencePoint] = field(default_factory=list)
    link_scores: List[float] = field(default_factory=list)
    score: float = 0.0
    essential: bool = False

    @property
    def representative(self) -> PersistencePoint:
        return self.points[-1]

    @property
    def pers(self) -> float:
        return self.representative.pers

    @property
    def birth_cell(self) -> Tuple[int, int]:
        return self.representative.birth_cell

    @property
    def length(self) -> int:
        return len(self.members)

    @property
    def is_background(self) -> bool:
        """The sublevel H0 class of the global minimum, present at every threshold."""
        return self.essential and self.tag is FiltrationTag.SUBLEVEL and self.dim == 0

    def extend(self, index: int, point: PersistencePoint) -> None:
        self.members.append(index)
        self.points.append(point)


@dataclass(frozen=True)
class ScoredCandidate:
    """A chain retained by cross-level selection."""
    chain: FeatureChain
    score: float

    @property
    def tag(self) -> FiltrationTag:
        return self.chain.tag

    @property
    def point(self) -> PersistencePoint:
        return self.chain.representative

    def to_dict(self, cfg: ChainConfig) -> Dict:
        point = self.point
        return {
            "tag": self.tag.value,
            "dim": self.chain.dim,
            "birth": point.birth,
            "death": point.death,
            "unit_birth": unit_axis(point)[0],
            "unit_death": unit_axis(point)[1],
            "birth_cell": list(point.birth_cell),
            "chain_length": self.chain.length,
            "chain_score": self.chain.score,
            "essential": self.chain.essential,
            "score": self.score,
            "tau_bp": backprojection_level(self, cfg),
        }


def unit_axis(point: PersistencePoint) -> Tuple[float, float]:
    """Coordinates on a common [0, 1] axis.

    Sublevel points are returned as is; superlevel points (on the -A axis)
    are shifted by +1, which is their position in the sublevel view of 1 - A.
    """
    if point.tag is FiltrationTag.SUBLEVEL:
        return point.birth, point.death
    return 1.0 + point.birth, 1.0 + point.death


def original_level(point: PersistencePoint) -> float:
    """Death level of a point read on the score axis of A."""
    if point.tag is FiltrationTag.SUBLEVEL:
        return point.death
    return 1.0 - abs(point.death)


def pair_score(plan: TransportPlan, idx: int, pers: float, alpha: float) -> float:
    """Stability score of row `idx`: max_j plan_ij / (1 + sqrt(cost_ij)) * alpha * pers.

    The max runs over every column, diagonal slots included.
    """
    if idx >= plan.source.n_real or plan.source.diagonal[idx]:
        raise ValidationError(f"Row {idx} is not a real point of the plan")
    ratio = plan.plan[idx] / (1.0 + np.sqrt(plan.cost[idx]))
    return float(np.max(ratio) * alpha * pers)


def select_points(diagram: PersistenceDiagram, max_points: Optional[int] = None) -> List[PersistencePoint]:
    """The `max_points` most persistent points, in diagram order (all of them for None)."""
    if max_points is None or len(diagram) <= max_points:
        return list(diagram.points)
    ranked = sorted(diagram.points, key=lambda p: (-p.pers, p.birth, p.birth_cell))[:max_points]
    return sorted(ranked, key=lambda p: (p.birth, p.death, p.birth_cell))


def _as_array(points: Sequence[PersistencePoint]) -> np.ndarray:
    return np.array([[p.birth, p.death] for p in points], dtype=np.float64).reshape(-1, 2)


def _greedy_links(plan: TransportPlan, m: int, n: int) -> Dict[int, int]:
    """One-to-one row -> column links by descending real-to-real mass.

    A row is only eligible for columns holding at least as much mass as its
    best diagonal slot.
    """
    if m == 0 or n == 0:
        return {}
    real = plan.plan[:m, :n]
    best_diagonal = plan.plan[:m, n:].max(axis=1)
    rows, cols = np.nonzero(real >= best_diagonal[:, None])
    order = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (-real[rc], rc[0], rc[1]))
    links: Dict[int, int] = {}
    taken = set()
    for i, j in order:
        if i in links or j in taken:
            continue
        links[i] = j
        taken.add(j)
    return links


def _aggregate(scores: List[float], how: str) -> float:
    if not scores:
        return 0.0
    return float(sum(scores)) if how == "sum" else float(sum(scores) / len(scores))


def _rank_key(chain: FeatureChain):
    return (-chain.score, -chain.pers, chain.birth_cell)


def chain_filtration(diagrams: Sequence[PersistenceDiagram], cfg: ChainConfig) -> List[FeatureChain]:
    """Chain the per-threshold diagrams of one filtration and dimension.

    Every member a chain has before the last diagram earns the pair score of
    its coupling to the next diagram. That includes the member where the
    chain ends because its mass went to the diagonal or to a point claimed
    by another chain.
    A chain found only in the last diagram has no link and scores 0.

    Args:
        diagrams: Per-threshold diagrams in filtration order, one tag and dim
        cfg: Chain configuration (alpha, top_m, aggregate, Sinkhorn settings)

    Returns:
        Chains ranked by cumulative score, then persistence, then birth cell,
        truncated to cfg.top_m
    """
    cfg.validate()
    if not diagrams:
        return []
    if len({(d.tag, d.dim) for d in diagrams}) != 1:
        raise ValidationError("chain_filtration needs diagrams of a single tag and dimension")
    tag, dim = diagrams[0].tag, diagrams[0].dim
    points = [select_points(d, cfg.max_points) for d in diagrams]

    if sum(1 for p in points if p) < 2:
        chains = []
        for k, level_points in enumerate(points):
            for i, point in enumerate(level_points):
                chain = FeatureChain(tag, dim, k, [i], [point])
                chain.score = cfg.alpha * point.pers
                chains.append(chain)
        logger.debug(f"{tag.short} H{dim}: fewer than 2 nonempty diagrams, {len(chains)} single-point chains")
        return sorted(chains, key=_rank_key)[:cfg.top_m]

    plans = []
    for current, following in zip(points, points[1:]):
        a, b = augment(_as_array(current), _as_array(following))
        plans.append(sinkhorn(a, b, cfg.epsilon, cfg.max_iter, cfg.tol))

    chains: List[FeatureChain] = []
    active: Dict[int, FeatureChain] = {}
    for i, point in enumerate(points[0]):
        active[i] = FeatureChain(tag, dim, 0, [i], [point])
        chains.append(active[i])

    for k, plan in enumerate(plans):
        current, following = points[k], points[k + 1]
        for i, chain in active.items():
            chain.link_scores.append(pair_score(plan, i, current[i].pers, cfg.alpha))
        links = _greedy_links(plan, len(current), len(following))

        extended: Dict[int, FeatureChain] = {}
        for i, j in links.items():
            active[i].extend(j, following[j])
            extended[j] = active[i]
        for j, point in enumerate(following):
            if j not in extended:
                extended[j] = FeatureChain(tag, dim, k + 1, [j], [point])
                chains.append(extended[j])
        active = extended

    for chain in chains:
        chain.score = _aggregate(chain.link_scores, cfg.aggregate)
    ranked = sorted(chains, key=_rank_key)
    logger.debug(f"{tag.short} H{dim}: {len(chains)} chains over {len(diagrams)} thresholds")
    return ranked[:cfg.top_m]


def chain_all(grid: ScoreGrid, schedule: ThresholdSchedule, cfg: ChainConfig,
              tags: Sequence[FiltrationTag] = tuple(FiltrationTag)) -> Dict[FiltrationTag, List[FeatureChain]]:
    """Chains of H0 and H1 for the given filtrations of a grid, keyed by tag.

    Chains whose representative is born at the birth cell of an essential
    class of the full diagram are flagged `essential`.
    """
    sides: Dict[FiltrationTag, List[FeatureChain]] = {}
    for tag in tags:
        full = compute_diagrams(build_complex(grid, tag))
        levels = schedule.levels(tag)
        sides[tag] = []
        for dim in DIMENSIONS:
            chains = chain_filtration(diagrams_at(full[dim], levels), cfg)
            essential_cells = {p.birth_cell for p in full[dim].points if p.is_essential}
            for chain in chains:
                chain.essential = chain.birth_cell in essential_cells
            sides[tag].extend(chains)
    return sides


def cross_level_select(sub_chains: Sequence[FeatureChain], sup_chains: Sequence[FeatureChain],
                       cfg: ChainConfig) -> List[ScoredCandidate]:
    """Score each chain against the opposite filtration and keep the top_k.

    Chain representatives of both sides are compared on the common unit axis
    with one Sinkhorn solve; superlevel chains are scored on the transposed
    plan. Ties are broken by persistence, then birth cell, then tag and dim.
    The sublevel background class (see FeatureChain.is_background) is left
    out; it always ties with the superlevel class of the global maximum.
    """
    cfg.validate()
    sub_chains = [c for c in sub_chains if not c.is_background]
    if not sub_chains and not sup_chains:
        return []
    p = np.array([unit_axis(c.representative) for c in sub_chains], dtype=np.float64).reshape(-1, 2)
    q = np.array([unit_axis(c.representative) for c in sup_chains], dtype=np.float64).reshape(-1, 2)
    a, b = augment(p, q)
    plan = sinkhorn(a, b, cfg.epsilon, cfg.max_iter, cfg.tol)

    candidates = [ScoredCandidate(c, pair_score(plan, i, c.pers, cfg.alpha)) for i, c in enumerate(sub_chains)]
    reverse = plan.transposed()
    candidates += [ScoredCandidate(c, pair_score(reverse, j, c.pers, cfg.alpha)) for j, c in enumerate(sup_chains)]

    return _top_candidates(candidates, cfg.top_k)


def intra_level_select(chains: Sequence[FeatureChain], cfg: ChainConfig) -> List[ScoredCandidate]:
    """Top_k chains by their own cumulative score, without a cross-level solve.

    Used when only one filtration is run or cross-level selection is off.
    The sublevel background class is left out as in cross_level_select.
    """
    cfg.validate()
    return _top_candidates([ScoredCandidate(c, c.score) for c in chains if not c.is_background], cfg.top_k)


def _top_candidates(candidates: List[ScoredCandidate], top_k: int) -> List[ScoredCandidate]:
    tag_order = {tag: n for n, tag in enumerate(FiltrationTag)}
    ranked = sorted(candidates,
                    key=lambda s: (-s.score, -s.chain.pers, s.chain.birth_cell, tag_order[s.tag], s.chain.dim))
    return ranked[:top_k]


def backprojection_level(candidate: ScoredCandidate, cfg: ChainConfig) -> float:
    """tau_bp = max(0, d - delta) with d read on the score axis of A."""
    return max(0.0, original_level(candidate.point) - cfg.delta(candidate.tag))


def backproject(candidates: Sequence[ScoredCandidate], grid: ScoreGrid, cfg: ChainConfig) -> BinaryMask:
    """Union over candidates of the superlevel sets {A >= tau_bp}.

    With cfg.restrict_component each set is cut down to the 4-connected
    component holding the candidate's birth cell (or death cell when the
    birth cell lies outside); candidates with neither inside add nothing.
    """
    mask = np.zeros(grid.shape, dtype=bool)
    for candidate in candidates:
        support = grid.values >= backprojection_level(candidate, cfg)
        if cfg.restrict_component:
            support = _component_at(support, candidate.point)
        mask |= support
    return BinaryMask(mask)


def _component_at(support: np.ndarray, point: PersistencePoint) -> np.ndarray:
    labels, _ = ndimage.label(support, structure=FOUR_CONNECTIVITY)
    for cell in (point.birth_cell, point.death_cell):
        if cell is not None and support[cell]:
            return labels == labels[cell]
    return np.zeros_like(support)
