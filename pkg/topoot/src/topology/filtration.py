"""
Threshold schedules and cubical complexes of score grids.

The complex is the V-construction: pixels are vertices, 4-neighbors are joined
by edges and every 2x2 block of pixels spans a unit square. Cells take the
lower-star value (max over their vertices). The superlevel filtration of A is
realized as the sublevel filtration of -A, so one persistence engine serves both.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Tuple
import logging

import numpy as np

from ..exceptions import DegenerateScheduleError, ValidationError
from ..grid_io import ScoreGrid

logger = logging.getLogger('filtration')

SCHEDULE_MODES = ("uniform", "quantile")


class FiltrationTag(str, Enum):
    SUBLEVEL = "sublevel"
    SUPERLEVEL = "superlevel"

    @property
    def sign(self) -> float:
        return 1.0 if self is FiltrationTag.SUBLEVEL else -1.0

    @property
    def short(self) -> str:
        return "sub" if self is FiltrationTag.SUBLEVEL else "sup"

    @classmethod
    def parse(cls, text: str) -> "FiltrationTag":
        text = text.strip().lower()
        for tag in cls:
            if text in (tag.value, tag.short):
                return tag
        raise ValidationError(f"Unknown filtration tag '{text}'")


@dataclass(frozen=True)
class ThresholdSchedule:
    """Strictly increasing thresholds tau_1 < ... < tau_N on the score axis."""
    taus: Tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if len(taus) < 2:
            raise DegenerateScheduleError(f"A schedule needs at least 2 thresholds, got {len(taus)}")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValidationError(f"Thresholds must be strictly increasing: {taus}")
        object.__setattr__(self, "taus", taus)

    def __len__(self) -> int:
        return len(self.taus)

    def __iter__(self) -> Iterator[float]:
        return iter(self.taus)

    def levels(self, tag: FiltrationTag) -> List[float]:
        """Thresholds on the filtration axis of `tag`, in filtration order.

        Superlevel sets {A >= tau} are sublevel sets of -A at -tau, visited
        from the highest tau down.
        """
        if tag is FiltrationTag.SUBLEVEL:
            return list(self.taus)
        return [-t for t in reversed(self.taus)]


def make_schedule(grid: ScoreGrid, n: int, mode: str = "uniform") -> ThresholdSchedule:
    """Place n thresholds on the score range of a grid.

    Args:
        grid: Score grid
        n: Number of thresholds (>= 2)
        mode: "uniform" for n equispaced values strictly inside (min, max),
              "quantile" for the empirical quantiles k/(n+1), duplicates collapsed

    Returns:
        ThresholdSchedule
    """
    if n < 2:
        raise ValidationError(f"Number of thresholds must be >= 2, got {n}")
    values = grid.values
    lo, hi = float(values.min()), float(values.max())

    if mode == "uniform":
        if not hi > lo:
            raise DegenerateScheduleError("Constant grid admits no interior thresholds")
        taus = [lo + k * (hi - lo) / (n + 1) for k in range(1, n + 1)]
    elif mode == "quantile":
        probs = np.arange(1, n + 1) / (n + 1)
        taus = np.unique(np.quantile(values.ravel(), probs)).tolist()
        if len(taus) < 2:
            raise DegenerateScheduleError(f"Only {len(taus)} distinct quantile(s) in grid")
        if len(taus) < n:
            logger.info(f"Quantile schedule collapsed from {n} to {len(taus)} thresholds")
    else:
        raise ValidationError(f"Unknown threshold mode '{mode}', expected one of {SCHEDULE_MODES}")
    return ThresholdSchedule(tuple(taus))


@dataclass(frozen=True)
class CubicalComplex:
    """Lower-star cubical complex on the full pixel lattice.

    Attributes:
        tag: Filtration the values belong to
        vertices: (H, W) vertex values (A or -A)
        h_edges: (H, W-1) values of edges (r, c)-(r, c+1)
        v_edges: (H-1, W) values of edges (r, c)-(r+1, c)
        squares: (H-1, W-1) values of squares anchored at their top-left vertex
    """
    tag: FiltrationTag
    vertices: np.ndarray
    h_edges: np.ndarray
    v_edges: np.ndarray
    squares: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.vertices.shape

    @property
    def max_value(self) -> float:
        return float(self.vertices.max())

    def cell_counts(self) -> Tuple[int, int, int]:
        return self.vertices.size, self.h_edges.size + self.v_edges.size, self.squares.size

    def counts_at(self, level: float) -> Tuple[int, int, int]:
        """(V, E, F) of the subcomplex of cells with value <= level."""
        edges = int((self.h_edges <= level).sum() + (self.v_edges <= level).sum())
        return int((self.vertices <= level).sum()), edges, int((self.squares <= level).sum())

    def euler_characteristic(self, level: float) -> int:
        v, e, f = self.counts_at(level)
        return v - e + f


def build_complex(grid: ScoreGrid, tag: FiltrationTag) -> CubicalComplex:
    """Build the sub- or superlevel cubical complex of a grid."""
    vertices = tag.sign * grid.values
    h_edges = np.maximum(vertices[:, :-1], vertices[:, 1:])
    v_edges = np.maximum(vertices[:-1, :], vertices[1:, :])
    squares = np.maximum(h_edges[:-1, :], h_edges[1:, :])
    for array in (vertices, h_edges, v_edges, squares):
        array.flags.writeable = False
    return CubicalComplex(tag, vertices, h_edges, v_edges, squares)
