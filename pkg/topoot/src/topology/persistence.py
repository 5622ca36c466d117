"""
Persistence diagrams of cubical filtrations.

H0 is computed by a union-find sweep over the vertices (elder rule), H1 by
reducing the square boundary columns over Z/2. Per-threshold diagrams are the
full diagram observed up to a threshold, and the bottleneck distance is
provided for stability checks.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union
import csv
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..exceptions import FormatError, ValidationError
from .filtration import CubicalComplex, FiltrationTag
from .union_find import UnionFind

Cell = Tuple[int, int]

CSV_COLUMNS = ["dim", "tag", "birth", "death", "birth_row", "birth_col"]


@dataclass(frozen=True)
class PersistencePoint:
    """A (birth, death) feature; death is math.inf for essential classes."""
    birth: float
    death: float
    dim: int
    tag: FiltrationTag
    birth_cell: Cell
    death_cell: Optional[Cell] = None

    @property
    def pers(self) -> float:
        return self.death - self.birth

    @property
    def is_essential(self) -> bool:
        return math.isinf(self.death)


@dataclass(frozen=True)
class PersistenceDiagram:
    """Multiset of persistence points sharing one filtration tag and dimension.

    Attributes:
        points: Points sorted by (birth, death, birth_cell)
        tag: Filtration tag
        dim: Homology dimension (0 or 1)
        max_value: Largest filtration value of the complex, used to clamp
            infinite deaths to max_value + 1
    """
    points: Tuple[PersistencePoint, ...]
    tag: FiltrationTag
    dim: int
    max_value: float

    def __post_init__(self):
        for p in self.points:
            if p.tag is not self.tag or p.dim != self.dim:
                raise ValidationError("All points of a diagram must share its tag and dimension")
            if p.death < p.birth:
                raise ValidationError(f"Point dies before it is born: ({p.birth}, {p.death})")

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[PersistencePoint]:
        return iter(self.points)

    def __getitem__(self, index: int) -> PersistencePoint:
        return self.points[index]

    @property
    def clamp_value(self) -> float:
        return self.max_value + 1.0

    def as_array(self) -> np.ndarray:
        """(k, 2) array of (birth, death) with infinite deaths clamped."""
        if not self.points:
            return np.empty((0, 2))
        return np.array([[p.birth, min(p.death, self.clamp_value)] for p in self.points])

    def betti(self, level: float) -> int:
        """Number of classes alive at `level` (b <= level < d)."""
        return sum(1 for p in self.points if p.birth <= level < p.death)

    def with_points(self, points: Iterable[PersistencePoint]) -> "PersistenceDiagram":
        return PersistenceDiagram(_sorted(points), self.tag, self.dim, self.max_value)


def _sorted(points: Iterable[PersistencePoint]) -> Tuple[PersistencePoint, ...]:
    return tuple(sorted(points, key=lambda p: (p.birth, p.death, p.birth_cell)))


def _neighbors(row: int, col: int, height: int, width: int) -> Iterator[Cell]:
    if row > 0:
        yield row - 1, col
    if col > 0:
        yield row, col - 1
    if col + 1 < width:
        yield row, col + 1
    if row + 1 < height:
        yield row + 1, col


def compute_h0(complex: CubicalComplex) -> PersistenceDiagram:
    """H0 diagram by a union-find sweep in increasing (value, row, col) order.

    A vertex with no earlier neighbor creates a class. When a vertex joins
    several components, the oldest survives and every younger one dies at the
    vertex value. The last surviving class is essential.
    """
    height, width = complex.shape
    flat = complex.vertices.ravel()
    order = np.argsort(flat, kind="stable")  # ties resolve row-major
    entered = np.zeros(flat.size, dtype=bool)
    uf = UnionFind(flat.size)
    points: List[PersistencePoint] = []

    for position, k in enumerate(order.tolist()):
        row, col = divmod(k, width)
        value = float(flat[k])
        uf.make_set(k, position)
        roots = {uf.find(r * width + c) for r, c in _neighbors(row, col, height, width) if entered[r * width + c]}
        entered[k] = True
        if not roots:
            continue

        by_age = sorted(roots, key=lambda root: uf.birth_order[root])
        uf.union(by_age[0], k)
        for younger in by_age[1:]:
            creator = int(order[uf.birth_order[younger]])
            points.append(PersistencePoint(
                birth=float(flat[creator]), death=value, dim=0, tag=complex.tag,
                birth_cell=divmod(creator, width), death_cell=(row, col),
            ))
            uf.union(by_age[0], younger)

    survivors = {uf.find(k) for k in range(flat.size)}
    for root in survivors:
        creator = int(order[uf.birth_order[root]])
        points.append(PersistencePoint(
            birth=float(flat[creator]), death=math.inf, dim=0, tag=complex.tag,
            birth_cell=divmod(creator, width),
        ))
    return PersistenceDiagram(_sorted(points), complex.tag, 0, complex.max_value)


def compute_h1(complex: CubicalComplex) -> PersistenceDiagram:
    """H1 diagram by Z/2 reduction of the square boundary columns.

    Cells are ordered by (value, dim, row, col, orientation); the lowest edge
    of each reduced square column is the edge whose loop the square kills.
    Only pairs with death > birth are reported; a full rectangular grid has
    no essential H1 class.
    """
    height, width = complex.shape
    vertices = complex.vertices

    edge_keys = []  # (value, row, col, orientation) with 0 = horizontal, 1 = vertical
    for (r, c), value in np.ndenumerate(complex.h_edges):
        edge_keys.append((float(value), r, c, 0))
    for (r, c), value in np.ndenumerate(complex.v_edges):
        edge_keys.append((float(value), r, c, 1))
    edge_keys.sort()
    rank = {(r, c, o): i for i, (_, r, c, o) in enumerate(edge_keys)}

    square_keys = sorted((float(value), r, c) for (r, c), value in np.ndenumerate(complex.squares))

    pivots: Dict[int, set] = {}
    points: List[PersistencePoint] = []
    for value, r, c in square_keys:
        column = {rank[(r, c, 0)], rank[(r + 1, c, 0)], rank[(r, c, 1)], rank[(r, c + 1, 1)]}
        while column:
            low = max(column)
            if low not in pivots:
                pivots[low] = column
                birth, er, ec, orient = edge_keys[low]
                if value > birth:
                    points.append(PersistencePoint(
                        birth=birth, death=value, dim=1, tag=complex.tag,
                        birth_cell=_entering_vertex(vertices, er, ec, orient), death_cell=(r, c),
                    ))
                break
            column ^= pivots[low]
    return PersistenceDiagram(_sorted(points), complex.tag, 1, complex.max_value)


def _entering_vertex(vertices: np.ndarray, row: int, col: int, orientation: int) -> Cell:
    """Endpoint of an edge that enters the filtration last."""
    other = (row, col + 1) if orientation == 0 else (row + 1, col)
    return max((row, col), other, key=lambda cell: (vertices[cell], cell))


def compute_diagrams(complex: CubicalComplex) -> Dict[int, PersistenceDiagram]:
    return {0: compute_h0(complex), 1: compute_h1(complex)}


def diagram_at(full: PersistenceDiagram, tau: float) -> PersistenceDiagram:
    """Diagram observed at threshold tau: {(b, min(d, tau)) : b <= tau}.

    Points with zero observed persistence are dropped; truncated points lose
    their death cell.
    """
    observed = []
    for p in full.points:
        if p.birth > tau:
            continue
        death = min(p.death, tau)
        if death <= p.birth:
            continue
        observed.append(p if death == p.death else replace(p, death=death, death_cell=None))
    return PersistenceDiagram(_sorted(observed), full.tag, full.dim, full.max_value)


def diagrams_at(full: PersistenceDiagram, levels: Sequence[float]) -> List[PersistenceDiagram]:
    return [diagram_at(full, tau) for tau in levels]


# --- Bottleneck distance ---

def bottleneck(d1: PersistenceDiagram, d2: PersistenceDiagram) -> float:
    """Exact bottleneck distance under the L-infinity ground metric.

    Essential classes are matched among themselves by sorted birth; finite
    points are matched by a binary search over candidate radii with a perfect
    matching test on the diagonal-augmented bipartite graph.
    """
    if (d1.tag, d1.dim) != (d2.tag, d2.dim):
        raise ValidationError("Bottleneck distance needs diagrams of the same tag and dimension")
    ess1 = sorted(p.birth for p in d1.points if p.is_essential)
    ess2 = sorted(p.birth for p in d2.points if p.is_essential)
    if len(ess1) != len(ess2):
        return math.inf
    essential = max((abs(a - b) for a, b in zip(ess1, ess2)), default=0.0)

    finite1 = np.array([[p.birth, p.death] for p in d1.points if not p.is_essential and p.pers > 0]).reshape(-1, 2)
    finite2 = np.array([[p.birth, p.death] for p in d2.points if not p.is_essential and p.pers > 0]).reshape(-1, 2)
    return max(essential, bottleneck_finite(finite1, finite2))


def bottleneck_finite(p: np.ndarray, q: np.ndarray) -> float:
    """Bottleneck distance between two (k, 2) arrays of finite points."""
    m, n = len(p), len(q)
    if m + n == 0:
        return 0.0
    cross = np.max(np.abs(p[:, None, :] - q[None, :, :]), axis=2) if m and n else np.empty((m, n))
    to_diag_p = (p[:, 1] - p[:, 0]) / 2.0
    to_diag_q = (q[:, 1] - q[:, 0]) / 2.0
    candidates = np.unique(np.concatenate([cross.ravel(), to_diag_p, to_diag_q, [0.0]]))

    lo, hi = 0, len(candidates) - 1  # the largest radius always admits the all-diagonal matching
    while lo < hi:
        mid = (lo + hi) // 2
        if _has_perfect_matching(cross, to_diag_p, to_diag_q, candidates[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(candidates[lo])


def _has_perfect_matching(cross: np.ndarray, to_diag_p: np.ndarray, to_diag_q: np.ndarray, radius: float) -> bool:
    m, n = cross.shape
    allowed = np.ones((m + n, m + n), dtype=bool)
    allowed[:m, :n] = cross <= radius
    allowed[:m, n:] = (to_diag_p <= radius)[:, None]
    allowed[m:, :n] = (to_diag_q <= radius)[None, :]
    blocked = (~allowed).astype(np.float64)
    rows, cols = linear_sum_assignment(blocked)
    return not blocked[rows, cols].any()


# --- CSV export ---

def write_diagram_csv(diagrams: Iterable[PersistenceDiagram], path: Union[str, Path]) -> None:
    """Dump diagrams as `dim,tag,birth,death,birth_row,birth_col` rows."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for diagram in diagrams:
            for p in diagram.points:
                death = min(p.death, diagram.clamp_value)
                writer.writerow([p.dim, p.tag.value, repr(p.birth), repr(death), *p.birth_cell])


def read_diagram_csv(path: Union[str, Path], dim: Optional[int] = None) -> List[PersistencePoint]:
    """Read points written by write_diagram_csv, optionally keeping one dimension."""
    points = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != CSV_COLUMNS:
            raise FormatError(f"Diagram CSV header must be {','.join(CSV_COLUMNS)}", str(path), 0)
        for line, row in enumerate(reader, start=2):
            try:
                point = PersistencePoint(
                    birth=float(row["birth"]), death=float(row["death"]), dim=int(row["dim"]),
                    tag=FiltrationTag.parse(row["tag"]),
                    birth_cell=(int(row["birth_row"]), int(row["birth_col"])),
                )
            except (TypeError, ValueError) as e:
                raise FormatError(f"Bad diagram row on line {line}: {e}", str(path), 0)
            if dim is None or point.dim == dim:
                points.append(point)
    return points
