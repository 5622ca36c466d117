"""
End-to-end segmentation of one score grid.

load -> schedule -> sub/superlevel persistence -> per-threshold diagrams ->
chaining -> cross-level Top-K -> backprojection -> test-time training ->
binarization. Sample-level parallelism is provided by joblib.
"""
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple, Union
import logging
import platform
import time

import numpy as np
import scipy
from joblib import Parallel, delayed

from . import __version__, config
from .chaining import ChainConfig, ScoredCandidate, backproject, chain_all, cross_level_select, intra_level_select
from .exceptions import DegenerateScheduleError, ValidationError
from .grid_io import BinaryMask, ScoreGrid
from .topology.filtration import SCHEDULE_MODES, FiltrationTag, ThresholdSchedule, make_schedule
from .ttt import AdaptResult, TTTConfig, adapt, binarize, build_features

logger = logging.getLogger('pipeline')

FILTRATIONS = {
    "both": (FiltrationTag.SUBLEVEL, FiltrationTag.SUPERLEVEL),
    "sub": (FiltrationTag.SUBLEVEL,),
    "sup": (FiltrationTag.SUPERLEVEL,),
}

# Component ablations: filtrations run, cross-level selection, TTT loss terms
ABLATIONS = {
    "sub+ot": ("sub", False, "ot"),
    "sub+contrastive": ("sub", False, "contrastive"),
    "sup+ot": ("sup", False, "ot"),
    "sup+contrastive": ("sup", False, "contrastive"),
    "cross+ot": ("both", True, "ot"),
    "cross+contrastive": ("both", True, "contrastive"),
    "full": ("both", True, "both"),
}


@dataclass(frozen=True)
class RunConfig:
    """Every setting of a segmentation run."""
    thresholds: int = config.DEFAULT_THRESHOLDS
    threshold_mode: str = config.DEFAULT_THRESHOLD_MODE
    chain: ChainConfig = field(default_factory=ChainConfig)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    skip_ttt: bool = False
    jobs: int = config.DEFAULT_JOBS
    seed: int = config.DEFAULT_SEED
    filtrations: str = "both"  # both | sub | sup
    cross_level: bool = True  # only used when both filtrations run

    def validate(self) -> None:
        if self.filtrations not in FILTRATIONS:
            raise ValidationError(f"filtrations must be one of {tuple(FILTRATIONS)}, got '{self.filtrations}'")
        if self.thresholds < 2:
            raise ValidationError(f"thresholds must be >= 2, got {self.thresholds}")
        if self.threshold_mode not in SCHEDULE_MODES:
            raise ValidationError(f"threshold mode must be one of {SCHEDULE_MODES}, got '{self.threshold_mode}'")
        if self.jobs < 1:
            raise ValidationError(f"jobs must be >= 1, got {self.jobs}")
        self.chain.validate()
        self.ttt.validate()

    @property
    def tags(self) -> Tuple[FiltrationTag, ...]:
        return FILTRATIONS[self.filtrations]

    @property
    def uses_cross_level(self) -> bool:
        return self.cross_level and len(self.tags) == 2

    def to_dict(self) -> Dict[str, Any]:
        settings = asdict(self)
        settings["ttt"]["hidden"] = list(self.ttt.hidden)
        return settings


def ablation_runs(run: RunConfig) -> Dict[str, RunConfig]:
    """One RunConfig per component ablation, all other settings from `run`."""
    return {
        name: replace(run, filtrations=filtrations, cross_level=cross_level, ttt=replace(run.ttt, loss=loss))
        for name, (filtrations, cross_level, loss) in ABLATIONS.items()
    }


@dataclass
class SegmentationResult:
    mask: BinaryMask
    pseudo: BinaryMask
    candidates: List[ScoredCandidate]
    schedule: Optional[ThresholdSchedule]
    seed: int
    adapt: Optional[AdaptResult] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def candidate_records(self, cfg: ChainConfig) -> List[Dict[str, Any]]:
        return [c.to_dict(cfg) for c in self.candidates]


class SegmentationPipeline:
    """Threshold-free binarization of score grids."""

    def __init__(self, run: RunConfig):
        run.validate()
        self.run = run

    def pseudo_label(self, grid: ScoreGrid, timings: Optional[Dict[str, float]] = None):
        """Schedule, chaining, selection and backprojection of one grid.

        A grid too flat to place two thresholds yields an empty pseudo-label,
        no candidates and no schedule.

        Returns:
            (pseudo-label mask, selected candidates, schedule)
        """
        timings = {} if timings is None else timings
        cfg = self.run.chain

        start = time.perf_counter()
        try:
            schedule = make_schedule(grid, self.run.thresholds, self.run.threshold_mode)
        except DegenerateScheduleError as e:
            logger.warning(f"{e}; returning an empty pseudo-label")
            timings["chaining"] = time.perf_counter() - start
            timings["selection"] = 0.0
            return BinaryMask.empty(grid.height, grid.width), [], None
        sides = chain_all(grid, schedule, cfg, self.run.tags)
        timings["chaining"] = time.perf_counter() - start

        start = time.perf_counter()
        if self.run.uses_cross_level:
            candidates = cross_level_select(sides[FiltrationTag.SUBLEVEL], sides[FiltrationTag.SUPERLEVEL], cfg)
        else:
            candidates = intra_level_select([c for tag in self.run.tags for c in sides[tag]], cfg)
        pseudo = backproject(candidates, grid, cfg)
        timings["selection"] = time.perf_counter() - start
        return pseudo, candidates, schedule

    def segment(self, grid: ScoreGrid, seed: Optional[int] = None,
                features_path: Optional[Union[str, Path]] = None) -> SegmentationResult:
        """Run the whole pipeline on one grid.

        Args:
            grid: Score grid
            seed: Per-sample seed for the head (default: the run seed)
            features_path: Optional external raw-f32 feature file

        Returns:
            SegmentationResult with the final mask, the pseudo-label and diagnostics
        """
        seed = self.run.seed if seed is None else seed
        timings: Dict[str, float] = {}
        pseudo, candidates, schedule = self.pseudo_label(grid, timings)
        result = SegmentationResult(pseudo, pseudo, candidates, schedule, seed, timings=timings)
        if self.run.skip_ttt:
            return result

        start = time.perf_counter()
        features = build_features(grid, features_path)
        result.adapt = adapt(features, pseudo, replace(self.run.ttt, seed=seed))
        result.mask = binarize(features, result.adapt.params, result.adapt.centroids)
        timings["ttt"] = time.perf_counter() - start
        logger.info(
            f"Segmented {grid.height}x{grid.width} grid: {len(candidates)} candidate(s), "
            f"pseudo {pseudo.count} px, mask {result.mask.count} px"
        )
        return result


def run_parallel(function: Callable, inputs: Iterable, n_jobs: int = 1) -> List:
    """Map `function` over inputs, in input order, on up to n_jobs workers."""
    inputs = list(inputs)
    if n_jobs == 1 or len(inputs) <= 1:
        return [function(item) for item in inputs]
    return Parallel(n_jobs=min(n_jobs, len(inputs)))(delayed(function)(item) for item in inputs)


def environment_versions() -> Dict[str, str]:
    return {
        "topoot": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
