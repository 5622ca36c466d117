"""
Pixel-level evaluation of binary masks.

Scores follow the usual confusion-count definitions; an empty prediction
against an empty ground truth is a perfect match. The mu + c*sigma
thresholding rule is provided as the reference baseline.
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union
import csv
import io

import numpy as np

from . import config
from .exceptions import StructuralError, ValidationError
from .grid_io import BinaryMask, ScoreGrid

METRIC_COLUMNS = ("precision", "recall", "f1", "iou")
TABLE_HEADERS = ("Method", "Prec.", "Rec.", "F1", "IoU")


@dataclass(frozen=True)
class PixelScores:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    iou: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class ScoreSummary:
    """Unweighted means of the ratio metrics over `count` samples."""
    precision: float
    recall: float
    f1: float
    iou: float
    count: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _ratio(numerator: int, denominator: int, empty_value: float) -> float:
    return numerator / denominator if denominator > 0 else empty_value


def scores_from_counts(tp: int, fp: int, fn: int, tn: int) -> PixelScores:
    """Ratios from confusion counts with the zero-division conventions.

    Precision with no predicted pixels is 1 if the ground truth is empty too,
    else 0 (recall symmetrically). F1 is 0 when P + R = 0; IoU is 1 when
    tp + fp + fn = 0.
    """
    precision = _ratio(tp, tp + fp, 1.0 if tp + fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if tp + fp == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    iou = _ratio(tp, tp + fp + fn, 1.0)
    return PixelScores(tp, fp, fn, tn, precision, recall, f1, iou)


def score(pred: BinaryMask, gt: BinaryMask) -> PixelScores:
    """Confusion counts and ratio metrics of a prediction against ground truth."""
    if pred.shape != gt.shape:
        raise StructuralError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in size")
    p, g = pred.bits, gt.bits
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return scores_from_counts(tp, fp, fn, tn)


def aggregate(scores: Sequence[PixelScores]) -> ScoreSummary:
    """Unweighted mean of precision, recall, F1 and IoU."""
    if not scores:
        raise ValidationError("Cannot aggregate an empty list of scores")
    means = {name: float(np.mean([getattr(s, name) for s in scores])) for name in METRIC_COLUMNS}
    return ScoreSummary(count=len(scores), **means)


def thr_baseline(grid: ScoreGrid, c: float = config.DEFAULT_THR_C) -> BinaryMask:
    """Binarize at mu + c * sigma of the score map (strictly above)."""
    values = grid.values
    return BinaryMask(values > values.mean() + c * values.std())


# --- Reports ---

def write_scores_csv(rows: Sequence[Tuple[str, str, PixelScores]], path: Union[str, Path]) -> None:
    """Per-sample scores as `sample,method,tp,fp,fn,tn,precision,recall,f1,iou`."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["sample", "method", "tp", "fp", "fn", "tn", *METRIC_COLUMNS])
        for sample, method, s in rows:
            writer.writerow([sample, method, s.tp, s.fp, s.fn, s.tn,
                             *(f"{getattr(s, name):.6f}" for name in METRIC_COLUMNS)])


def format_markdown_table(rows: Sequence[Tuple[str, ScoreSummary]], title: str = "") -> str:
    """Markdown table with one row per method and Prec./Rec./F1/IoU columns."""
    out = io.StringIO()
    if title:
        out.write(f"# {title}\n\n")
    out.write("| " + " | ".join(TABLE_HEADERS) + " |\n")
    out.write("|" + "|".join(["---"] + [":---:"] * (len(TABLE_HEADERS) - 1)) + "|\n")
    for method, summary in rows:
        cells = [f"{getattr(summary, name):.3f}" for name in METRIC_COLUMNS]
        out.write(f"| {method} | " + " | ".join(cells) + " |\n")
    if rows:
        out.write(f"\nSamples: {rows[0][1].count}\n")
    return out.getvalue()


def summarize_by_method(rows: Sequence[Tuple[str, str, PixelScores]]) -> List[Tuple[str, ScoreSummary]]:
    """Aggregate per-sample rows per method, keeping first-seen method order."""
    grouped: Dict[str, List[PixelScores]] = {}
    for _, method, s in rows:
        grouped.setdefault(method, []).append(s)
    return [(method, aggregate(scores)) for method, scores in grouped.items()]
