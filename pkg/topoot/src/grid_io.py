"""
Score grid and mask I/O for the TopoOT pipeline.

This module loads anomaly score maps from disk, writes binary masks, and
synthesizes score maps with known ground truth. Supported grid formats:
- gray-image: single-channel PGM (P5) or PNG, 8 or 16 bit
- raw-f32: one-line JSON header {"h":H,"w":W} + little-endian float32 payload
- csv: one grid row per line, comma separated
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union
import json
import logging

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import FormatError, StructuralError, ValidationError

logger = logging.getLogger('grid_io')

PathLike = Union[str, Path]

GRID_FORMATS = ("gray-image", "raw-f32", "csv")
PARTIAL_SUFFIX = ".partial"

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class ScoreGrid:
    """Dense H x W grid of anomaly scores in [0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise StructuralError(f"Score grid must be a non-empty 2D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Score grid contains non-finite values")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("Score grid values must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def from_raw(cls, values: np.ndarray, keep_unit_range: bool = False) -> "ScoreGrid":
        """Build a grid from arbitrary finite scores.

        Values are min-max rescaled, then rounded to single precision. With
        keep_unit_range, non-constant input already inside [0, 1] is kept as is.
        """
        values = np.asarray(values, dtype=np.float64)
        lo, hi = float(values.min()), float(values.max())
        if not (keep_unit_range and 0.0 <= lo < hi <= 1.0):
            values = rescale(values)
        return cls(single_precision(values))


@dataclass(frozen=True)
class BinaryMask:
    """H x W boolean grid (pseudo-labels, predictions and ground truth)."""
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise StructuralError(f"Mask must be a non-empty 2D array, got shape {bits.shape}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        if self.shape != other.shape:
            raise StructuralError(f"Mask shapes differ: {self.shape} vs {other.shape}")
        return BinaryMask(self.bits | other.bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))


@dataclass(frozen=True)
class DefectShape:
    """A disk (radius) or axis-aligned box (half_extent) defect with its peak score."""
    center: Tuple[int, int]
    peak: float
    radius: Optional[int] = None
    half_extent: Optional[Tuple[int, int]] = None

    def support(self, height: int, width: int) -> np.ndarray:
        """Rasterize the defect; raises ValidationError if it leaves the grid."""
        if (self.radius is None) == (self.half_extent is None):
            raise ValidationError("A defect needs exactly one of radius or half_extent")
        row, col = self.center
        reach_r, reach_c = (self.radius, self.radius) if self.radius is not None else self.half_extent
        if min(reach_r, reach_c) < 0:
            raise ValidationError(f"Negative defect extent at {self.center}")
        if row - reach_r < 0 or col - reach_c < 0 or row + reach_r >= height or col + reach_c >= width:
            raise ValidationError(f"Defect at {self.center} does not fit in a {height}x{width} grid")

        rows, cols = np.mgrid[0:height, 0:width]
        if self.radius is not None:
            return (rows - row) ** 2 + (cols - col) ** 2 <= self.radius ** 2
        return (np.abs(rows - row) <= reach_r) & (np.abs(cols - col) <= reach_c)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic score map with exact ground truth."""
    height: int
    width: int
    defects: Tuple[DefectShape, ...] = field(default_factory=tuple)
    background: float = 0.1
    noise: float = 0.0
    seed: int = 0
    drift: float = 0.0  # background ramp added along columns

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"Grid dimensions must be positive, got {self.height}x{self.width}")
        if not 0.0 <= self.background <= 1.0:
            raise ValidationError(f"Background level {self.background} outside [0, 1]")
        if self.noise < 0.0 or self.drift < 0.0:
            raise ValidationError("Noise amplitude and drift must be non-negative")
        for defect in self.defects:
            if not defect.peak > self.background:
                raise ValidationError(f"Defect peak {defect.peak} must exceed background {self.background}")


# --- SplitMix64 ---

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX_A
    z = (z ^ (z >> np.uint64(27))) * _MIX_B
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of the SplitMix64 generator seeded with `seed`."""
    with np.errstate(over="ignore"):
        steps = np.arange(1, count + 1, dtype=np.uint64)
        states = np.uint64(seed & _MASK64) + steps * _GOLDEN
        return _mix64(states)


def splitmix64_uniform(seed: int, count: int) -> np.ndarray:
    """Uniform doubles in [0, 1) from the top 53 bits of each SplitMix64 output."""
    return (splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def derive_seed(global_seed: int, index: int) -> int:
    """Per-sample seed: the (index+1)-th SplitMix64 output of the global seed."""
    return int(splitmix64(global_seed, index + 1)[-1])


# --- Loading ---

def single_precision(values: np.ndarray) -> np.ndarray:
    """Round to the nearest float32, kept as float64."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def rescale(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant inputs map to all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        return (values - lo) / (hi - lo)
    return np.zeros_like(values, dtype=np.float64)


def infer_format(path: PathLike) -> str:
    """Guess the grid format from the file suffix."""
    suffix = Path(str(path).removesuffix(PARTIAL_SUFFIX)).suffix.lower()
    if suffix in (".f32", ".raw"):
        return "raw-f32"
    if suffix == ".csv":
        return "csv"
    if suffix in (".pgm", ".png"):
        return "gray-image"
    raise ValidationError(f"Cannot infer grid format from suffix '{suffix}' of {path}")


def load_grid(path: PathLike, format: Optional[str] = None) -> ScoreGrid:
    """Load a score grid into [0, 1].

    Images are always min-max rescaled. raw-f32 and csv values are rescaled
    unless they already span a non-degenerate part of [0, 1], in which case
    they are kept, so a non-constant single-precision grid written by
    save_grid loads back bit for bit. Constant grids load as all zeros.

    Args:
        path: Grid file
        format: One of GRID_FORMATS (default: inferred from the suffix)

    Returns:
        ScoreGrid in single precision
    """
    format = format or infer_format(path)
    if format == "raw-f32":
        values = _read_raw_f32(path, channels=False)
    elif format == "csv":
        values = _read_csv(path)
    elif format == "gray-image":
        values = _read_gray_image(path)
    else:
        raise ValidationError(f"Unknown grid format '{format}', expected one of {GRID_FORMATS}")
    return ScoreGrid.from_raw(values, keep_unit_range=format != "gray-image")


def load_features(path: PathLike, height: int, width: int) -> np.ndarray:
    """Load a multi-channel raw-f32 feature grid of shape (H, W, D)."""
    features = _read_raw_f32(path, channels=True)
    if features.shape[:2] != (height, width):
        raise StructuralError(
            f"Feature grid {features.shape[0]}x{features.shape[1]} does not match score grid {height}x{width}"
        )
    return features


def _read_raw_f32(path: PathLike, channels: bool) -> np.ndarray:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise FormatError("raw-f32 header is not newline terminated", str(path), len(data))
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise FormatError(f"raw-f32 header is not UTF-8: {e.reason}", str(path), e.start)
    except json.JSONDecodeError as e:
        raise FormatError(f"raw-f32 header is not JSON: {e.msg}", str(path), e.pos)

    try:
        height, width = int(header["h"]), int(header["w"])
        depth = int(header.get("c", 1))
    except (KeyError, TypeError, ValueError):
        raise FormatError("raw-f32 header needs integer 'h' and 'w'", str(path), 0)
    if height < 1 or width < 1 or depth < 1:
        raise FormatError(f"raw-f32 header has non-positive dimensions {header}", str(path), 0)
    if depth != 1 and not channels:
        raise StructuralError(f"Expected a single-channel grid in {path}, header says c={depth}")

    offset = newline + 1
    payload = data[offset:]
    expected = 4 * height * width * depth
    if len(payload) != expected:
        raise StructuralError(
            f"raw-f32 payload of {path} has {len(payload)} bytes, header implies {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("raw-f32 payload contains a non-finite value", str(path), offset + 4 * int(bad[0]))
    if channels:
        return values.reshape(height, width, depth)
    return values.reshape(height, width)


def _read_csv(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    rows = []
    offset = 0
    for line in data.split(b"\n"):
        line_start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        row = []
        token_start = line_start
        for token in line.split(b","):
            try:
                value = float(token.decode("ascii").strip())
            except (UnicodeDecodeError, ValueError):
                raise FormatError(f"Cannot parse CSV value {token!r}", str(path), token_start)
            if not np.isfinite(value):
                raise FormatError(f"Non-finite CSV value {token!r}", str(path), token_start)
            row.append(value)
            token_start += len(token) + 1
        rows.append(row)

    if not rows:
        raise FormatError("CSV grid is empty", str(path), 0)
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise StructuralError(f"CSV rows of {path} have differing lengths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def _read_gray_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode not in ("L", "I", "I;16", "I;16B", "I;16L"):
                raise FormatError(f"Only single-channel 8/16-bit images are supported, got mode {mode}", str(path), 0)
            return np.array(img, dtype=np.float64)
    except UnidentifiedImageError:
        raise FormatError("Not a readable PGM/PNG image", str(path), 0)


# --- Writing ---

def _image_format(path: PathLike) -> str:
    suffix = Path(str(path).removesuffix(PARTIAL_SUFFIX)).suffix.lower()
    return {".png": "PNG", ".pgm": "PPM"}.get(suffix, "PNG")


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    """Write an 8-bit single-channel image, foreground 255 and background 0."""
    pixels = mask.bits.astype(np.uint8) * 255
    try:
        Image.fromarray(pixels).save(path, format=_image_format(path))
    except (OSError, ValueError) as e:
        raise OSError(f"Cannot write mask to {path}: {e}") from e


def load_mask(path: PathLike) -> BinaryMask:
    """Read a mask image; pixels above 127 are foreground."""
    try:
        with Image.open(path) as img:
            pixels = np.array(img.convert("L"))
    except UnidentifiedImageError:
        raise FormatError("Not a readable mask image", str(path), 0)
    return BinaryMask(pixels > 127)


def save_grid(grid: ScoreGrid, path: PathLike) -> None:
    """Write a grid in the raw-f32 format.

    Values are stored as float32; grids from synth and load_grid already hold
    single-precision values and lose nothing.
    """
    header = json.dumps({"h": grid.height, "w": grid.width}, separators=(",", ":")).encode("utf-8")
    payload = grid.values.astype("<f4").tobytes()
    Path(path).write_bytes(header + b"\n" + payload)


def save_features(features: np.ndarray, path: PathLike) -> None:
    """Write an (H, W, D) feature grid in the multi-channel raw-f32 format."""
    height, width, depth = features.shape
    header = json.dumps({"h": height, "w": width, "c": depth}, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(header + b"\n" + np.ascontiguousarray(features, dtype="<f4").tobytes())


# --- Synthesis ---

def synth(spec: SyntheticSpec) -> Tuple[ScoreGrid, BinaryMask]:
    """Synthesize an anomaly map and its exact ground-truth mask.

    Defect pixels get their peak score plus noise, background pixels the
    background level (plus drift) plus noise; noise is uniform in
    [-noise, +noise] drawn from SplitMix64 in row-major order. Scores are
    clamped to [0, 1] and rounded to single precision.
    """
    spec.validate()
    height, width = spec.height, spec.width
    cols = np.broadcast_to(np.arange(width, dtype=np.float64), (height, width))
    values = spec.background + spec.drift * cols / max(width - 1, 1)

    truth = np.zeros((height, width), dtype=bool)
    for defect in spec.defects:
        support = defect.support(height, width)
        values = np.where(support & truth, np.maximum(values, defect.peak), values)
        values = np.where(support & ~truth, defect.peak, values)
        truth |= support

    if spec.noise > 0:
        uniform = splitmix64_uniform(spec.seed, height * width).reshape(height, width)
        values = values + spec.noise * (2.0 * uniform - 1.0)

    return ScoreGrid(single_precision(np.clip(values, 0.0, 1.0))), BinaryMask(truth)


def random_blob_spec(index: int, size: int = 32, seed: int = 0,
                     noise: float = 0.05, drift: float = 0.1) -> SyntheticSpec:
    """Deterministic single-disk spec for corpus sample `index`."""
    if size < 12:
        raise ValidationError(f"Synthetic corpus grids need size >= 12, got {size}")
    sample_seed = derive_seed(seed, index)
    draws = splitmix64_uniform(sample_seed, 4)
    max_radius = max(size // 4, 3)
    radius = 3 + int(draws[0] * (max_radius - 2))
    span = size - 2 * radius
    row = radius + int(draws[1] * span)
    col = radius + int(draws[2] * span)
    peak = 0.8 + 0.15 * float(draws[3])
    defect = DefectShape(center=(row, col),
                         peak=peak, radius=radius)
    return SyntheticSpec(height=size, width=size, defects=(defect,), background=0.1,
                         noise=noise, seed=sample_seed, drift=drift)
