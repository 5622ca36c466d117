"""
Command line interface for the TopoOT segmentation pipeline.

Subcommands:
- segment: score grids -> binary masks (+ run manifest)
- pd: persistence diagrams of a grid as CSV
- ot-match: Sinkhorn coupling of two diagram CSVs
- eval: pixel metrics of predicted masks against ground truth
- synth: synthetic corpus with exact ground truth
- bench: segment + eval + THR baseline over a corpus (optionally every ablation)

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric error.
"""
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import json
import logging
import os
import time

import click
import numpy as np

from . import __version__, config
from .chaining import ChainConfig
from .exceptions import EXIT_DATA, EXIT_USAGE, StructuralError, TopoOTError, ValidationError
from .grid_io import (GRID_FORMATS, PARTIAL_SUFFIX, derive_seed, load_grid, load_mask, random_blob_spec,
                      save_grid, save_mask, synth)
from .metrics import (format_markdown_table, score, summarize_by_method, thr_baseline, write_scores_csv)
from .pipeline import RunConfig, SegmentationPipeline, ablation_runs, environment_versions, run_parallel
from .topology.filtration import FiltrationTag, build_complex
from .topology.persistence import compute_diagrams, read_diagram_csv, write_diagram_csv
from .transport import augment, sinkhorn
from .ttt import LOSS_MODES, TTTConfig

logger = logging.getLogger('cli')

GRID_SUFFIXES = (".f32", ".raw", ".csv", ".pgm", ".png")
DERIVED_SUFFIXES = ("_gt", "_mask", "_pseudo", "_features")
METHOD = "TopoOT"


class TopoOTGroup(click.Group):
    """Group that maps usage errors to exit 1 and pipeline errors to their exit codes."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except TopoOTError as e:
            raise _click_error(str(e), e.exit_code) from e
        except OSError as e:
            raise _click_error(f"I/O error: {e}", EXIT_DATA) from e


def thr_label(c: float) -> str:
    return f"THR(μ+{c:g}σ)"


def _click_error(message: str, exit_code: int) -> click.ClickException:
    error = click.ClickException(message)
    error.exit_code = exit_code
    return error


# --- Files ---

def is_grid_file(path: Path) -> bool:
    return (path.is_file() and path.suffix.lower() in GRID_SUFFIXES
            and not path.stem.endswith(DERIVED_SUFFIXES))


def list_grids(paths: Sequence[Path]) -> List[Path]:
    """Grid files named by `paths` (directories are scanned), sorted by file name."""
    found = []
    for path in paths:
        if path.is_dir():
            found.extend(p for p in path.iterdir() if is_grid_file(p))
        elif path.is_file():
            found.append(path)
        else:
            raise ValidationError(f"Input {path} does not exist")
    return sorted(set(found), key=lambda p: (p.name, str(p)))


def write_atomic(path: Path, writer: Callable[[Path], None]) -> None:
    """Write through `<path>.partial` and rename once the writer succeeded."""
    partial = path.with_name(path.name + PARTIAL_SUFFIX)
    writer(partial)
    os.replace(partial, path)


def write_text_atomic(path: Path, text: str) -> None:
    write_atomic(path, lambda p: p.write_text(text, encoding="utf-8"))


# --- Options ---

def pipeline_options(function):
    """Attach the filtration, chaining and test-time training flags."""
    options = [
        click.option("--thresholds", type=click.IntRange(min=2), default=config.DEFAULT_THRESHOLDS, show_default=True),
        click.option("--threshold-mode", type=click.Choice(["uniform", "quantile"]),
                     default=config.DEFAULT_THRESHOLD_MODE, show_default=True),
        click.option("--epsilon", type=float, default=config.DEFAULT_EPSILON, show_default=True),
        click.option("--max-iter", type=click.IntRange(min=1), default=config.DEFAULT_MAX_ITER, show_default=True),
        click.option("--alpha", type=click.FloatRange(min=0.0), default=config.DEFAULT_ALPHA, show_default=True),
        click.option("--top-k", type=click.IntRange(min=1), default=config.DEFAULT_TOP_K, show_default=True),
        click.option("--top-m", type=click.IntRange(min=1), default=config.DEFAULT_TOP_M, show_default=True),
        click.option("--max-points", type=click.IntRange(min=1), default=config.DEFAULT_MAX_POINTS,
                     help="Keep only the N most persistent points of each per-threshold diagram (default: all)."),
        click.option("--delta-sub", type=click.FloatRange(0.0, 1.0), default=config.DEFAULT_DELTA_SUB, show_default=True),
        click.option("--delta-sup", type=click.FloatRange(0.0, 1.0), default=config.DEFAULT_DELTA_SUP, show_default=True),
        click.option("--restrict-component", is_flag=True, help="Keep only the component holding each feature."),
        click.option("--aggregate", type=click.Choice(["sum", "mean"]), default=config.DEFAULT_AGGREGATE, show_default=True),
        click.option("--filtrations", type=click.Choice(["both", "sub", "sup"]), default="both", show_default=True,
                     help="Filtrations to chain."),
        click.option("--no-cross-level", "no_cross_level", is_flag=True,
                     help="Rank chains by their own score instead of against the opposite filtration."),
        click.option("--loss", type=click.Choice(list(LOSS_MODES)), default=config.DEFAULT_LOSS, show_default=True,
                     help="Test-time training loss terms."),
        click.option("--lambda", "lam", type=click.FloatRange(min=0.0), default=config.DEFAULT_LAMBDA, show_default=True),
        click.option("--margin", type=float, default=config.DEFAULT_MARGIN, show_default=True),
        click.option("--epochs", type=click.IntRange(min=1), default=config.DEFAULT_EPOCHS, show_default=True),
        click.option("--steps-per-epoch", type=click.IntRange(min=1), default=config.DEFAULT_STEPS_PER_EPOCH,
                     show_default=True),
        click.option("--lr", type=float, default=config.DEFAULT_LR, show_default=True),
        click.option("--pairs", type=click.IntRange(min=2), default=config.DEFAULT_PAIRS, show_default=True),
        click.option("--seed", type=int, default=config.DEFAULT_SEED, show_default=True),
        click.option("--skip-ttt", is_flag=True, help="Emit the OT pseudo-label as the mask."),
        click.option("--jobs", type=click.IntRange(min=1), default=config.DEFAULT_JOBS, show_default=True),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def build_run_config(options: Dict) -> RunConfig:
    chain = ChainConfig(
        alpha=options["alpha"], top_m=options["top_m"], top_k=options["top_k"],
        delta_sub=options["delta_sub"], delta_sup=options["delta_sup"], aggregate=options["aggregate"],
        max_points=options["max_points"], restrict_component=options["restrict_component"],
        epsilon=options["epsilon"], max_iter=options["max_iter"],
    )
    ttt = TTTConfig(
        lam=options["lam"], margin=options["margin"], epochs=options["epochs"],
        steps_per_epoch=options["steps_per_epoch"], lr=options["lr"], pairs=options["pairs"],
        seed=options["seed"], loss=options["loss"],
    )
    run = RunConfig(thresholds=options["thresholds"], threshold_mode=options["threshold_mode"], chain=chain,
                    ttt=ttt, skip_ttt=options["skip_ttt"], jobs=options["jobs"], seed=options["seed"],
                    filtrations=options["filtrations"], cross_level=not options["no_cross_level"])
    run.validate()
    return run


# --- Per-sample work (top level so joblib can ship it to workers) ---

def segment_sample(task: Tuple) -> Dict:
    index, path, features_path, out_dir, run, save_pseudo = task
    seed = derive_seed(run.seed, index)
    grid = load_grid(path)
    result = SegmentationPipeline(run).segment(grid, seed=seed, features_path=features_path)

    mask_path = out_dir / f"{path.stem}_mask.png"
    write_atomic(mask_path, lambda p: save_mask(result.mask, p))
    if save_pseudo:
        write_atomic(out_dir / f"{path.stem}_pseudo.png", lambda p: save_mask(result.pseudo, p))
    return {
        "input": path.name,
        "index": index,
        "seed": seed,
        "mask": mask_path.name,
        "schedule": list(result.schedule.taus) if result.schedule else [],
        "pseudo_pixels": result.pseudo.count,
        "mask_pixels": result.mask.count,
        "final_loss": result.adapt.final_loss if result.adapt else None,
        "timings": result.timings,
        "candidates": result.candidate_records(run.chain),
    }


def bench_sample(task: Tuple) -> List[Tuple[str, str, object]]:
    index, path, gt_path, runs, c = task
    grid = load_grid(path)
    gt = load_mask(gt_path)
    if gt.shape != grid.shape:
        raise StructuralError(f"Ground truth {gt_path.name} is {gt.shape}, grid {path.name} is {grid.shape}")
    rows = []
    for method, run in runs.items():
        result = SegmentationPipeline(run).segment(grid, seed=derive_seed(run.seed, index))
        rows.append((path.stem, method, score(result.mask, gt)))
    rows.append((path.stem, thr_label(c), score(thr_baseline(grid, c), gt)))
    return rows


def ablation_label(name: str) -> str:
    return f"{METHOD}[{name}]"


def _features_for(features: Optional[Path], grid_path: Path, single: bool) -> Optional[Path]:
    if features is None:
        return None
    if features.is_dir():
        candidate = features / f"{grid_path.stem}_features.f32"
        return candidate if candidate.exists() else None
    if not single:
        raise ValidationError("--features FILE needs a single input; pass a directory for several inputs")
    return features


# --- Commands ---

@click.group(cls=TopoOTGroup)
@click.option("--log-level", default=config.LOG_LEVEL, show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.version_option(version=__version__, prog_name="topoot")
def cli(log_level):
    """TopoOT: threshold-free binarization of anomaly score maps."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--features", type=click.Path(exists=True, path_type=Path),
              help="raw-f32 feature file, or a directory of <stem>_features.f32 files.")
@click.option("--save-pseudo", is_flag=True, help="Also write <stem>_pseudo.png.")
@pipeline_options
def segment(inputs, out_dir, features, save_pseudo, **options):
    """Segment score grids into binary masks."""
    run = build_run_config(options)
    grids = list_grids(inputs)
    if not grids:
        raise ValidationError("No input grids found")
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = {"config": run.to_dict(), "versions": environment_versions(), "samples": []}
    manifest_path = out_dir / "manifest.json"
    partial = manifest_path.with_name(manifest_path.name + PARTIAL_SUFFIX)
    partial.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    tasks = [(index, path, _features_for(features, path, len(grids) == 1), out_dir, run, save_pseudo)
             for index, path in enumerate(grids)]
    start = time.perf_counter()
    manifest["samples"] = run_parallel(segment_sample, tasks, run.jobs)
    manifest["total_seconds"] = time.perf_counter() - start

    partial.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(partial, manifest_path)
    click.echo(f"Wrote {len(grids)} mask(s) to {out_dir}")


@cli.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--format", "grid_format", type=click.Choice(GRID_FORMATS), default=None)
@click.option("--tag", type=click.Choice(["both", "sublevel", "superlevel"]), default="both", show_default=True)
def pd(input_path, out_path, grid_format, tag):
    """Dump the H0/H1 persistence diagrams of a grid as CSV."""
    grid = load_grid(input_path, grid_format)
    tags = list(FiltrationTag) if tag == "both" else [FiltrationTag.parse(tag)]
    diagrams = []
    for filtration in tags:
        full = compute_diagrams(build_complex(grid, filtration))
        diagrams.extend(full[dim] for dim in sorted(full))
    write_atomic(out_path, lambda p: write_diagram_csv(diagrams, p))
    click.echo(f"Wrote {sum(len(d) for d in diagrams)} points to {out_path}")


@cli.command("ot-match")
@click.argument("first", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("second", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--dim", type=click.IntRange(0, 1), default=None, help="Only match points of this dimension.")
@click.option("--epsilon", type=float, default=config.DEFAULT_EPSILON, show_default=True)
@click.option("--max-iter", type=click.IntRange(min=1), default=config.DEFAULT_MAX_ITER, show_default=True)
@click.option("--tol", type=float, default=config.DEFAULT_TOL, show_default=True)
def ot_match(first, second, dim, epsilon, max_iter, tol):
    """Couple two diagram CSVs with entropic OT."""
    p = np.array([[pt.birth, pt.death] for pt in read_diagram_csv(first, dim)]).reshape(-1, 2)
    q = np.array([[pt.birth, pt.death] for pt in read_diagram_csv(second, dim)]).reshape(-1, 2)
    a, b = augment(p, q)
    plan = sinkhorn(a, b, epsilon, max_iter, tol)

    with np.printoptions(precision=4, suppress=True, linewidth=120):
        click.echo("plan:")
        click.echo(str(plan.plan))
    click.echo(f"transport_cost: {plan.transport_cost:.6f}")
    click.echo(f"entropic_cost: {plan.entropic_cost:.6f}")
    click.echo(f"iterations: {plan.iterations} converged: {plan.converged}")
    click.echo("point,birth,death,partner,mass")
    m, n = len(p), len(q)
    for i in range(m):
        j = int(np.argmax(plan.plan[i]))
        partner = "diagonal" if j >= n else str(j)
        click.echo(f"{i},{p[i, 0]:.6f},{p[i, 1]:.6f},{partner},{plan.plan[i, j]:.6f}")


@cli.command("eval")
@click.argument("corpus", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("pred_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Report directory (default: PRED_DIR).")
@click.option("--baseline", type=click.Choice(["none", "thr"]), default="none", show_default=True)
@click.option("--c", "c", type=float, default=config.DEFAULT_THR_C, show_default=True)
def evaluate(corpus, pred_dir, out_dir, baseline, c):
    """Score predicted masks of a corpus against its ground truth."""
    out_dir = out_dir or pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in list_grids([corpus]):
        gt_path = corpus / f"{path.stem}_gt.png"
        pred_path = pred_dir / f"{path.stem}_mask.png"
        if not gt_path.exists() or not pred_path.exists():
            logger.warning(f"Skipping {path.name}: missing {'ground truth' if not gt_path.exists() else 'prediction'}")
            continue
        gt = load_mask(gt_path)
        rows.append((path.stem, METHOD, score(load_mask(pred_path), gt)))
        if baseline == "thr":
            rows.append((path.stem, thr_label(c), score(thr_baseline(load_grid(path), c), gt)))
    if not rows:
        raise ValidationError(f"No (grid, ground truth, prediction) triples in {corpus}")

    write_atomic(out_dir / "eval_samples.csv", lambda p: write_scores_csv(rows, p))
    table = format_markdown_table(summarize_by_method(rows), title="Evaluation")
    write_text_atomic(out_dir / "eval_summary.md", table)
    click.echo(table)


@cli.command("synth")
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--count", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--size", type=click.IntRange(min=12), default=32, show_default=True)
@click.option("--seed", type=int, default=config.DEFAULT_SEED, show_default=True)
@click.option("--noise", type=click.FloatRange(min=0.0), default=0.05, show_default=True)
@click.option("--drift", type=click.FloatRange(min=0.0), default=0.1, show_default=True)
def synth_corpus(out_dir, count, size, seed, noise, drift):
    """Write a synthetic corpus of blob defects with exact ground truth."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for index in range(count):
        grid, truth = synth(random_blob_spec(index, size=size, seed=seed, noise=noise, drift=drift))
        stem = f"sample_{index:03d}"
        write_atomic(out_dir / f"{stem}.f32", lambda p: save_grid(grid, p))
        write_atomic(out_dir / f"{stem}_gt.png", lambda p: save_mask(truth, p))
    click.echo(f"Wrote {count} sample(s) to {out_dir}")


@cli.command()
@click.argument("corpus", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--c", "c", type=float, default=config.DEFAULT_THR_C, show_default=True)
@click.option("--ablation", is_flag=True, help="Also score every component ablation of the pipeline.")
@pipeline_options
def bench(corpus, out_dir, c, ablation, **options):
    """Segment and evaluate a corpus against the THR baseline."""
    run = build_run_config(options)
    runs = {METHOD: run}
    if ablation:
        for name, variant in ablation_runs(run).items():
            variant.validate()
            runs[ablation_label(name)] = variant
    grids = list_grids([corpus])
    if not grids:
        raise ValidationError(f"Corpus {corpus} holds no score grids")

    tasks = []
    for index, path in enumerate(grids):
        gt_path = corpus / f"{path.stem}_gt.png"
        if not gt_path.exists():
            logger.warning(f"Skipping {path.name}: no ground truth {gt_path.name}")
            continue
        tasks.append((index, path, gt_path, runs, c))
    if not tasks:
        raise ValidationError(f"No sample in {corpus} has ground truth")

    rows = [row for sample_rows in run_parallel(bench_sample, tasks, run.jobs) for row in sample_rows]

    out_dir.mkdir(parents=True, exist_ok=True)
    write_atomic(out_dir / "bench_samples.csv", lambda p: write_scores_csv(rows, p))
    table = format_markdown_table(summarize_by_method(rows), title="Benchmark")
    write_text_atomic(out_dir / "bench_report.md", table)
    click.echo(table)


def main():
    cli(prog_name="topoot")


if __name__ == "__main__":
    main()
