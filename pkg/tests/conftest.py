# tests/conftest.py
import numpy as np
import pytest

from topoot.src.grid_io import DefectShape, ScoreGrid, SyntheticSpec, random_blob_spec, synth


def random_grid(seed: int, height: int, width: int = None, levels: int = 0) -> ScoreGrid:
    """Seeded uniform grid; `levels` > 0 quantizes values to force ties."""
    rng = np.random.default_rng(seed)
    values = rng.random((height, width or height))
    if levels:
        values = np.round(values * levels) / levels
    return ScoreGrid(values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def disk_fixture():
    """Noise-free disk at 0.9 on a 0.1 background with its exact mask."""
    spec = SyntheticSpec(height=24, width=24, background=0.1,
                         defects=(DefectShape(center=(12, 11), peak=0.9, radius=4),))
    return synth(spec)


@pytest.fixture
def blob_fixture():
    """First sample of the synthetic corpus: noisy, drifting single blob."""
    return synth(random_blob_spec(0, size=32, seed=7))


@pytest.fixture
def corpus_dir(tmp_path):
    """A 3-sample corpus written the way `topoot synth` writes it."""
    from click.testing import CliRunner
    from topoot.src.cli import cli

    out = tmp_path / "corpus"
    result = CliRunner().invoke(cli, ["synth", str(out), "--count", "3", "--size", "24", "--seed", "3"])
    assert result.exit_code == 0, result.output
    return out
