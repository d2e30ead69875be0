"""Session fixtures: real output directories produced by the experiment CLI.

The plotting package talks to the experiment package only through its files,
so the fixtures shell out to the installed ``berngrad`` command line rather
than importing anything from it.
"""

import subprocess
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))


def run_experiment(*argv: str) -> None:
    proc = subprocess.run([sys.executable, "-m", "berngrad.cli", *argv],
                          capture_output=True, text=True)
    assert proc.returncode == 0, f"fixture CLI run failed:\n{proc.stderr}"


@pytest.fixture(scope="session")
def training_dir(tmp_path_factory) -> Path:
    """A small two-estimator training run with per-iteration variance probes."""
    out = tmp_path_factory.mktemp("training_run")
    run_experiment("--experiment", "p1", "--K", "6", "--iters", "40",
                   "--trials", "3", "--estimator", "disarm",
                   "--estimator", "bitflip1", "--variance-every", "1",
                   "--variance-samples", "20", "--loss-samples", "5",
                   "--seed", "0", "--out", str(out))
    return out


@pytest.fixture(scope="session")
def sweep_dir(tmp_path_factory) -> Path:
    """A boundary sweep with enough draws for the crossover to be unambiguous."""
    out = tmp_path_factory.mktemp("sweep_run")
    run_experiment("--experiment", "variance-sweep", "--K", "6",
                   "--estimator", "disarm", "--estimator", "bitflip1",
                   "--variance-samples", "4000", "--seed", "0",
                   "--out", str(out))
    return out
