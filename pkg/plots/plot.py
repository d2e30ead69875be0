#!/usr/bin/env python3
"""Render figures from the experiment CLI's output directories.

Three figure kinds, each reading only the documented CSV schemas:

  loss      aggregate_loss.csv      mean training-loss curve per estimator
                                    with a +- stderr band
  variance  aggregate_variance.csv  same band layout for the smoothed
                                    gradient-variance series
  sweep     sweep_<tag>.csv         measured variance of the swept coordinate
                                    against its mean, one panel per objective,
                                    closed-form curves dashed where available

The script is read-only plumbing: every number is taken as-is from the CSVs.
Nothing is written until all inputs parse, so a failed run never leaves a
partial image behind.
"""

import argparse
import csv
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

DPI = 150
KINDS = ("loss", "variance", "sweep")
BAND_FILES = {"loss": "aggregate_loss.csv",
              "variance": "aggregate_variance.csv"}
BAND_Y_LABELS = {"loss": "expected loss",
                 "variance": "gradient variance (coordinate mean)"}
SWEEP_COLUMNS = ("objective", "theta_sweep", "mc_var", "analytic_var",
                 "n_samples")


class PlotError(Exception):
    """Any input problem; the message is the user-facing error text."""


def _cell(text: str) -> float:
    """Parse one CSV cell; blank cells (optional columns) become NaN."""
    return float(text) if text != "" else math.nan


def read_rows(path: Path) -> tuple[list[str], list[dict]]:
    if not path.is_file():
        raise PlotError(f"{path.name} not found in {path.parent}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fieldnames = reader.fieldnames
    if fieldnames is None:
        raise PlotError(f"{path.name} is empty")
    if not rows:
        raise PlotError(f"{path.name} has a header but no data rows")
    return list(fieldnames), rows


def require_column(name: str, fieldnames: list[str], path: Path) -> None:
    if name not in fieldnames:
        raise PlotError(f"{path.name} is missing column '{name}'")


def band_tags(fieldnames: list[str], path: Path) -> list[str]:
    """Estimator tags present as {tag}_mean / {tag}_stderr column pairs."""
    tags = [n[: -len("_mean")] for n in fieldnames if n.endswith("_mean")]
    if not tags:
        raise PlotError(f"{path.name} has no '<estimator>_mean' columns")
    for tag in tags:
        require_column(f"{tag}_stderr", fieldnames, path)
    return tags


def render_band(directory: Path, kind: str, log_scale: bool):
    path = directory / BAND_FILES[kind]
    fieldnames, rows = read_rows(path)
    require_column("iter", fieldnames, path)
    tags = band_tags(fieldnames, path)
    x = [_cell(r["iter"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for tag in tags:
        mean = [_cell(r[f"{tag}_mean"]) for r in rows]
        err = [_cell(r[f"{tag}_stderr"]) for r in rows]
        (line,) = ax.plot(x, mean, linewidth=1.4, label=tag)
        ax.fill_between(x, [m - e for m, e in zip(mean, err)],
                        [m + e for m, e in zip(mean, err)],
                        color=line.get_color(), alpha=0.25, linewidth=0)
    ax.set_xlabel("iteration")
    ax.set_ylabel(BAND_Y_LABELS[kind])
    if log_scale:
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def load_sweeps(directory: Path) -> dict:
    """sweep_{tag}.csv files -> {tag: {objective: [(theta, mc, analytic)]}}."""
    paths = sorted(directory.glob("sweep_*.csv"))
    if not paths:
        raise PlotError(f"no sweep_*.csv files in {directory}")
    curves = {}
    for path in paths:
        fieldnames, rows = read_rows(path)
        for column in SWEEP_COLUMNS:
            require_column(column, fieldnames, path)
        per_objective = {}
        for r in rows:
            per_objective.setdefault(r["objective"], []).append(
                (_cell(r["theta_sweep"]), _cell(r["mc_var"]),
                 _cell(r["analytic_var"])))
        curves[path.stem[len("sweep_"):]] = per_objective
    return curves


def render_sweep(directory: Path, log_scale: bool):
    curves = load_sweeps(directory)
    objectives: list[str] = []
    for per_objective in curves.values():
        for name in per_objective:
            if name not in objectives:
                objectives.append(name)
    fig, axes = plt.subplots(1, len(objectives),
                             figsize=(5.4 * len(objectives), 4.4),
                             squeeze=False)
    for ax, objective in zip(axes[0], objectives):
        for tag, per_objective in curves.items():
            points = per_objective.get(objective)
            if not points:
                continue
            theta = [p[0] for p in points]
            (line,) = ax.plot(theta, [p[1] for p in points], marker="o",
                              markersize=3.5, linewidth=1.4, label=tag)
            if any(not math.isnan(p[2]) for p in points):
                ax.plot(theta, [p[2] for p in points], linestyle="--",
                        linewidth=1.0, color=line.get_color(),
                        label="_nolegend_")
        ax.set_title(objective)
        ax.set_xlabel("swept coordinate mean")
        ax.set_ylabel("variance at swept coordinate")
        if log_scale:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    return fig


def render(indir: str, kind: str, log_scale: bool, out: str) -> Path:
    directory = Path(indir)
    if not directory.is_dir():
        raise PlotError(f"input directory not found: {directory}")
    if kind == "sweep":
        fig = render_sweep(directory, log_scale)
    else:
        fig = render_band(directory, kind, log_scale)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=DPI, format="png")
    plt.close(fig)
    return out_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plot.py",
        description="Render a loss, variance, or sweep figure from an "
                    "experiment output directory.")
    parser.add_argument("--in", dest="indir", required=True, metavar="DIR",
                        help="experiment output directory")
    parser.add_argument("--kind", required=True, choices=KINDS,
                        help="which figure to render")
    parser.add_argument("--log", action="store_true",
                        help="log-scale the y axis")
    parser.add_argument("--out", required=True, metavar="FILE",
                        help="output PNG path (150 dpi)")
    return parser


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out_path = render(args.indir, args.kind, args.log, args.out)
    except PlotError as err:
        print(f"plot.py: {err}", file=sys.stderr)
        return 1
    print(f"wrote {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(entrypoint())
