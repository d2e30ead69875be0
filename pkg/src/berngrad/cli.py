"""Command-line front end for the gradient-estimator experiments.

One executable, five experiments:

* ``p1`` — train the separable quadratic with projected descent.
* ``p2`` — train the coupled quadratic with log-odds SGD.
* ``subset`` — sparse-regression gate training over replicated datasets.
* ``variance-sweep`` — per-coordinate variance versus a swept boundary mean.
* ``unbiasedness-audit`` — Monte Carlo means versus the enumeration oracle.

Every experiment resolves flag values against a defaults table, writes the
resolved configuration to ``config.json``, and is bitwise deterministic given
``--seed`` (independent of the worker-pool width set by ``BERNGRAD_THREADS``).

Exit codes: 0 success, 1 configuration/usage error, 2 aborted or failed run.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from berngrad.core import RngStream, ThetaVec, float_repr, sigmoid
from berngrad.estimators import ALL_TAGS, STOCHASTIC_TAGS, EstimatorKind
from berngrad.objectives import (gen_regression, p1, p2, subset_objective,
                                 support_metrics)
from berngrad.optim import (PARAM_MODES, OptimizerConfig, Trajectory,
                            TrainingAbort, run_training)
from berngrad.variance import (analytic_var_bitflip1_p1,
                               analytic_var_bitflip1_p2,
                               analytic_var_disarm_p1, audit_unbiasedness,
                               clip_and_smooth, mc_variance)

__all__ = [
    "EXPERIMENTS",
    "DEFAULTS",
    "SWEEP_GRID",
    "VARIANCE_CLIP",
    "CLIPPED_TAGS",
    "SMOOTH_WINDOW",
    "AUDIT_Z_LIMIT",
    "AUDIT_MIN_SAMPLES",
    "UsageError",
    "build_parser",
    "resolve_config",
    "entrypoint",
    "main",
]

EXPERIMENTS = ("p1", "p2", "subset", "variance-sweep", "unbiasedness-audit")

# Reporting conventions for variance trajectories: the two antithetic
# estimators whose variance blows up at boundary means are clipped before
# smoothing; everything is smoothed with the same trailing window.
VARIANCE_CLIP = 10000.0
CLIPPED_TAGS = ("disarm", "reinforce_loo")
SMOOTH_WINDOW = 20

AUDIT_Z_LIMIT = 4.0
AUDIT_MIN_SAMPLES = 1000
AUDIT_ENUM_MAX_K = 8

SWEEP_GRID = (0.01, 0.05, 0.1, 0.3, 0.5)
SWEEP_BASE_THETA = 0.5

_MAIN_FOUR = ("disarm", "reinforce_loo", "bitflip1", "ugc")

# Per-experiment defaults.  ``tau: None`` means "resolve to 1/(2K) once K is
# known"; ``theta_init: None`` means "draw each trial's start from the
# logistic-normal distribution" (sigmoid of a standard normal per coordinate).
DEFAULTS: dict[str, dict] = {
    "p1": dict(
        estimators=_MAIN_FOUR, k=20, target=0.499, lr=0.8, iterations=1000,
        tau=None, trials=10, param_mode="projected-theta", theta_init=None,
        loss_samples=500, variance_every=1, variance_samples=100,
    ),
    "p2": dict(
        estimators=_MAIN_FOUR, k=20, target=0.499, lr=2.0, iterations=1000,
        tau=0.2, trials=10, param_mode="logit-sgd", theta_init=0.2,
        loss_samples=500, variance_every=1, variance_samples=1000,
    ),
    "subset": dict(
        estimators=("disarm", "bitflip1", "ugc", "tugc"),
        n=60, p=200, beta=(3.0, 2.0, 1.5), snr=3.8125, penalty=1.0,
        lr=0.01, iterations=2000, tau=0.33, trials=10,
        param_mode="projected-theta", theta_init=0.1,
        loss_samples=20, variance_every=0, variance_samples=100,
    ),
    "variance-sweep": dict(
        estimators=ALL_TAGS, k=20, target=0.499, tau=None,
        variance_samples=20000,
    ),
    "unbiasedness-audit": dict(
        estimators=STOCHASTIC_TAGS, k=6, target=0.499, tau=None,
        samples=200000,
    ),
}


class UsageError(Exception):
    """Bad flags or flag values; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="berngrad",
        description="Desk-scale experiments for unbiased Bernoulli gradient "
                    "estimators; outputs CSV/JSON for external plotting.")
    parser.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    parser.add_argument("--estimator", action="append", choices=ALL_TAGS,
                        metavar="TAG",
                        help="repeatable; defaults to the experiment's set "
                             f"(one of {', '.join(ALL_TAGS)})")
    parser.add_argument("--K", dest="k", type=int, help="number of coordinates")
    parser.add_argument("--t", dest="target", type=float,
                        help="objective target value")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--iters", dest="iterations", type=int,
                        help="gradient steps per trial")
    parser.add_argument("--tau", type=float,
                        help="boundary threshold for the routed estimator "
                             "(default: experiment-specific, else 1/(2K))")
    parser.add_argument("--snr", type=float,
                        help="signal-to-noise ratio; noise variance is "
                             "beta'beta / snr")
    parser.add_argument("--lambda", dest="penalty", type=float,
                        help="per-coordinate subset penalty")
    parser.add_argument("--trials", type=int,
                        help="independent trials / dataset replicates")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path,
                        help="output directory (required except for the audit)")
    parser.add_argument("--param-mode", dest="param_mode", choices=PARAM_MODES)
    parser.add_argument("--variance-every", dest="variance_every", type=int,
                        help="probe gradient variance every N iterations "
                             "(0 disables)")
    parser.add_argument("--variance-samples", dest="variance_samples", type=int,
                        help="Monte Carlo size of variance probes and sweeps; "
                             "also the audit's draw count")
    parser.add_argument("--loss-samples", dest="loss_samples", type=int,
                        help="Monte Carlo size of per-iteration loss estimates")
    parser.add_argument("--theta-init", dest="theta_init", type=float,
                        help="constant initial mean for every coordinate "
                             "(p1 default: random logistic-normal per trial)")
    parser.add_argument("--save-theta", dest="save_theta", action="store_true",
                        help="add per-coordinate mean columns to trajectory "
                             "CSVs")
    return parser


def _positive(value, name: str):
    if value is None or value <= 0:
        raise UsageError(f"{name} must be positive")
    return value


def _resolve_field(args, defaults: dict, name: str):
    supplied = getattr(args, name, None)
    return defaults[name] if supplied is None else supplied


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge flags over the experiment's defaults table.

    Returns a JSON-serializable dict; everything downstream (including
    ``config.json``) reads only this.
    """
    experiment = args.experiment
    defaults = DEFAULTS[experiment]
    cfg: dict = {"experiment": experiment, "seed": int(args.seed)}

    estimators = args.estimator or list(defaults["estimators"])
    deduped = list(dict.fromkeys(estimators))
    if not deduped:
        raise UsageError("at least one --estimator is required")
    cfg["estimators"] = deduped

    for name in defaults:
        if name == "estimators":
            continue
        cfg[name] = _resolve_field(args, defaults, name)

    if "k" in cfg:
        cfg["k"] = int(_positive(cfg["k"], "--K"))
        if cfg["tau"] is None:
            cfg["tau"] = 1.0 / (2.0 * cfg["k"])
    if cfg.get("tau") is not None and not 0.0 < cfg["tau"] <= 0.5:
        raise UsageError("--tau must lie in (0, 0.5]")

    if experiment in ("p1", "p2", "subset"):
        _positive(cfg["lr"], "--lr")
        if cfg["iterations"] < 0:
            raise UsageError("--iters must be nonnegative")
        cfg["trials"] = int(_positive(cfg["trials"], "--trials"))
        cfg["iterations"] = int(cfg["iterations"])
        cfg["loss_samples"] = int(_positive(cfg["loss_samples"],
                                            "--loss-samples"))
        if cfg["variance_every"] < 0:
            raise UsageError("--variance-every must be nonnegative")
        cfg["variance_every"] = int(cfg["variance_every"])
        cfg["variance_samples"] = int(cfg["variance_samples"])
        cfg["save_theta"] = bool(args.save_theta)
        if cfg["theta_init"] is not None and not 0.0 <= cfg["theta_init"] <= 1.0:
            raise UsageError("--theta-init must lie in [0, 1]")

    if experiment == "subset":
        cfg["n"] = int(_positive(cfg["n"], "n"))
        cfg["p"] = int(_positive(cfg["p"], "p"))
        _positive(cfg["snr"], "--snr")
        if cfg["penalty"] < 0:
            raise UsageError("--lambda must be nonnegative")
        beta = list(cfg["beta"])
        if len(beta) > cfg["p"]:
            raise UsageError("true coefficient vector longer than p")
        cfg["beta"] = beta
        cfg["sigma"] = math.sqrt(
            float(np.dot(beta, beta)) / cfg["snr"])

    if experiment == "variance-sweep":
        cfg["grid"] = list(SWEEP_GRID)
        cfg["base_theta"] = SWEEP_BASE_THETA
        cfg["variance_samples"] = int(cfg["variance_samples"])
        if cfg["variance_samples"] < 2:
            raise UsageError("--variance-samples must be >= 2")

    if experiment == "unbiasedness-audit":
        cfg["samples"] = int(args.variance_samples
                             if args.variance_samples is not None
                             else defaults["samples"])
        if cfg["k"] > AUDIT_ENUM_MAX_K:
            raise UsageError(
                f"audit needs K <= {AUDIT_ENUM_MAX_K} for the enumeration "
                "oracle")
        if cfg["samples"] < AUDIT_MIN_SAMPLES:
            raise UsageError(
                f"audit needs at least {AUDIT_MIN_SAMPLES} draws; standard "
                "errors below that are too wide to certify anything")

    return cfg


# ---------------------------------------------------------------------------
# shared plumbing


def _thread_count() -> int:
    raw = os.environ.get("BERNGRAD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"BERNGRAD_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("BERNGRAD_THREADS must be >= 1")
    return n


def _run_tasks(worker, tasks: list):
    """Run ``worker`` over ``tasks`` and return results in task order.

    Results never depend on the pool width: every task owns its random
    streams and output files, and collection order is the submission order.
    """
    workers = min(_thread_count(), max(len(tasks), 1))
    if workers == 1:
        return [worker(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks))


def _kind(tag: str, tau) -> EstimatorKind:
    if tag == "ugc":
        return EstimatorKind(tag, tau=tau)
    return EstimatorKind(tag)


def _write_config(out: Path, cfg: dict) -> None:
    # The output path itself and the worker-pool width are deliberately not
    # recorded: neither influences the numbers, and replays into different
    # directories must produce identical files.
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stderr_over_rows(matrix: np.ndarray) -> np.ndarray:
    trials = matrix.shape[0]
    if trials < 2:
        return np.zeros(matrix.shape[1])
    return matrix.std(axis=0, ddof=1) / math.sqrt(trials)


def _write_band_csv(path: Path, iters, columns: dict[str, np.ndarray]) -> None:
    """``iter`` plus ``{tag}_mean``/``{tag}_stderr`` pairs, one row per entry."""
    header = ["iter"]
    series = []
    for tag, matrix in columns.items():
        header.extend([f"{tag}_mean", f"{tag}_stderr"])
        series.append(matrix.mean(axis=0))
        series.append(_stderr_over_rows(matrix))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, it in enumerate(iters):
            writer.writerow([it] + [float_repr(s[i]) for s in series])


def _write_aggregate_loss(out: Path, cfg: dict,
                          trajectories: dict[str, list[Trajectory]]) -> None:
    iters = [r.iteration for r in next(iter(trajectories.values()))[0].records]
    columns = {tag: np.stack([t.losses for t in trajs])
               for tag, trajs in trajectories.items()}
    _write_band_csv(out / "aggregate_loss.csv", iters, columns)


def _write_aggregate_variance(out: Path, cfg: dict,
                              trajectories: dict[str, list[Trajectory]]) -> None:
    """Coordinate-mean variance trajectories, clipped/smoothed per convention."""
    first = next(iter(trajectories.values()))[0]
    iters = [r.iteration for r in first.records if r.variance is not None]
    if not iters:
        return
    columns = {}
    for tag, trajs in trajectories.items():
        clip = VARIANCE_CLIP if tag in CLIPPED_TAGS else math.inf
        rows = []
        for traj in trajs:
            series = np.array([r.variance.mean() for r in traj.records
                               if r.variance is not None])
            rows.append(clip_and_smooth(series, clip, SMOOTH_WINDOW))
        columns[tag] = np.stack(rows)
    _write_band_csv(out / "aggregate_variance.csv", iters, columns)


# ---------------------------------------------------------------------------
# training experiments (p1, p2, subset)


def _initial_theta(cfg: dict, trial: int, k: int) -> ThetaVec:
    if cfg["theta_init"] is None:
        # Logistic-normal start, shared across estimators within a trial (the
        # purpose string carries no estimator tag).
        rng = RngStream(seed=cfg["seed"], replicate=trial,
                        purpose=f"{cfg['experiment']}/init")
        return ThetaVec(sigmoid(rng.generator().standard_normal(k)))
    return ThetaVec.full(k, cfg["theta_init"])


def _optimizer_config(cfg: dict, tag: str) -> OptimizerConfig:
    return OptimizerConfig(
        kind=_kind(tag, cfg["tau"]), lr=cfg["lr"],
        iterations=cfg["iterations"], param_mode=cfg["param_mode"],
        loss_samples=cfg["loss_samples"], variance_every=cfg["variance_every"],
        variance_samples=cfg["variance_samples"])


def _train_one(cfg: dict, out: Path, objective, tag: str,
               trial: int) -> Trajectory:
    theta0 = _initial_theta(cfg, trial, objective.dim)
    rng = RngStream(seed=cfg["seed"], replicate=trial,
                    purpose=f"{cfg['experiment']}/{tag}")
    traj = run_training(objective, theta0, _optimizer_config(cfg, tag), rng)
    traj.to_csv(out / f"trajectory_{tag}_trial{trial:02d}.csv",
                include_theta=cfg["save_theta"])
    return traj


def cmd_toy(cfg: dict, out: Path) -> int:
    """Both quadratic experiments; they differ only in objective and defaults."""
    make = p1 if cfg["experiment"] == "p1" else p2

    def worker(task):
        tag, trial = task
        return _train_one(cfg, out, make(cfg["k"], cfg["target"]), tag, trial)

    tasks = [(tag, trial) for tag in cfg["estimators"]
             for trial in range(cfg["trials"])]
    results = _run_tasks(worker, tasks)
    trajectories = {tag: [] for tag in cfg["estimators"]}
    for (tag, _), traj in zip(tasks, results):
        trajectories[tag].append(traj)

    _write_aggregate_loss(out, cfg, trajectories)
    if cfg["variance_every"] > 0:
        _write_aggregate_variance(out, cfg, trajectories)
    for tag in cfg["estimators"]:
        finals = np.array([t.final_loss for t in trajectories[tag]])
        spread = (finals.std(ddof=1) / math.sqrt(finals.size)
                  if finals.size > 1 else 0.0)
        print(f"{cfg['experiment']} {tag}: final loss mean "
              f"{float_repr(finals.mean())} stderr {float_repr(spread)}")
    return 0


def cmd_subset(cfg: dict, out: Path) -> int:
    def worker(task):
        tag, rep = task
        data_rng = RngStream(seed=cfg["seed"], replicate=rep,
                             purpose="subset/data")
        dataset = gen_regression(cfg["n"], cfg["p"], cfg["beta"], cfg["sigma"],
                                 data_rng, penalty=cfg["penalty"])
        objective = subset_objective(dataset)
        traj = _train_one(cfg, out, objective, tag, rep)
        tpr, fpr = support_metrics(traj.final_theta, dataset.true_support)
        return traj, tpr, fpr

    tasks = [(tag, rep) for tag in cfg["estimators"]
             for rep in range(cfg["trials"])]
    results = _run_tasks(worker, tasks)
    trajectories = {tag: [] for tag in cfg["estimators"]}
    rates = {tag: [] for tag in cfg["estimators"]}
    for (tag, _), (traj, tpr, fpr) in zip(tasks, results):
        trajectories[tag].append(traj)
        rates[tag].append((tpr, fpr))

    _write_aggregate_loss(out, cfg, trajectories)
    if cfg["variance_every"] > 0:
        _write_aggregate_variance(out, cfg, trajectories)

    metrics = {}
    for tag in cfg["estimators"]:
        arr = np.array(rates[tag])
        tpr_sd = float(arr[:, 0].std(ddof=1)) if arr.shape[0] > 1 else 0.0
        fpr_sd = float(arr[:, 1].std(ddof=1)) if arr.shape[0] > 1 else 0.0
        metrics[tag] = {
            "tpr_mean": float(arr[:, 0].mean()), "tpr_sd": tpr_sd,
            "fpr_mean": float(arr[:, 1].mean()), "fpr_sd": fpr_sd,
        }
        print(f"subset {tag}: tpr {float_repr(metrics[tag]['tpr_mean'])} "
              f"({float_repr(tpr_sd)}) fpr "
              f"{float_repr(metrics[tag]['fpr_mean'])} ({float_repr(fpr_sd)})")
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# variance sweep


def _sweep_analytic(tag: str, objective_name: str, theta: ThetaVec,
                    cfg: dict) -> float | None:
    j = theta.k - 1
    if tag == "bitflip1" and objective_name == "p1":
        return float(analytic_var_bitflip1_p1(theta.k, cfg["target"]))
    if tag == "bitflip1" and objective_name == "p2":
        return float(analytic_var_bitflip1_p2(theta, cfg["target"])[j])
    if tag == "disarm" and objective_name == "p1":
        return float(analytic_var_disarm_p1(theta, cfg["target"])[j])
    return None


def cmd_variance_sweep(cfg: dict, out: Path) -> int:
    k = cfg["k"]
    n = cfg["variance_samples"]

    def worker(tag: str):
        rows = []
        for objective_name, make in (("p1", p1), ("p2", p2)):
            for i, swept in enumerate(cfg["grid"]):
                theta = ThetaVec(np.array([cfg["base_theta"]] * (k - 1)
                                          + [swept]))
                rng = RngStream(seed=cfg["seed"], replicate=i,
                                purpose=f"sweep/{tag}/{objective_name}")
                report = mc_variance(_kind(tag, cfg["tau"]),
                                     make(k, cfg["target"]), theta, rng, n)
                analytic = _sweep_analytic(tag, objective_name, theta, cfg)
                rows.append([objective_name, float_repr(swept),
                             float_repr(float(report.var[k - 1])),
                             "" if analytic is None else float_repr(analytic),
                             n])
        with open(out / f"sweep_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["objective", "theta_sweep", "mc_var",
                             "analytic_var", "n_samples"])
            writer.writerows(rows)
        return rows

    _run_tasks(worker, list(cfg["estimators"]))
    print(f"variance sweep over theta in {cfg['grid']} written for "
          f"{len(cfg['estimators'])} estimators")
    return 0


# ---------------------------------------------------------------------------
# unbiasedness audit


def cmd_unbiasedness_audit(cfg: dict, out: Path | None) -> int:
    k = cfg["k"]
    theta_rng = RngStream(seed=cfg["seed"], purpose="audit/theta")
    theta = ThetaVec(0.05 + 0.9 * theta_rng.uniforms(k))

    results = []
    for tag in cfg["estimators"]:
        rng = RngStream(seed=cfg["seed"], purpose=f"audit/{tag}")
        results.append(audit_unbiasedness(
            _kind(tag, cfg["tau"]), p2(k, cfg["target"]), theta, rng,
            cfg["samples"]))

    print(f"unbiasedness audit: coupled quadratic, K={k}, "
          f"target={float_repr(cfg['target'])}, n={cfg['samples']} draws")
    print("theta: " + " ".join(float_repr(v) for v in theta.values))
    print(f"{'estimator':<14}{'max|z|':>8}  {'evals':>9}  per-coordinate z")
    all_pass = True
    for res in results:
        ok = res["max_abs_z"] <= AUDIT_Z_LIMIT
        all_pass &= ok
        zs = " ".join(f"{z:+.2f}" for z in res["z"])
        verdict = "" if ok else "  FAIL"
        print(f"{res['tag']:<14}{res['max_abs_z']:>8.3f}  "
              f"{res['evals_total']:>9}  {zs}{verdict}")
    print(f"audit: {'PASS' if all_pass else 'FAIL'} "
          f"(threshold |z| <= {float_repr(AUDIT_Z_LIMIT)})")

    if out is not None:
        payload = {res["tag"]: {
            "mean": [float(v) for v in res["mean"]],
            "exact": [float(v) for v in res["exact"]],
            "se": [float(v) for v in res["se"]],
            "z": [float(v) for v in res["z"]],
            "max_abs_z": res["max_abs_z"],
            "n_samples": res["n_samples"],
            "evals_total": res["evals_total"],
            "pass": bool(res["max_abs_z"] <= AUDIT_Z_LIMIT),
        } for res in results}
        with open(out / "audit.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if all_pass else 2


# ---------------------------------------------------------------------------
# entry point


def _dispatch(cfg: dict, out: Path | None) -> int:
    experiment = cfg["experiment"]
    if experiment == "unbiasedness-audit":
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _write_config(out, cfg)
        return cmd_unbiasedness_audit(cfg, out)
    if out is None:
        raise UsageError(f"--out is required for --experiment {experiment}")
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)
    if experiment in ("p1", "p2"):
        return cmd_toy(cfg, out)
    if experiment == "subset":
        return cmd_subset(cfg, out)
    return cmd_variance_sweep(cfg, out)


def entrypoint(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        _thread_count()  # validate the env var before any work
        return _dispatch(cfg, args.out)
    except TrainingAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(entrypoint())


if __name__ == "__main__":
    main()
