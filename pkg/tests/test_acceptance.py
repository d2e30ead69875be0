"""Desk-scale acceptance battery.

Each test covers one promised guarantee end to end and prints a single
``[ACCEPTANCE] name: PASS|FAIL`` line.  Statistical checks run at fixed seeds,
so results are reproducible bit for bit; runtime bounds are part of the
guarantees and are asserted alongside the numbers.

The whole battery is self-contained: it exercises the library (and, for the
replay check, the command line) without any plotting or external inputs.
"""

import time

import numpy as np

import berngrad.cli as cli
from berngrad.core import RngStream, ThetaVec, sigmoid
from berngrad.estimators import STOCHASTIC_TAGS, EstimatorKind, step_up_count
from berngrad.objectives import (gen_regression, p1, p2, subset_objective,
                                 support_metrics)
from berngrad.optim import OptimizerConfig, run_training
from berngrad.variance import audit_unbiasedness, gradient_samples, mc_variance

SEED = 0
K20, TARGET = 20, 0.499


def _verdict(name: str, ok: bool, detail: str) -> None:
    print(f"\n[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}  ({detail})")
    assert ok, f"{name}: {detail}"


def _kind(tag: str, tau=None) -> EstimatorKind:
    return EstimatorKind(tag, tau=tau) if tag == "ugc" else EstimatorKind(tag)


def test_unbiasedness_battery():
    """All eight stochastic estimators match the enumeration oracle at K=6."""
    start = time.monotonic()
    k, n = 6, 200_000
    theta = ThetaVec(0.05 + 0.9 * RngStream(seed=SEED,
                                            purpose="battery/theta").uniforms(k))
    worst = 0.0
    for tag in STOCHASTIC_TAGS:
        res = audit_unbiasedness(
            _kind(tag, tau=1.0 / (2 * k)), p2(k, TARGET), theta,
            RngStream(seed=SEED, purpose=f"battery/{tag}"), n)
        worst = max(worst, res["max_abs_z"])
    elapsed = time.monotonic() - start
    _verdict("unbiasedness-battery",
             worst <= 4.0 and elapsed < 120.0,
             f"worst |z|={worst:.3f} over {len(STOCHASTIC_TAGS)} estimators, "
             f"{elapsed:.1f}s")


def test_single_flip_analytic_variance():
    """Monte Carlo variance of the single-flip estimator hits 7.6e-5."""
    start = time.monotonic()
    rep = mc_variance(EstimatorKind("bitflip1"), p1(K20, TARGET),
                      ThetaVec.full(K20, 0.3),
                      RngStream(seed=SEED, purpose="flipvar"), 100_000)
    rel = np.abs(rep.var / 7.6e-5 - 1.0)
    elapsed = time.monotonic() - start
    _verdict("single-flip-analytic-variance",
             rel.max() <= 0.05 and elapsed < 30.0,
             f"worst rel dev={rel.max():.4f}, {elapsed:.1f}s")


def test_antithetic_analytic_variance():
    """Coordinate variances of the antithetic estimator hit both pinned values."""
    start = time.monotonic()
    f = p1(K20, TARGET)
    boundary = ThetaVec(np.array([0.05] + [0.5] * 19))
    var_b = mc_variance(EstimatorKind("disarm"), f, boundary,
                        RngStream(seed=SEED, purpose="antivar/a"),
                        100_000).var[0]
    balanced = ThetaVec.full(K20, 0.5)
    var_c = mc_variance(EstimatorKind("disarm"), f, balanced,
                        RngStream(seed=SEED, purpose="antivar/b"), 100_000).var
    rel_b = abs(var_b / 7.96e-4 - 1.0)
    rel_c = np.abs(var_c / 7.6e-5 - 1.0).max()
    elapsed = time.monotonic() - start
    _verdict("antithetic-analytic-variance",
             rel_b <= 0.05 and rel_c <= 0.05 and elapsed < 30.0,
             f"boundary rel={rel_b:.4f}, balanced worst rel={rel_c:.4f}, "
             f"{elapsed:.1f}s")


def test_boundary_crossover():
    """Antithetic variance explodes at boundary means; flip variance does not."""
    f = p1(K20, TARGET)
    var = {}
    for swept in (0.01, 0.05, 0.1, 0.3, 0.5):
        theta = ThetaVec(np.array([0.5] * 19 + [swept]))
        pair = []
        for tag in ("disarm", "bitflip1"):
            rep = mc_variance(
                EstimatorKind(tag), f, theta,
                RngStream(seed=SEED, purpose=f"crossover/{tag}/{swept}"),
                100_000)
            pair.append(float(rep.var[K20 - 1]))
        var[swept] = pair
    exploded = var[0.01][0] > var[0.01][1]  # strict, at the one point <= 1/(2K)
    agreement = abs(var[0.5][0] / var[0.5][1] - 1.0)
    _verdict("boundary-crossover",
             exploded and agreement <= 0.05,
             f"ratio at 0.01={var[0.01][0] / var[0.01][1]:.1f}, "
             f"rel gap at 0.5={agreement:.4f}")


def _dominance_grid(k: int) -> list[np.ndarray]:
    configs = [np.full(k, v) for v in (0.5, 0.3, 0.1, 0.05, 0.02, 0.01)]
    configs.append(np.array([0.01] + [0.5] * (k - 1)))
    configs.append(np.array([0.05] + [0.5] * (k - 1)))
    configs.append(np.array([0.02, 0.98] + [0.5] * (k - 2)))
    configs.append(np.linspace(0.02, 0.98, k))
    configs.append(np.array([0.05, 0.95] * (k // 2)))
    configs.append(np.array([0.01, 0.02, 0.1, 0.3] + [0.5] * (k - 4)))
    return configs


def test_clipping_dominance_grid():
    """Routed clipping never does worse than pure antithetic, coordinate-wise.

    Both estimators read the same coupling streams, so coordinates routed the
    same way cancel exactly and the comparison has no shared-noise slack.
    """
    start = time.monotonic()
    f = p1(K20, TARGET)
    tau = 1.0 / (2 * K20)
    n = 30_000
    worst = -np.inf
    grid = _dominance_grid(K20)
    for i, values in enumerate(grid):
        theta = ThetaVec(values)
        base = RngStream(seed=SEED, purpose=f"dominance/{i}")
        s_route, _ = gradient_samples(_kind("ugc", tau=tau), f, theta, base, n)
        s_anti, _ = gradient_samples(_kind("disarm"), f, theta, base, n)
        v_route = s_route.var(axis=0, ddof=1)
        v_anti = s_anti.var(axis=0, ddof=1)
        se = np.sqrt(
            (np.mean((s_route - s_route.mean(0)) ** 4, axis=0)
             - v_route ** 2) / n
            + (np.mean((s_anti - s_anti.mean(0)) ** 4, axis=0)
               - v_anti ** 2) / n)
        # identically-routed coordinates give exactly zero difference and
        # exactly zero allowance, which satisfies the bound on its own
        worst = max(worst, float(np.max((v_route - v_anti) - 3.0 * se)))
    elapsed = time.monotonic() - start
    _verdict("clipping-dominance-grid",
             worst <= 0.0 and elapsed < 120.0,
             f"{len(grid)}-point grid, worst excess={worst:+.2e}, "
             f"{elapsed:.1f}s")


def test_separable_convergence():
    """Every main estimator reaches the separable optimum from random starts."""
    start = time.monotonic()
    optimum = K20 * TARGET * TARGET  # 4.98002
    bound = 1e-3 * K20
    gaps = {}
    for tag in ("disarm", "reinforce_loo", "bitflip1", "ugc"):
        cfg = OptimizerConfig(kind=_kind(tag, tau=1.0 / (2 * K20)), lr=0.8,
                              iterations=1000, loss_samples=1)
        finals = []
        for trial in range(10):
            init = RngStream(seed=SEED, replicate=trial, purpose="p1/init")
            theta0 = ThetaVec(sigmoid(init.generator().standard_normal(K20)))
            rng = RngStream(seed=SEED, replicate=trial, purpose=f"p1/{tag}")
            traj = run_training(p1(K20, TARGET), theta0, cfg, rng)
            finals.append(traj.records[-1].loss_exact)
        gaps[tag] = float(np.mean(finals) - optimum)
    elapsed = time.monotonic() - start
    worst = max(gaps.values())
    _verdict("separable-convergence",
             all(abs(g) <= bound for g in gaps.values()) and elapsed < 300.0,
             f"worst mean gap={worst:.2e} (bound {bound}), {elapsed:.1f}s")


def test_coupled_separation():
    """Routed estimators solve the coupled objective; pure antithetic fails."""
    start = time.monotonic()
    optimum = TARGET * TARGET  # 0.249001
    finals = {}
    for tag in ("ugc", "bitflip1", "disarm"):
        cfg = OptimizerConfig(kind=_kind(tag, tau=0.2), lr=2.0,
                              iterations=1000, param_mode="logit-sgd",
                              loss_samples=1)
        finals[tag] = np.array([
            run_training(p2(K20, TARGET), ThetaVec.full(K20, 0.2), cfg,
                         RngStream(seed=SEED, replicate=trial,
                                   purpose=f"p2/{tag}")).records[-1].loss_exact
            for trial in range(10)])
    hits = {tag: int(np.sum(np.abs(finals[tag] - optimum) <= 0.01))
            for tag in ("ugc", "bitflip1")}
    medians = {tag: float(np.median(finals[tag])) for tag in finals}
    elapsed = time.monotonic() - start
    ok = (hits["ugc"] >= 8 and hits["bitflip1"] >= 8
          and medians["ugc"] <= medians["disarm"] and elapsed < 300.0)
    _verdict("coupled-separation", ok,
             f"hits ugc={hits['ugc']}/10 flip={hits['bitflip1']}/10, medians "
             f"ugc={medians['ugc']:.4f} vs anti={medians['disarm']:.3f}, "
             f"{elapsed:.1f}s")


def test_subset_recovery():
    """Support recovery rates over ten replicated sparse-regression datasets."""
    start = time.monotonic()
    sigma = 2.0  # beta'beta = 15.25 at signal-to-noise ratio 3.8125
    rates = {}
    for tag in ("ugc", "bitflip1", "disarm"):
        cfg = OptimizerConfig(kind=_kind(tag, tau=0.33), lr=0.01,
                              iterations=2000, loss_samples=1)
        tprs, fprs = [], []
        for rep in range(10):
            data_rng = RngStream(seed=SEED, replicate=rep,
                                 purpose="subset/data")
            dataset = gen_regression(60, 200, (3.0, 2.0, 1.5), sigma,
                                     data_rng, penalty=1.0)
            rng = RngStream(seed=SEED, replicate=rep, purpose=f"subset/{tag}")
            traj = run_training(subset_objective(dataset),
                                ThetaVec.full(200, 0.1), cfg, rng)
            tpr, fpr = support_metrics(traj.final_theta, dataset.true_support)
            tprs.append(tpr)
            fprs.append(fpr)
        rates[tag] = (float(np.mean(tprs)), float(np.mean(fprs)))
    elapsed = time.monotonic() - start
    ok = (rates["ugc"][0] >= 0.9 and rates["ugc"][1] <= 0.02
          and rates["bitflip1"][0] >= 0.9 and rates["bitflip1"][1] <= 0.02
          and rates["disarm"][0] <= 0.85 and elapsed < 900.0)
    _verdict("subset-recovery", ok,
             f"ugc tpr/fpr={rates['ugc'][0]:.2f}/{rates['ugc'][1]:.4f}, "
             f"flip={rates['bitflip1'][0]:.2f}/{rates['bitflip1'][1]:.4f}, "
             f"anti tpr={rates['disarm'][0]:.2f}, {elapsed:.1f}s")


def test_stepup_count_rule():
    """The boundary-count rule on its worked example and edge cases."""
    worked = step_up_count(ThetaVec(np.array([0.05, 0.10, 0.30, 0.45])))
    all_half = step_up_count(ThetaVec.full(4, 0.5))
    pair = step_up_count(ThetaVec.full(2, 0.49))
    ok = worked == 2 and all_half == 1 and pair == 1
    _verdict("stepup-count-rule", ok,
             f"worked={worked} (want 2), balanced={all_half} (want 1), "
             f"pair={pair} (want 1)")


def test_cli_deterministic_replay(tmp_path):
    """Identical seeds reproduce every output file bit for bit."""
    def run_twice(label, *argv):
        paths = []
        for sub in ("a", "b"):
            out = tmp_path / f"{label}_{sub}"
            code = cli.entrypoint(list(argv) + ["--out", str(out)])
            assert code == 0, f"{label} exited {code}"
            paths.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        return paths[0] == paths[1]

    train_ok = run_twice(
        "train", "--experiment", "p1", "--K", "4", "--iters", "5",
        "--trials", "2", "--estimator", "disarm", "--estimator", "ugc",
        "--variance-every", "2", "--variance-samples", "6",
        "--loss-samples", "3")
    sweep_ok = run_twice(
        "sweep", "--experiment", "variance-sweep", "--K", "3",
        "--estimator", "disarm", "--estimator", "bitflip1",
        "--variance-samples", "300")
    _verdict("cli-deterministic-replay", train_ok and sweep_ok,
             f"training files identical={train_ok}, "
             f"sweep files identical={sweep_ok}")
