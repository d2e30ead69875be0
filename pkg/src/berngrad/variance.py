"""Gradient-variance laboratory.

Monte Carlo variance of any estimator at a fixed parameter vector, closed-form
per-coordinate variances for the two toy objectives where they exist, and the
post-processing used on aggregate curves (clipping plus a trailing moving
average).  Sampling follows the stream discipline: sample ``i`` of a batch
draws through ``rng.child(purpose=f"s{i}")``, so batches embedded in larger
computations (training probes, sweeps) never share uniforms with their host or
with each other.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from berngrad.core import RngStream, ThetaVec, float_repr
from berngrad.estimators import EstimatorKind, exact_gradient, gradient

__all__ = [
    "VarianceReport",
    "gradient_samples",
    "averaged_gradient_samples",
    "mc_variance",
    "analytic_var_bitflip1_p1",
    "analytic_var_disarm_p1",
    "analytic_var_bitflip1_p2",
    "clip_and_smooth",
    "audit_unbiasedness",
]


@dataclass(frozen=True)
class VarianceReport:
    """Per-coordinate sample moments of one estimator at one parameter vector."""

    tag: str
    mean: np.ndarray
    var: np.ndarray
    n_samples: int
    evals_total: int

    @property
    def k(self) -> int:
        return int(self.var.size)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coord", "mean", "var", "n_samples"])
            for j in range(self.k):
                writer.writerow([j, float_repr(self.mean[j]),
                                 float_repr(self.var[j]), self.n_samples])


def gradient_samples(kind: EstimatorKind, f, theta: ThetaVec, rng: RngStream,
                     n: int, *, endpoint_mode: str = "raise"):
    """``n`` independent estimates as an (n, K) array plus total evals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty((n, theta.k), dtype=np.float64)
    evals = 0
    for i in range(n):
        est = gradient(kind, f, theta, rng.child(purpose=f"s{i}"),
                       endpoint_mode=endpoint_mode)
        out[i] = est.g
        evals += est.evals
    return out, evals


def averaged_gradient_samples(kind: EstimatorKind, f, theta: ThetaVec,
                              rng: RngStream, n: int, replicates: int, *,
                              endpoint_mode: str = "raise"):
    """Each of the ``n`` rows averages ``replicates`` independent estimates.

    Used to trace variance against evaluation budget: averaging r estimates
    divides the variance by r while multiplying the cost by r.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    out = np.zeros((n, theta.k), dtype=np.float64)
    evals = 0
    for i in range(n):
        row_rng = rng.child(purpose=f"s{i}")
        for r in range(replicates):
            est = gradient(kind, f, theta, row_rng.child(purpose=f"r{r}"),
                           endpoint_mode=endpoint_mode)
            out[i] += est.g
            evals += est.evals
        out[i] /= replicates
    return out, evals


def mc_variance(kind: EstimatorKind, f, theta: ThetaVec, rng: RngStream,
                n: int, *, endpoint_mode: str = "raise") -> VarianceReport:
    """Per-coordinate sample variance (ddof=1) over ``n`` independent draws."""
    if n < 2:
        raise ValueError("variance needs n >= 2")
    samples, evals = gradient_samples(kind, f, theta, rng, n,
                                      endpoint_mode=endpoint_mode)
    var = samples.var(axis=0, ddof=1)
    # A constant column has sample variance exactly 0; keep deterministic
    # estimators from reporting mean-rounding dust (~1e-31) instead.
    var[np.all(samples == samples[0], axis=0)] = 0.0
    return VarianceReport(
        tag=kind.tag,
        mean=samples.mean(axis=0),
        var=var,
        n_samples=n,
        evals_total=evals,
    )


# ---------------------------------------------------------------------------
# closed forms for the toy objectives


def analytic_var_bitflip1_p1(k: int, target: float) -> float:
    """Per-coordinate variance of the single-flip estimator on the separable
    quadratic: (K - 1) (1 - 2t)^2, independent of theta.

    Flipping coordinate q always changes the objective by exactly
    (1 - 2t) (1 - 2 z_q), so the estimate is K (1 - 2t) on the drawn
    coordinate and 0 elsewhere; only the coordinate draw contributes variance.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return (k - 1) * (1.0 - 2.0 * target) ** 2


def analytic_var_disarm_p1(theta: ThetaVec, target: float) -> np.ndarray:
    """Per-coordinate variance of the difference-conditioned antithetic
    estimator on the separable quadratic.

    With m_j = min(theta_j, 1 - theta_j), coordinate j differs with
    probability 2 m_j and the conditional value sums independent signed
    contributions, giving

        Var_j = (1 - 2t)^2 [ (1 - 2 m_j) / (2 m_j) + sum_{i != j} m_i / m_j ].

    Defined only for theta strictly inside (0, 1).
    """
    th = theta.values
    if np.any(th <= 0.0) or np.any(th >= 1.0):
        raise ValueError("closed form requires theta strictly inside (0, 1)")
    m = np.minimum(th, 1.0 - th)
    delta_sq = (1.0 - 2.0 * target) ** 2
    total_m = m.sum()
    other = total_m - m
    return delta_sq * ((1.0 - 2.0 * m) / (2.0 * m) + other / m)


def analytic_var_bitflip1_p2(theta: ThetaVec, target: float) -> np.ndarray:
    """Per-coordinate variance of the single-flip estimator on the coupled
    quadratic.

    Flipping coordinate q changes the objective by 2 S_{-q} + 1 - 2t times the
    flip direction, where S_{-q} sums the other bits, so

        Var_j = 4 K sum_{i != j} theta_i (1 - theta_i)
                + (K - 1) (2 sum_{i != j} theta_i + 1 - 2t)^2.
    """
    th = theta.values
    k = th.size
    spread = th * (1.0 - th)
    sum_spread = spread.sum() - spread
    sum_mean = th.sum() - th
    drift = 2.0 * sum_mean + 1.0 - 2.0 * target
    return 4.0 * k * sum_spread + (k - 1) * drift**2


# ---------------------------------------------------------------------------
# curve post-processing


def clip_and_smooth(values, clip_at: float, window: int) -> np.ndarray:
    """Clip from above, then apply a trailing moving average.

    Position i averages the clipped values over the trailing window
    [max(0, i - window + 1), i], so early positions use shorter prefixes and
    the output has the same length as the input.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    v = np.minimum(np.asarray(values, dtype=np.float64), clip_at)
    csum = np.concatenate(([0.0], np.cumsum(v)))
    idx = np.arange(v.size)
    lo = np.maximum(idx - window + 1, 0)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


# ---------------------------------------------------------------------------
# unbiasedness audit


def audit_unbiasedness(kind: EstimatorKind, f, theta: ThetaVec,
                       rng: RngStream, n: int, *,
                       endpoint_mode: str = "raise") -> dict:
    """Compare the sample mean of ``n`` estimates against the enumerated truth.

    Returns per-coordinate mean, exact gradient, standard error, and
    studentized deviation z = (mean - exact) / se.  Requires K small enough
    for exact enumeration.
    """
    exact = exact_gradient(f, theta).g
    samples, evals = gradient_samples(kind, f, theta, rng, n,
                                      endpoint_mode=endpoint_mode)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    # Deviations below float accumulation noise are not evidence of bias, so
    # the studentizing denominator never drops below that scale (this matters
    # for zero-variance estimators, where se is exactly 0).
    floor = np.maximum(se, 1e-14 * (1.0 + np.abs(exact)))
    z = (mean - exact) / floor
    return {
        "tag": kind.tag,
        "n_samples": n,
        "mean": mean,
        "exact": exact,
        "se": se,
        "z": z,
        "max_abs_z": float(np.max(np.abs(z))),
        "evals_total": evals,
    }
