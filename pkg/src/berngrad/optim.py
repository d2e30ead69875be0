"""Stochastic-gradient training loops over Bernoulli parameters.

Three parameterizations: direct mean-space descent with projection onto
[0, 1], plain SGD on log-odds, and Adam on log-odds.  Log-odds iterates are
clamped to [-36, 36]; beyond that float64 sigmoid saturates to exactly 0 or 1,
which the endpoint-sensitive estimators reject and which no finite step could
leave again.

Stream discipline: ``run_training`` owns the ``iteration`` key dimension.  At
iteration ``it`` it derives ``child(iteration=it, purpose="grad")`` for the
estimator, ``purpose="loss"`` for Monte Carlo loss evaluation, and
``purpose="variance"`` for optional variance probes, so no two consumers ever
share a stream and a caller-supplied replicate index keeps whole runs
independent.

Budget accounting: ``evals_cum`` counts objective evaluations consumed by the
gradient estimator only.  Loss estimates and variance probes are diagnostics;
their evaluations are excluded so that loss-versus-budget curves compare
estimators fairly.

Every record carries a Monte Carlo loss estimate; objectives with a closed
form additionally get the exact expected loss, so downstream plots can show
both.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from berngrad.core import RngStream, ThetaVec, float_repr, logit, sigmoid
from berngrad.estimators import EstimatorKind, gradient
from berngrad.variance import mc_variance

__all__ = [
    "PARAM_MODES",
    "LOGIT_CLAMP",
    "OptimizerConfig",
    "AdamState",
    "TrainingAbort",
    "TrajectoryRecord",
    "Trajectory",
    "projected_step",
    "logit_step",
    "adam_logit_step",
    "estimate_loss",
    "run_training",
]

PARAM_MODES = ("projected-theta", "logit-sgd", "logit-adam")

# sigmoid(36) is the largest representable mean strictly below 1; see module
# docstring.
LOGIT_CLAMP = 36.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Everything a training run needs besides the objective and start point."""

    kind: EstimatorKind
    lr: float
    iterations: int
    param_mode: str = "projected-theta"
    endpoint_mode: str = "freeze"
    loss_samples: int = 500
    variance_every: int = 0
    variance_samples: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.param_mode not in PARAM_MODES:
            raise ValueError(f"param_mode must be one of {PARAM_MODES}")
        if self.loss_samples < 1:
            raise ValueError("loss_samples must be >= 1")
        if self.variance_every < 0:
            raise ValueError("variance_every must be nonnegative")
        if self.variance_samples < 2:
            raise ValueError("variance_samples must be >= 2")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ValueError("adam_eps must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators and the bias-correction step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, k: int) -> "AdamState":
        return cls(m=np.zeros(k), v=np.zeros(k))


class TrainingAbort(RuntimeError):
    """Training stopped early; ``iteration`` is where it happened."""

    def __init__(self, iteration: int, reason: str):
        super().__init__(f"training aborted at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason


@dataclass(eq=False)
class TrajectoryRecord:
    """State of a run when reaching one iterate.

    ``loss_mc`` is a fresh-sample Monte Carlo estimate of the expected loss at
    the current parameters, ``loss_exact`` the closed form when the objective
    provides one (``None`` otherwise).  ``evals_cum`` is the estimator budget
    spent to reach this point.  ``variance`` is the per-coordinate gradient
    variance estimate on probe iterations, ``None`` otherwise.
    """

    iteration: int
    loss_mc: float
    loss_exact: float | None
    evals_cum: int
    theta: np.ndarray
    variance: np.ndarray | None

    @property
    def loss(self) -> float:
        """Best available loss figure: exact when present, else Monte Carlo."""
        return self.loss_mc if self.loss_exact is None else self.loss_exact


@dataclass
class Trajectory:
    estimator: str
    param_mode: str
    records: list[TrajectoryRecord]
    final_theta: ThetaVec

    @property
    def losses(self) -> np.ndarray:
        """Per-iteration loss, preferring the closed form when available."""
        return np.array([r.loss for r in self.records])

    @property
    def losses_mc(self) -> np.ndarray:
        return np.array([r.loss_mc for r in self.records])

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([r.theta for r in self.records])

    def to_csv(self, path, *, include_theta: bool = False) -> None:
        """One row per record.

        Columns: ``iter``, ``loss_mc``, ``loss_exact`` (only for objectives
        with a closed form), ``evals_cum``, then ``theta_0..theta_{K-1}`` when
        requested and ``var_0..var_{K-1}`` when any probe ran (blank on rows
        without a probe).
        """
        k = self.final_theta.k
        has_exact = bool(self.records) and self.records[0].loss_exact is not None
        has_var = any(r.variance is not None for r in self.records)
        header = ["iter", "loss_mc"]
        if has_exact:
            header.append("loss_exact")
        header.append("evals_cum")
        if include_theta:
            header.extend(f"theta_{j}" for j in range(k))
        if has_var:
            header.extend(f"var_{j}" for j in range(k))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.records:
                row = [r.iteration, float_repr(r.loss_mc)]
                if has_exact:
                    row.append(float_repr(r.loss_exact))
                row.append(r.evals_cum)
                if include_theta:
                    row.extend(float_repr(v) for v in r.theta)
                if has_var:
                    if r.variance is None:
                        row.extend([""] * k)
                    else:
                        row.extend(float_repr(v) for v in r.variance)
                writer.writerow(row)


# ---------------------------------------------------------------------------
# parameter updates


def projected_step(theta_values: np.ndarray, g: np.ndarray,
                   lr: float) -> np.ndarray:
    """Descend in mean space and project back onto [0, 1]."""
    return np.clip(theta_values - lr * g, 0.0, 1.0)


def logit_step(phi_values: np.ndarray, g_theta: np.ndarray,
               lr: float) -> np.ndarray:
    """Descend in log-odds space; chain rule multiplies by theta (1 - theta)."""
    th = sigmoid(phi_values)
    g_phi = g_theta * th * (1.0 - th)
    return np.clip(phi_values - lr * g_phi, -LOGIT_CLAMP, LOGIT_CLAMP)


def adam_logit_step(phi_values: np.ndarray, g_theta: np.ndarray, lr: float,
                    state: AdamState, *, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected adaptive step on log-odds; mutates ``state``."""
    th = sigmoid(phi_values)
    g_phi = g_theta * th * (1.0 - th)
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g_phi
    state.v = beta2 * state.v + (1.0 - beta2) * g_phi * g_phi
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    step = lr * m_hat / (np.sqrt(v_hat) + eps)
    return np.clip(phi_values - step, -LOGIT_CLAMP, LOGIT_CLAMP)


# ---------------------------------------------------------------------------
# loss and training


def estimate_loss(f, theta: ThetaVec, rng: RngStream, n: int) -> float:
    """Monte Carlo estimate of E[f(z)] from ``n`` fresh draws.

    Draws use the same bit convention as the estimators (z = 1 exactly when
    1 - u < theta), so a replayed stream reproduces the estimate bitwise.
    """
    if n < 1:
        raise ValueError("loss sample count must be >= 1")
    th = theta.values
    u = rng.uniforms(n * th.size).reshape(n, th.size)
    bits = ((1.0 - u) < th).astype(np.int8)
    return float(np.mean(f.evaluate_many(bits)))


def run_training(f, theta0: ThetaVec, config: OptimizerConfig,
                 rng: RngStream) -> Trajectory:
    """Run the configured loop from ``theta0`` and record the trajectory.

    Raises :class:`TrainingAbort` when the estimator rejects the current
    parameters (endpoint handling in "raise" mode) or produces a non-finite
    estimate.
    """
    th = theta0.values.copy()
    logit_mode = config.param_mode != "projected-theta"
    phi = None
    adam = None
    if logit_mode:
        if np.any(th <= 0.0) or np.any(th >= 1.0):
            raise ValueError(
                "log-odds parameterizations need theta0 strictly inside (0, 1)")
        phi = np.clip(logit(th), -LOGIT_CLAMP, LOGIT_CLAMP)
        th = sigmoid(phi)
        if config.param_mode == "logit-adam":
            adam = AdamState.zeros(th.size)

    records: list[TrajectoryRecord] = []
    evals_cum = 0

    def observe(theta: ThetaVec, it: int) -> TrajectoryRecord:
        loss_mc = estimate_loss(f, theta,
                                rng.child(iteration=it, purpose="loss"),
                                config.loss_samples)
        exact = f.exact_expected_loss(theta)
        variance = None
        if config.variance_every and it % config.variance_every == 0:
            report = mc_variance(config.kind, f, theta,
                                 rng.child(iteration=it, purpose="variance"),
                                 config.variance_samples,
                                 endpoint_mode=config.endpoint_mode)
            variance = report.var
        return TrajectoryRecord(
            iteration=it, loss_mc=loss_mc,
            loss_exact=None if exact is None else float(exact),
            evals_cum=evals_cum, theta=theta.values.copy(), variance=variance)

    for it in range(config.iterations):
        theta = ThetaVec(th)
        record = observe(theta, it)
        try:
            grad = gradient(config.kind, f, theta,
                            rng.child(iteration=it, purpose="grad"),
                            endpoint_mode=config.endpoint_mode)
        except ValueError as exc:
            raise TrainingAbort(it, str(exc)) from exc
        if not np.all(np.isfinite(grad.g)):
            raise TrainingAbort(it, "non-finite gradient estimate")
        records.append(record)
        evals_cum += grad.evals
        if config.param_mode == "projected-theta":
            th = projected_step(th, grad.g, config.lr)
        elif config.param_mode == "logit-sgd":
            phi = logit_step(phi, grad.g, config.lr)
            th = sigmoid(phi)
        else:
            phi = adam_logit_step(phi, grad.g, config.lr, adam,
                                  beta1=config.adam_beta1,
                                  beta2=config.adam_beta2,
                                  eps=config.adam_eps)
            th = sigmoid(phi)

    final_theta = ThetaVec(th)
    records.append(observe(final_theta, config.iterations))
    return Trajectory(estimator=config.kind.label, param_mode=config.param_mode,
                      records=records, final_theta=final_theta)
