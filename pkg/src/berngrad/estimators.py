"""Single-sample gradient estimators for E_{z ~ prod Bern(theta)}[f(z)].

Every estimator returns a :class:`GradEstimate` whose ``evals`` field reports
the number of objective evaluations the call issued.  Budgets are part of the
contract and asserted on every call:

    reinforce 1; arm / disarm / reinforce_loo / bitflip1 exactly 2;
    bitflip_k K+1; ugc <= 3; tugc <= 4; exact 2^K.

Each estimator splits into a sampling step and a deterministic kernel
(``*_from_draw`` / ``*_from_sample``).  The kernels are public so tests can
replay chosen draws; the top-level functions draw through the stream
discipline (purpose "coupling" for coordinate uniforms, "coordinate" for the
categorical index) so a shared base stream yields the same coupled draw in
every member of the antithetic family.

Estimators built on the score or the uniform difference (reinforce, arm,
reinforce_loo) are undefined where theta_j is exactly 0 or 1 and reject such
inputs by default; ``endpoint_mode="freeze"`` instead reports a zero gradient
for exactly-endpoint coordinates (their bits are a.s. constant, so the
remaining coordinates stay unbiased), which is what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from berngrad.core import (
    BinaryVec,
    CoupledDraw,
    GradEstimate,
    RngStream,
    ThetaVec,
    sample_coupled,
)

__all__ = [
    "EstimatorKind",
    "STOCHASTIC_TAGS",
    "ALL_TAGS",
    "exact_gradient",
    "reinforce",
    "arm",
    "disarm",
    "reinforce_loo",
    "bitflip1",
    "bitflip_k",
    "ugc",
    "tugc",
    "gradient",
    "step_up_count",
    "reinforce_from_sample",
    "arm_from_draw",
    "disarm_from_draw",
    "reinforce_loo_from_samples",
    "bitflip1_from_sample",
    "bitflip_k_from_sample",
    "ugc_from_draw",
    "tugc_from_draw",
    "ENUMERATION_LIMIT",
]

# exact_gradient refuses K beyond this: 2^K evaluations and a 2^K-entry table.
ENUMERATION_LIMIT = 25

STOCHASTIC_TAGS = (
    "reinforce",
    "arm",
    "disarm",
    "reinforce_loo",
    "bitflip1",
    "bitflip_k",
    "ugc",
    "tugc",
)
ALL_TAGS = ("exact",) + STOCHASTIC_TAGS

_ENDPOINT_MODES = ("raise", "freeze")


@dataclass(frozen=True)
class EstimatorKind:
    """Estimator family tag plus the UGC routing threshold where applicable."""

    tag: str
    tau: float | None = None

    def __post_init__(self) -> None:
        if self.tag not in ALL_TAGS:
            raise ValueError(f"unknown estimator tag {self.tag!r}")
        if self.tag == "ugc":
            if self.tau is None:
                raise ValueError("ugc requires a routing threshold tau")
            if not (0.0 < self.tau <= 0.5):
                raise ValueError("tau must lie in (0, 0.5]")
        elif self.tau is not None:
            raise ValueError(f"{self.tag} does not take tau")

    @property
    def label(self) -> str:
        return self.tag


def _check_theta(theta: ThetaVec) -> np.ndarray:
    if not isinstance(theta, ThetaVec):
        raise TypeError("theta must be a ThetaVec")
    return theta.values


def _endpoint_mask(th: np.ndarray, endpoint_mode: str, who: str) -> np.ndarray:
    """Interior mask; raises (mode 'raise') if any coordinate sits at 0 or 1."""
    if endpoint_mode not in _ENDPOINT_MODES:
        raise ValueError(f"endpoint_mode must be one of {_ENDPOINT_MODES}")
    interior = (th > 0.0) & (th < 1.0)
    if endpoint_mode == "raise" and not interior.all():
        raise ValueError(f"{who} is undefined where theta is exactly 0 or 1")
    return interior


def _sample_bits(th: np.ndarray, rng: RngStream) -> np.ndarray:
    u = rng.uniforms(th.size)
    return ((1.0 - u) < th).astype(np.int8)


# ---------------------------------------------------------------------------
# exact enumeration oracle


def exact_gradient(f, theta: ThetaVec) -> GradEstimate:
    """Exact gradient by enumerating all 2^K configurations.

    g_j = E[f | z_j = 1] - E[f | z_j = 0], computed by contracting the table
    of objective values against each coordinate's marginal.  Handles theta
    entries at exactly 0 or 1 (the conditional laws of the other coordinates
    are unaffected).  Consumes exactly 2^K evaluations; K <= 25 enforced.
    """
    th = _check_theta(theta)
    k = th.size
    if k > ENUMERATION_LIMIT:
        raise ValueError(f"exact_gradient supports K <= {ENUMERATION_LIMIT}, got {k}")
    n = 1 << k
    shifts = np.arange(k, dtype=np.uint32)
    values = np.empty(n, dtype=np.float64)
    chunk = 1 << 16
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        codes = np.arange(start, stop, dtype=np.uint32)
        bits = ((codes[:, None] >> shifts) & 1).astype(np.int8)
        values[start:stop] = _evaluate_block(f, bits)
    # Axis j of the reshaped table indexes bit k-1-j; contract every axis
    # except the target coordinate's with its marginal [1-theta_i, theta_i].
    table = values.reshape((2,) * k)
    marginals = [np.array([1.0 - t, t]) for t in th]
    g = np.empty(k, dtype=np.float64)
    for j in range(k):
        tj = table
        for axis in range(k - 1, -1, -1):
            coord = k - 1 - axis
            if coord == j:
                continue
            tj = np.tensordot(tj, marginals[coord], axes=([axis], [0]))
        g[j] = tj[1] - tj[0]
    return GradEstimate(g=g, evals=n)


def _evaluate_block(f, bits: np.ndarray) -> np.ndarray:
    """Evaluate f row-wise; uses the objective's batch path when offered."""
    many = getattr(f, "evaluate_many", None)
    if many is not None:
        return np.asarray(many(bits), dtype=np.float64)
    return np.array([float(f(BinaryVec._wrap(row))) for row in bits])


# ---------------------------------------------------------------------------
# score-function and antithetic estimators


def reinforce_from_sample(f, z: BinaryVec, theta: ThetaVec, *,
                          endpoint_mode: str = "raise") -> GradEstimate:
    """f(z) times the Bernoulli score z_j/theta_j - (1-z_j)/(1-theta_j)."""
    th = _check_theta(theta)
    interior = _endpoint_mask(th, endpoint_mode, "reinforce")
    fz = float(f(z))
    bits = z.bits
    safe = np.where(interior, th, 0.5)
    score = np.where(interior, bits / safe - (1 - bits) / (1.0 - safe), 0.0)
    return GradEstimate(g=fz * score, evals=1)


def reinforce(f, theta: ThetaVec, rng: RngStream, *,
              endpoint_mode: str = "raise") -> GradEstimate:
    """Single-sample score-function estimator.  evals = 1."""
    th = _check_theta(theta)
    _endpoint_mask(th, endpoint_mode, "reinforce")
    z = BinaryVec._wrap(_sample_bits(th, rng.child(purpose="coupling")))
    return reinforce_from_sample(f, z, theta, endpoint_mode=endpoint_mode)


def arm_from_draw(f, draw: CoupledDraw, theta: ThetaVec, *,
                  endpoint_mode: str = "raise") -> GradEstimate:
    """(f(z) - f(z~)) (u_j - 1/2) / (theta_j (1 - theta_j)) per coordinate."""
    th = _check_theta(theta)
    interior = _endpoint_mask(th, endpoint_mode, "arm")
    fz = float(f(draw.z))
    fzt = float(f(draw.z_tilde))
    safe = np.where(interior, th * (1.0 - th), 1.0)
    g = np.where(interior, (fz - fzt) * (draw.u - 0.5) / safe, 0.0)
    return GradEstimate(g=g, evals=2)


def arm(f, theta: ThetaVec, rng: RngStream, *,
        endpoint_mode: str = "raise") -> GradEstimate:
    """Antithetic estimator in the shared-uniform form.  evals = 2."""
    th = _check_theta(theta)
    _endpoint_mask(th, endpoint_mode, "arm")
    draw = sample_coupled(theta, rng.child(purpose="coupling"))
    return arm_from_draw(f, draw, theta, endpoint_mode=endpoint_mode)


def disarm_from_draw(f, draw: CoupledDraw, theta: ThetaVec) -> GradEstimate:
    """Antithetic estimator conditioned on the pair disagreeing.

    g_j = 1/2 (f(z) - f(z~)) (-1)^{z~_j} / min(theta_j, 1-theta_j) where the
    pair differs, 0 elsewhere.  Coordinates at theta in {0, 1} never differ,
    so their output is exactly 0 with no division performed.
    """
    th = _check_theta(theta)
    fz = float(f(draw.z))
    fzt = float(f(draw.z_tilde))
    differ = draw.differing
    m = np.minimum(th, 1.0 - th)
    safe = np.where(differ, m, 1.0)  # differ implies m > 0
    sign = 1.0 - 2.0 * draw.z_tilde.bits
    g = np.where(differ, 0.5 * (fz - fzt) * sign / safe, 0.0)
    return GradEstimate(g=g, evals=2)


def disarm(f, theta: ThetaVec, rng: RngStream) -> GradEstimate:
    """Difference-conditioned antithetic estimator.  evals = 2."""
    draw = sample_coupled(theta, rng.child(purpose="coupling"))
    return disarm_from_draw(f, draw, theta)


def reinforce_loo_from_samples(f, z1: BinaryVec, z2: BinaryVec, theta: ThetaVec, *,
                               endpoint_mode: str = "raise") -> GradEstimate:
    """Two-sample leave-one-out control variate.

    (1 / (2 theta_j (1-theta_j))) * [(f(z1)-f(z2))(z1_j - theta_j)
                                     + (f(z2)-f(z1))(z2_j - theta_j)].
    """
    th = _check_theta(theta)
    interior = _endpoint_mask(th, endpoint_mode, "reinforce_loo")
    f1 = float(f(z1))
    f2 = float(f(z2))
    safe = np.where(interior, 2.0 * th * (1.0 - th), 1.0)
    num = (f1 - f2) * (z1.bits - th) + (f2 - f1) * (z2.bits - th)
    g = np.where(interior, num / safe, 0.0)
    return GradEstimate(g=g, evals=2)


def reinforce_loo(f, theta: ThetaVec, rng: RngStream, *,
                  endpoint_mode: str = "raise") -> GradEstimate:
    """Leave-one-out estimator from two independent draws.  evals = 2."""
    th = _check_theta(theta)
    _endpoint_mask(th, endpoint_mode, "reinforce_loo")
    u = rng.child(purpose="coupling").uniforms(2 * th.size).reshape(2, th.size)
    z1 = BinaryVec._wrap(((1.0 - u[0]) < th).astype(np.int8))
    z2 = BinaryVec._wrap(((1.0 - u[1]) < th).astype(np.int8))
    return reinforce_loo_from_samples(f, z1, z2, theta, endpoint_mode=endpoint_mode)


# ---------------------------------------------------------------------------
# coordinate-flip estimators


def _flip(bits: np.ndarray, j: int) -> BinaryVec:
    out = bits.copy()
    out[j] = 1 - out[j]
    return BinaryVec._wrap(out)


def bitflip1_from_sample(f, z: BinaryVec, q: int, theta: ThetaVec) -> GradEstimate:
    """Randomized single-coordinate difference.

    Coordinate q gets K * (-1)^{z_q} * (f(z with q flipped) - f(z)); all other
    coordinates get 0.  The value does not involve theta, so it is defined at
    theta entries of exactly 0 or 1.
    """
    th = _check_theta(theta)
    k = th.size
    if not (0 <= q < k):
        raise ValueError("q out of range")
    fz = float(f(z))
    fq = float(f(_flip(z.bits, q)))
    g = np.zeros(k, dtype=np.float64)
    g[q] = k * (1.0 - 2.0 * z.bits[q]) * (fq - fz)
    return GradEstimate(g=g, evals=2)


def bitflip1(f, theta: ThetaVec, rng: RngStream) -> GradEstimate:
    """One-coordinate flip estimator with uniformly random coordinate.  evals = 2."""
    th = _check_theta(theta)
    z = BinaryVec._wrap(_sample_bits(th, rng.child(purpose="coupling")))
    q = rng.child(purpose="coordinate").coordinate_index(th.size)
    return bitflip1_from_sample(f, z, q, theta)


def bitflip_k_from_sample(f, z: BinaryVec, theta: ThetaVec) -> GradEstimate:
    """All-coordinate flip estimator: g_j = f(z with z_j := 1) - f(z with z_j := 0).

    One of the two hard-coded vectors per coordinate equals z itself, so the
    whole vector costs K + 1 evaluations.
    """
    th = _check_theta(theta)
    k = th.size
    fz = float(f(z))
    g = np.empty(k, dtype=np.float64)
    for j in range(k):
        fj = float(f(_flip(z.bits, j)))
        g[j] = (1.0 - 2.0 * z.bits[j]) * (fj - fz)
    return GradEstimate(g=g, evals=k + 1)


def bitflip_k(f, theta: ThetaVec, rng: RngStream) -> GradEstimate:
    """All-coordinate flip estimator.  evals = K + 1."""
    th = _check_theta(theta)
    z = BinaryVec._wrap(_sample_bits(th, rng.child(purpose="coupling")))
    return bitflip_k_from_sample(f, z, theta)


# ---------------------------------------------------------------------------
# routed combinations


def ugc_from_draw(f, draw: CoupledDraw, q: int, theta: ThetaVec,
                  tau: float) -> GradEstimate:
    """Per-coordinate router between the flip and antithetic estimators.

    Coordinates with min(theta_j, 1-theta_j) <= tau take the bitflip1 value
    (nonzero only when the shared categorical q lands on them); the rest take
    the disarm value from the same coupled draw.  The inclusive comparison
    keeps the knife-edge coordinate on the side whose variance bound covers
    equality, and it is load-bearing for logit-mode runs initialized exactly
    at the threshold.
    """
    th = _check_theta(theta)
    if not (0.0 < tau <= 0.5):
        raise ValueError("tau must lie in (0, 0.5]")
    k = th.size
    if not (0 <= q < k):
        raise ValueError("q out of range")
    m = np.minimum(th, 1.0 - th)
    boundary = m <= tau
    g = np.zeros(k, dtype=np.float64)
    evals = 1
    fz = float(f(draw.z))
    if not boundary.all():
        fzt = float(f(draw.z_tilde))
        evals += 1
        differ = draw.differing & ~boundary
        safe = np.where(differ, m, 1.0)
        sign = 1.0 - 2.0 * draw.z_tilde.bits
        g = np.where(differ, 0.5 * (fz - fzt) * sign / safe, 0.0)
    if boundary[q]:
        fq = float(f(_flip(draw.z.bits, q)))
        evals += 1
        g[q] = k * (1.0 - 2.0 * draw.z.bits[q]) * (fq - fz)
    est = GradEstimate(g=g, evals=evals)
    assert est.evals <= 3
    return est


def ugc(f, theta: ThetaVec, tau: float, rng: RngStream) -> GradEstimate:
    """Threshold-routed combination of bitflip1 and disarm.  evals <= 3.

    Both routes consume the same coupled draw; as tau -> 0+ the output matches
    disarm on that draw exactly.
    """
    draw = sample_coupled(theta, rng.child(purpose="coupling"))
    q = rng.child(purpose="coordinate").coordinate_index(theta.k)
    return ugc_from_draw(f, draw, q, theta, tau)


def step_up_count(theta: ThetaVec) -> int:
    """Size of the adaptive flip set: largest T with m_(T) <= 1/(2T).

    m_(T) is the T-th smallest of min(theta_j, 1-theta_j).  m_(1) <= 1/2
    always holds, so the count is at least 1; the sorted sequence is
    nondecreasing against a decreasing bound, so the feasible set is an
    initial segment and the scan can stop at the first failure.
    """
    m = np.minimum(theta.values, 1.0 - theta.values)
    m_sorted = np.sort(m)
    count = 0
    for t in range(1, theta.k + 1):
        if m_sorted[t - 1] <= 0.5 / t:
            count = t
        else:
            break
    return count


def tugc_from_draw(f, draw: CoupledDraw, pick: int, theta: ThetaVec) -> GradEstimate:
    """Adaptive-threshold router with a step-up flip set.

    The T = step_up_count(theta) coordinates with the smallest
    min(theta_j, 1-theta_j) form the flip set; the pick-th smallest gets
    T * (f(z with that bit := 1) - f(z with that bit := 0)), the other T-1 get
    0, and the remaining coordinates get disarm values from the same draw.
    """
    th = _check_theta(theta)
    k = th.size
    m = np.minimum(th, 1.0 - th)
    order = np.argsort(m, kind="stable")
    t_hat = step_up_count(theta)
    if not (0 <= pick < max(t_hat, 1)):
        raise ValueError("pick out of range for the flip set")
    g = np.zeros(k, dtype=np.float64)
    evals = 1
    fz = float(f(draw.z))
    if t_hat < k:
        fzt = float(f(draw.z_tilde))
        evals += 1
        rest = np.zeros(k, dtype=bool)
        rest[order[t_hat:]] = True
        differ = draw.differing & rest
        safe = np.where(differ, m, 1.0)
        sign = 1.0 - 2.0 * draw.z_tilde.bits
        g = np.where(differ, 0.5 * (fz - fzt) * sign / safe, 0.0)
    if t_hat > 0:
        sel = int(order[pick])
        fq = float(f(_flip(draw.z.bits, sel)))
        evals += 1
        g[sel] = t_hat * (1.0 - 2.0 * draw.z.bits[sel]) * (fq - fz)
    est = GradEstimate(g=g, evals=evals)
    assert est.evals <= 4
    return est


def tugc(f, theta: ThetaVec, rng: RngStream) -> GradEstimate:
    """Step-up routed combination; threshold chosen from theta alone.  evals <= 4."""
    draw = sample_coupled(theta, rng.child(purpose="coupling"))
    t_hat = step_up_count(theta)
    pick = 0
    if t_hat > 1:
        pick = rng.child(purpose="coordinate").coordinate_index(t_hat)
    return tugc_from_draw(f, draw, pick, theta)


# ---------------------------------------------------------------------------
# dispatch


def gradient(kind: EstimatorKind, f, theta: ThetaVec, rng: RngStream, *,
             endpoint_mode: str = "raise") -> GradEstimate:
    """Run the estimator selected by ``kind``; see the individual functions."""
    tag = kind.tag
    if tag == "exact":
        return exact_gradient(f, theta)
    if tag == "reinforce":
        return reinforce(f, theta, rng, endpoint_mode=endpoint_mode)
    if tag == "arm":
        return arm(f, theta, rng, endpoint_mode=endpoint_mode)
    if tag == "disarm":
        return disarm(f, theta, rng)
    if tag == "reinforce_loo":
        return reinforce_loo(f, theta, rng, endpoint_mode=endpoint_mode)
    if tag == "bitflip1":
        return bitflip1(f, theta, rng)
    if tag == "bitflip_k":
        return bitflip_k(f, theta, rng)
    if tag == "ugc":
        return ugc(f, theta, kind.tau, rng)
    if tag == "tugc":
        return tugc(f, theta, rng)
    raise ValueError(f"unknown estimator tag {tag!r}")
