"""Objectives over binary vectors: toy targets and best-subset regression.

An :class:`Objective` maps a binary vector to a real value and counts its
evaluations.  The two toy targets expose closed-form expected losses used by
the experiment drivers; the subset objective wraps a least-squares refit per
support and memoizes by bit pattern (its counter counts solver-backed
evaluations only, so reported budgets reflect true cost).
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from berngrad.core import BinaryVec, RngStream, ThetaVec, float_repr

__all__ = [
    "Objective",
    "FunctionObjective",
    "p1",
    "p2",
    "RegressionDataset",
    "gen_regression",
    "solve_inner_ls",
    "SubsetObjective",
    "subset_objective",
    "support_metrics",
]

# Singular values below this fraction of the largest are treated as zero in
# the inner least-squares solve.
RANK_RCOND = 1e-10

MEMO_CAPACITY = 1 << 16


def _bits(z) -> np.ndarray:
    if isinstance(z, BinaryVec):
        return z.bits
    arr = np.asarray(z)
    if arr.dtype != np.int8:
        arr = arr.astype(np.int8)
    return arr


class Objective:
    """Callable f: {0,1}^K -> R with an evaluation counter."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self._dim = int(dim)
        self._eval_count = 0

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def eval_count(self) -> int:
        """Monotone count of evaluations performed."""
        return self._eval_count

    def __call__(self, z) -> float:
        bits = _bits(z)
        if bits.size != self._dim:
            raise ValueError(f"expected {self._dim} coordinates, got {bits.size}")
        self._eval_count += 1
        return self._value(bits)

    def _value(self, bits: np.ndarray) -> float:
        raise NotImplementedError

    def evaluate_many(self, rows: np.ndarray) -> np.ndarray:
        """Row-wise evaluation; subclasses may vectorize.  Counts every row."""
        rows = np.asarray(rows)
        return np.array([self(row) for row in rows], dtype=np.float64)

    def exact_expected_loss(self, theta: ThetaVec) -> float | None:
        """Closed-form E[f(z)] under z ~ prod Bern(theta), if available."""
        return None


class FunctionObjective(Objective):
    """Wrap an arbitrary python function of a bit vector."""

    def __init__(self, fn, dim: int):
        super().__init__(dim)
        self._fn = fn

    def _value(self, bits: np.ndarray) -> float:
        return float(self._fn(bits))


class _SeparableQuadratic(Objective):
    """f(z) = sum_j (z_j - target)^2."""

    def __init__(self, dim: int, target: float):
        super().__init__(dim)
        self.target = float(target)

    def _value(self, bits: np.ndarray) -> float:
        d = bits - self.target
        return float(d @ d)

    def evaluate_many(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        self._eval_count += rows.shape[0]
        d = rows - self.target
        return np.einsum("ij,ij->i", d, d)

    def exact_expected_loss(self, theta: ThetaVec) -> float | None:
        # E(z_j - t)^2 = theta_j (1 - 2t) + t^2
        t = self.target
        return float(theta.values.sum() * (1.0 - 2.0 * t) + self.dim * t * t)


class _SumQuadratic(Objective):
    """f(z) = (sum_j z_j - target)^2."""

    def __init__(self, dim: int, target: float):
        super().__init__(dim)
        self.target = float(target)

    def _value(self, bits: np.ndarray) -> float:
        s = float(bits.sum())
        return (s - self.target) ** 2

    def evaluate_many(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        self._eval_count += rows.shape[0]
        return (rows.sum(axis=1) - self.target) ** 2

    def exact_expected_loss(self, theta: ThetaVec) -> float | None:
        # Var(sum z) + (E sum z - t)^2
        th = theta.values
        t = self.target
        return float((th * (1.0 - th)).sum() + (th.sum() - t) ** 2)


def p1(k: int, target: float) -> Objective:
    """Separable target: per-coordinate squared distance to ``target``."""
    return _SeparableQuadratic(k, target)


def p2(k: int, target: float) -> Objective:
    """Coupled target: squared distance of the bit count to ``target``."""
    return _SumQuadratic(k, target)


# ---------------------------------------------------------------------------
# best-subset regression


@dataclass(frozen=True)
class RegressionDataset:
    """Fixed design matrix, responses, and the generating ground truth."""

    x: np.ndarray
    y: np.ndarray
    beta_true: np.ndarray
    sigma: float
    penalty: float

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        beta = np.asarray(self.beta_true, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.size:
            raise ValueError("x must be (n, p) with y of length n")
        if beta.size != x.shape[1]:
            raise ValueError("beta_true must have length p")
        if self.sigma < 0 or self.penalty < 0:
            raise ValueError("sigma and penalty must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "beta_true", beta)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def true_support(self) -> np.ndarray:
        """Indices of nonzero generating coefficients."""
        return np.flatnonzero(self.beta_true)

    def save_csv(self, path) -> None:
        """Write the combined table: columns x1..xp then a final y column."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(self.p)] + ["y"])
            for i in range(self.n):
                writer.writerow([float_repr(v) for v in self.x[i]]
                                + [float_repr(self.y[i])])

    @classmethod
    def load_csv(cls, path, beta_true, sigma: float,
                 penalty: float) -> "RegressionDataset":
        """Read a combined table written by :meth:`save_csv`.

        The generating metadata is not stored in the CSV and must be supplied.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[-1] != "y":
                raise ValueError("expected final column 'y'")
            rows = [[float(v) for v in row] for row in reader]
        data = np.array(rows, dtype=np.float64)
        return cls(x=data[:, :-1], y=data[:, -1], beta_true=beta_true,
                   sigma=sigma, penalty=penalty)


def gen_regression(n: int, p: int, beta_true, sigma: float, rng: RngStream, *,
                   penalty: float = 1.0) -> RegressionDataset:
    """Gaussian design X with iid N(0,1) entries and y = X beta + sigma eps."""
    beta = np.zeros(p, dtype=np.float64)
    beta_in = np.asarray(beta_true, dtype=np.float64)
    if beta_in.size > p:
        raise ValueError("beta_true longer than p")
    beta[: beta_in.size] = beta_in
    gen = rng.generator()
    x = gen.standard_normal((n, p))
    eps = gen.standard_normal(n)
    y = x @ beta + sigma * eps
    return RegressionDataset(x=x, y=y, beta_true=beta, sigma=float(sigma),
                             penalty=float(penalty))


def solve_inner_ls(x_sub: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm least squares for the selected columns.

    Singular values below RANK_RCOND times the largest are treated as zero,
    so duplicated or collinear columns get the minimum-norm split.  Returns
    (coefficients, residual sum of squares); an empty selection returns
    (empty, ||y||^2).
    """
    y = np.asarray(y, dtype=np.float64)
    if x_sub.shape[1] == 0:
        return np.zeros(0), float(y @ y)
    coeffs, _, _, _ = np.linalg.lstsq(x_sub, y, rcond=RANK_RCOND)
    resid = y - x_sub @ coeffs
    return coeffs, float(resid @ resid)


class SubsetObjective(Objective):
    """Penalized refit loss: rss(support of z)/n + penalty * |support|.

    Values are memoized by bit pattern (LRU, default capacity 2^16); the
    evaluation counter counts solver-backed evaluations only, so repeated
    patterns are free and reported budgets reflect true cost.
    """

    def __init__(self, dataset: RegressionDataset, *,
                 capacity: int = MEMO_CAPACITY):
        super().__init__(dataset.p)
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.dataset = dataset
        self._capacity = capacity
        self._cache: OrderedDict[bytes, float] = OrderedDict()

    def __call__(self, z) -> float:
        bits = _bits(z)
        if bits.size != self.dim:
            raise ValueError(f"expected {self.dim} coordinates, got {bits.size}")
        key = bits.tobytes()
        cached = self._cache.get(key)
        if cached is not None:
            self._cache.move_to_end(key)
            return cached
        self._eval_count += 1
        value = self._value(bits)
        self._cache[key] = value
        if len(self._cache) > self._capacity:
            self._cache.popitem(last=False)
        return value

    def _value(self, bits: np.ndarray) -> float:
        ds = self.dataset
        support = np.flatnonzero(bits)
        _, rss = solve_inner_ls(ds.x[:, support], ds.y)
        return rss / ds.n + ds.penalty * support.size


def subset_objective(dataset: RegressionDataset, *,
                     capacity: int = MEMO_CAPACITY) -> SubsetObjective:
    """Build the penalized best-subset refit objective for ``dataset``."""
    return SubsetObjective(dataset, capacity=capacity)


def support_metrics(theta: ThetaVec, true_support) -> tuple[float, float]:
    """True/false positive rates of the thresholded selection theta > 0.5.

    Requires a nonempty true support.  With no negatives (full true support)
    the false positive rate is reported as 0.
    """
    true_idx = np.asarray(true_support, dtype=np.int64)
    if true_idx.size == 0:
        raise ValueError("true support must be nonempty")
    p = theta.k
    if np.any(true_idx < 0) or np.any(true_idx >= p):
        raise ValueError("true support index out of range")
    selected = theta.values > 0.5
    truth = np.zeros(p, dtype=bool)
    truth[true_idx] = True
    tp = int(np.count_nonzero(selected & truth))
    fp = int(np.count_nonzero(selected & ~truth))
    negatives = p - true_idx.size
    tpr = tp / true_idx.size
    fpr = fp / negatives if negatives > 0 else 0.0
    return tpr, fpr
