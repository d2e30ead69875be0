"""Value types, deterministic random streams, and the antithetic coupling.

Everything downstream (estimators, experiments, the CLI) draws randomness
through :class:`RngStream`, a counter-based stream keyed by
``(seed, iteration, replicate, purpose)``.  Identical keys reproduce identical
output bit-for-bit; distinct keys give independent streams.  The integer
dimensions have fixed owners to keep keys collision-free across layers:
training loops own ``iteration``, trial/replicate drivers own ``replicate``,
and nested Monte Carlo helpers only ever extend the ``purpose`` chain
(``child(purpose=...)`` appends with a ``/`` separator).
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

__all__ = [
    "UNIFORM_LOW",
    "UNIFORM_HIGH",
    "RngStream",
    "ThetaVec",
    "LogitVec",
    "BinaryVec",
    "CoupledDraw",
    "GradEstimate",
    "coupled_from_uniforms",
    "sample_coupled",
    "sigmoid",
    "logit",
    "sigmoid_transform",
    "logit_transform",
    "ulp_distance",
    "float_repr",
]

# Coupling uniforms live in [2^-53, 1 - 2^-53]: never exactly 0 or 1, so the
# comparisons against theta entries at 0 or 1 cannot tie.
UNIFORM_LOW = 2.0 ** -53
UNIFORM_HIGH = 1.0 - 2.0 ** -53

_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=4096)
def _purpose_tag(purpose: str) -> int:
    digest = hashlib.blake2s(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class _ScratchPhilox(threading.local):
    """Thread-local reusable Philox instance for cheap stream construction."""

    def __init__(self) -> None:
        self.bitgen = np.random.Philox(key=0)


_scratch = _ScratchPhilox()


def _raw_words(key_words: np.ndarray, n: int) -> np.ndarray:
    # Resetting (key, counter, buffer) on a reused Philox reproduces
    # np.random.Philox(key=...) output exactly and skips construction cost.
    bitgen = _scratch.bitgen
    state = bitgen.state
    state["state"]["key"][:] = key_words
    state["state"]["counter"][:] = 0
    state["buffer"][:] = 0
    state["buffer_pos"] = 4
    bitgen.state = state
    return bitgen.random_raw(n)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, iteration, replicate, purpose).

    The key is hashed into a 128-bit Philox key, so streams with distinct
    fields are statistically independent and each stream's output sequence is
    fixed by its key alone.
    """

    seed: int
    iteration: int = 0
    replicate: int = 0
    purpose: str = ""

    def __post_init__(self) -> None:
        if self.iteration < 0 or self.replicate < 0:
            raise ValueError("iteration and replicate must be nonnegative")

    def child(self, *, iteration: int | None = None, replicate: int | None = None,
              purpose: str | None = None) -> "RngStream":
        """Derive a stream with some key fields replaced.

        ``purpose`` composes hierarchically: deriving purpose "b" from a stream
        with purpose "a" yields "a/b", so nested consumers cannot collide with
        their callers even when they reuse iteration/replicate values.
        """
        fields: dict = {}
        if iteration is not None:
            fields["iteration"] = iteration
        if replicate is not None:
            fields["replicate"] = replicate
        if purpose is not None:
            fields["purpose"] = f"{self.purpose}/{purpose}" if self.purpose else purpose
        return replace(self, **fields)

    def _key_words(self) -> np.ndarray:
        packed = struct.pack(
            "<QqqQ",
            self.seed & _MASK64,
            self.iteration,
            self.replicate,
            _purpose_tag(self.purpose),
        )
        digest = hashlib.blake2s(packed, digest_size=16).digest()
        return np.frombuffer(digest, dtype=np.uint64)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator over this stream's key (same output every call)."""
        words = self._key_words()
        key = int(words[0]) | (int(words[1]) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniforms(self, n: int) -> np.ndarray:
        """First ``n`` uniforms of the stream, clipped to [2^-53, 1 - 2^-53].

        Equals ``np.clip(generator().random(n), UNIFORM_LOW, UNIFORM_HIGH)``.
        """
        raw = _raw_words(self._key_words(), n)
        u = (raw >> np.uint64(11)) * (2.0 ** -53)
        return np.clip(u, UNIFORM_LOW, UNIFORM_HIGH)

    def coordinate_index(self, k: int) -> int:
        """Uniform index in ``range(k)`` from the stream's first uniform."""
        if k < 1:
            raise ValueError("k must be >= 1")
        return int(self.uniforms(1)[0] * k)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ThetaVec:
    """Vector of Bernoulli means, entries in the closed interval [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("ThetaVec requires a 1-D vector with K >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ThetaVec entries must be finite")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("ThetaVec entries must lie in [0, 1]")
        object.__setattr__(self, "values", _readonly(arr.copy()))

    @property
    def k(self) -> int:
        return int(self.values.size)

    @classmethod
    def full(cls, k: int, value: float) -> "ThetaVec":
        return cls(np.full(k, value, dtype=np.float64))


@dataclass(frozen=True)
class LogitVec:
    """Vector of log-odds whose sigmoid stays strictly inside (0, 1).

    Rejects entries where float64 sigmoid would round to exactly 0 or 1
    (|phi| beyond ~36.7), so logit-space code never silently reaches the
    endpoints that the endpoint-sensitive estimators forbid.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("LogitVec requires a 1-D vector with K >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("LogitVec entries must be finite")
        theta = sigmoid(arr)
        if np.any(theta <= 0.0) or np.any(theta >= 1.0):
            raise ValueError("LogitVec entries saturate sigmoid to 0 or 1")
        object.__setattr__(self, "values", _readonly(arr.copy()))

    @property
    def k(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class BinaryVec:
    """Vector of bits stored as int8 zeros and ones."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits, dtype=np.int8)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("BinaryVec requires a 1-D vector with K >= 1")
        if np.any((arr != 0) & (arr != 1)):
            raise ValueError("BinaryVec entries must be 0 or 1")
        object.__setattr__(self, "bits", _readonly(arr.copy()))

    @classmethod
    def _wrap(cls, bits: np.ndarray) -> "BinaryVec":
        # Trusted constructor for hot paths; callers guarantee 0/1 int8 input.
        obj = object.__new__(cls)
        object.__setattr__(obj, "bits", bits)
        return obj

    @property
    def k(self) -> int:
        return int(self.bits.size)


@dataclass(frozen=True)
class CoupledDraw:
    """Antithetic pair (z, z_tilde) with the shared uniforms that produced it."""

    u: np.ndarray
    z: BinaryVec
    z_tilde: BinaryVec

    @property
    def differing(self) -> np.ndarray:
        """Boolean mask of coordinates where the pair disagrees."""
        return self.z.bits != self.z_tilde.bits


@dataclass(frozen=True)
class GradEstimate:
    """Gradient estimate plus the number of objective evaluations it consumed."""

    g: np.ndarray
    evals: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.g, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("GradEstimate.g must be 1-D")
        if self.evals < 0:
            raise ValueError("GradEstimate.evals must be nonnegative")
        object.__setattr__(self, "g", _readonly(arr))


def coupled_from_uniforms(theta: ThetaVec, u: np.ndarray) -> CoupledDraw:
    """Build the antithetic pair from given uniforms.

    z_j = 1 exactly when 1 - u_j < theta_j, and z~_j = 1 exactly when
    u_j < theta_j.  Both marginals are Bernoulli(theta); the pair disagrees at
    coordinate j with probability 2 * min(theta_j, 1 - theta_j), and for
    theta_j < 1/2 the two are never simultaneously 1 (for theta_j > 1/2 never
    simultaneously 0).
    """
    th = theta.values
    u = np.asarray(u, dtype=np.float64)
    if u.shape != th.shape:
        raise ValueError("uniforms must match theta's shape")
    z = ((1.0 - u) < th).astype(np.int8)
    z_tilde = (u < th).astype(np.int8)
    return CoupledDraw(u=_readonly(u.copy()), z=BinaryVec._wrap(z),
                       z_tilde=BinaryVec._wrap(z_tilde))


def sample_coupled(theta: ThetaVec, rng: RngStream) -> CoupledDraw:
    """Draw shared uniforms from ``rng`` and form the antithetic pair."""
    return coupled_from_uniforms(theta, rng.uniforms(theta.k))


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    """Numerically stable elementwise logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray | float) -> np.ndarray:
    """Elementwise log-odds; requires entries strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit requires entries strictly inside (0, 1)")
    return np.log(p) - np.log1p(-p)


def sigmoid_transform(phi: LogitVec) -> ThetaVec:
    """Map log-odds to Bernoulli means."""
    return ThetaVec(sigmoid(phi.values))


def logit_transform(theta: ThetaVec) -> LogitVec:
    """Map Bernoulli means to log-odds; rejects entries at exactly 0 or 1."""
    return LogitVec(logit(theta.values))


def ulp_distance(a: float, b: float) -> float:
    """|a - b| measured in units of the larger argument's float spacing."""
    spacing = max(math.ulp(abs(a)), math.ulp(abs(b)))
    return abs(a - b) / spacing


def float_repr(x) -> str:
    """Shortest decimal string that parses back to the exact same float64.

    Used by every CSV/JSON writer so that written numbers round-trip bitwise;
    numpy scalars are first converted to plain floats (their own repr does
    not parse as a number).
    """
    return repr(float(x))
