"""Deterministic numerical primitives.

The generator is xoshiro256** seeded through splitmix64, so every shuffle,
initialisation and noise draw is reproducible from a single 64-bit seed on
any platform. Independent sub-streams are carved out with the generator's
published ``jump`` (2**128 steps) and ``long_jump`` (2**192 steps) polynomials.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Optional, Sequence

import numba
import numpy as np
from scipy import stats

from .errors import DivergenceError, PreconditionError

MASK64 = (1 << 64) - 1

_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)
_LONG_JUMP = (0x76E15D3EFEFDCBBF, 0xC5004E441C522FB3, 0x77710069854EE241, 0x39109BB02ACBE635)


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


@numba.njit(cache=True)
def _xoshiro_fill(state, out):
    # state: uint64[4], advanced in place; out: uint64[k]
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        x = s1 * np.uint64(5)
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = x * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


@numba.njit(cache=True)
def _fnv1a64(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for i in range(data.shape[0]):
        h ^= np.uint64(data[i])
        h *= prime
    return h


def fnv1a64(data) -> int:
    """64-bit FNV-1a hash of a bytes-like object or a numpy array's raw bytes."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).ravel()
    else:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return int(_fnv1a64(buf))


def hex_digest(h: int) -> str:
    return format(h, "016x")


class Rng:
    """xoshiro256** generator.

    Instances are single-owner. Use :meth:`stream` or :meth:`split` to derive
    independent children instead of sharing one generator between tasks.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        x = self.seed
        s = []
        for _ in range(4):
            x, z = splitmix64(x)
            s.append(z)
        self._s = s

    @classmethod
    def from_state(cls, state: Sequence[int], seed: int = 0) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = int(seed) & MASK64
        rng._s = [int(v) & MASK64 for v in state]
        if not any(rng._s):
            raise PreconditionError("xoshiro256** state must not be all zero")
        return rng

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def copy(self) -> "Rng":
        return Rng.from_state(self._s, self.seed)

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def _apply_jump(self, poly):
        acc = [0, 0, 0, 0]
        for word in poly:
            for bit in range(64):
                if word & (1 << bit):
                    for i in range(4):
                        acc[i] ^= self._s[i]
                self.next_u64()
        self._s = acc

    def jump(self) -> None:
        """Advance by 2**128 outputs."""
        self._apply_jump(_JUMP)

    def long_jump(self) -> None:
        """Advance by 2**192 outputs."""
        self._apply_jump(_LONG_JUMP)

    def stream(self, index: int) -> "Rng":
        """Copy of this generator advanced by ``index`` long jumps."""
        child = self.copy()
        for _ in range(index):
            child.long_jump()
        return child

    def split(self, index: int) -> "Rng":
        """Copy of this generator advanced by ``index`` short jumps."""
        child = self.copy()
        for _ in range(index):
            child.jump()
        return child

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integers(self, bound: int) -> int:
        """Unbiased integer in ``[0, bound)`` by modulo rejection."""
        if bound <= 0:
            raise PreconditionError("bound must be positive")
        threshold = ((1 << 64) - bound) % bound
        while True:
            x = self.next_u64()
            if x >= threshold:
                return x % bound

    def u64_array(self, k: int) -> np.ndarray:
        state = np.array(self._s, dtype=np.uint64)
        out = np.empty(int(k), dtype=np.uint64)
        _xoshiro_fill(state, out)
        self._s = [int(v) for v in state]
        return out

    def uniform_array(self, k: int) -> np.ndarray:
        return (self.u64_array(k) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, k: int) -> np.ndarray:
        """``k`` standard normal draws (Box-Muller, cosine then sine branch)."""
        pairs = (int(k) + 1) // 2
        u = self.uniform_array(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:k]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``0..n-1``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


def check_finite(x: np.ndarray, what: str = "vector", step: Optional[int] = None) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite entries in {what}", step=step)
    return x


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise PreconditionError(f"length mismatch: {x.shape} vs {y.shape}")
    return check_finite(alpha * x + y, "axpy result")


def l2_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def gaussian_vector(rng: Rng, sigma: float, d: int) -> np.ndarray:
    """``d`` i.i.d. N(0, sigma**2) draws; sigma is a standard deviation."""
    if sigma < 0 or not math.isfinite(sigma):
        raise PreconditionError(f"sigma must be finite and >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(d)
    return sigma * rng.normal(d)


class PowerIterationResult(NamedTuple):
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    d: int,
    max_iters: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
) -> PowerIterationResult:
    """Dominant eigenpair of a symmetric linear operator.

    The eigenvalue estimate is the Rayleigh quotient; iteration stops once two
    consecutive estimates differ by at most ``tol``. On non-convergence the
    last estimate is returned with ``converged=False``.
    """
    if d < 1:
        raise PreconditionError("d must be >= 1")
    v = Rng(seed).normal(d)
    v /= np.linalg.norm(v)
    prev = None
    value = 0.0
    for it in range(1, max_iters + 1):
        w = np.asarray(apply(v), dtype=np.float64)
        value = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return PowerIterationResult(0.0, v, it, True)
        if prev is not None and abs(value - prev) <= tol:
            return PowerIterationResult(value, w / norm, it, True)
        prev = value
        v = w / norm
    return PowerIterationResult(value, v, max_iters, False)


def min_eigenvalue(
    apply: Callable[[np.ndarray], np.ndarray],
    lambda_max: float,
    d: int,
    max_iters: int = 2000,
    tol: float = 1e-8,
    seed: int = 0,
) -> PowerIterationResult:
    """Smallest eigenvalue via power iteration on ``lambda_max*I - A``."""
    res = power_iteration(lambda v: lambda_max * v - apply(v), d, max_iters, tol, seed)
    return PowerIterationResult(lambda_max - res.value, res.vector, res.iterations, res.converged)


def _as_pair(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise PreconditionError("correlation inputs must be equal-length 1-d sequences")
    if x.size < 2:
        raise PreconditionError("correlation needs at least 2 pairs")
    return x, y


def pearson(xs, ys) -> Optional[float]:
    """Pearson correlation, or ``None`` when either input has zero variance."""
    x, y = _as_pair(xs, ys)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(min(1.0, max(-1.0, (xc @ yc) / (sx * sy))))


def spearman(xs, ys) -> Optional[float]:
    """Spearman correlation with average ranks for ties."""
    x, y = _as_pair(xs, ys)
    return pearson(stats.rankdata(x), stats.rankdata(y))
