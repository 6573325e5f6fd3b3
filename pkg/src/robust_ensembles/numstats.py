"""Special functions, one-sided binomial bounds and reproducible Gaussian sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_MASK64 = (1 << 64) - 1


class NumericalError(ArithmeticError):
    """A numerical routine failed to converge."""


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_stream_id(seed: int, index: int) -> int:
    """Substream index for child `index` of a stream: splitmix64 of (seed, index)."""
    return _splitmix64((_splitmix64(seed & _MASK64) ^ (index & _MASK64)) & _MASK64)


class RngStream:
    """A seeded random stream.

    The underlying generator is PCG64 keyed by numpy's SeedSequence with
    entropy `seed` and spawn key `(stream_id,)`, so each (seed, stream_id)
    pair names one reproducible sequence and distinct ids are independent.
    Children come from `fork(index)`, whose id is `derive_stream_id`.
    """

    __slots__ = ("seed", "stream_id", "_gen", "_spare")

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _MASK64 and 0 <= stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)))
        )
        self._spare = np.empty(0)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def fork(self, index: int) -> "RngStream":
        return RngStream(self.seed, derive_stream_id(self.seed ^ self.stream_id, index))

    def reset(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def standard_normal(self, count) -> np.ndarray:
        """Standard normals by the polar Box-Muller method; `count` is a length or a shape."""
        if not np.isscalar(count):
            shape = tuple(int(s) for s in count)
            return self.standard_normal(int(np.prod(shape))).reshape(shape)
        out = np.empty(count)
        filled = min(count, self._spare.size)
        out[:filled] = self._spare[:filled]
        self._spare = self._spare[filled:]
        while filled < count:
            need = count - filled
            pairs = max(16, int((need + 1) // 2 * 1.28) + 8)
            u = self._gen.random((pairs, 2)) * 2.0 - 1.0
            s = u[:, 0] ** 2 + u[:, 1] ** 2
            keep = (s > 0.0) & (s < 1.0)
            u, s = u[keep], s[keep]
            factor = np.sqrt(-2.0 * np.log(s) / s)
            z = (u * factor[:, None]).ravel()
            take = min(need, z.size)
            out[filled:filled + take] = z[:take]
            filled += take
            if take < z.size:
                self._spare = np.concatenate([self._spare, z[take:]])
        return out


def sample_gaussian(rng: RngStream, d, sigma: float) -> np.ndarray:
    """I.i.d. N(0, sigma^2) draws; `d` is a length or a shape tuple."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    shape = (int(d),) if np.isscalar(d) else tuple(int(s) for s in d)
    if any(s < 1 for s in shape):
        raise ValueError("dimensions must be at least 1")
    count = int(np.prod(shape))
    return (sigma * rng.standard_normal(count)).reshape(shape)


# error function

def _erf_series(x: float) -> float:
    # erf(x) = 2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (1*3*...*(2n+1)); all terms positive
    term = x
    total = x
    x2 = x * x
    n = 0
    while True:
        n += 1
        term *= 2.0 * x2 / (2 * n + 1)
        total += term
        if term <= 1e-17 * total:
            break
    return 2.0 / SQRT_PI * math.exp(-x2) * total


def _erfc_contfrac(x: float) -> float:
    # erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), x > 0, modified Lentz
    tiny = 1e-300
    f = x
    c = x
    d = 0.0
    for k in range(1, 500):
        a = k / 2.0
        d = x + a * d
        d = tiny if d == 0.0 else d
        c = x + a / c
        c = tiny if c == 0.0 else c
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x * x) / SQRT_PI / f


def erf(x: float) -> float:
    if x < 0:
        return -erf(-x)
    if x < 3.0:
        return _erf_series(x)
    return 1.0 - _erfc_contfrac(x)


def erfc(x: float) -> float:
    if x < 0:
        return 2.0 - erfc(-x)
    if x < 3.0:
        return 1.0 - _erf_series(x)
    return _erfc_contfrac(x)


def std_normal_cdf(x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    if x < -38.5:
        return 0.0
    return 0.5 * erfc(-x / SQRT2)


def std_normal_pdf(x: float) -> float:
    return INV_SQRT_2PI * math.exp(-0.5 * x * x)


# Acklam's rational approximation, used as the starting point for Newton refinement
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _quantile_guess(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        return -_quantile_guess(1.0 - p)
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def std_normal_quantile(p: float) -> float:
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ValueError(f"quantile needs 0 < p < 1, got {p}")
    if p == 0.5:
        return 0.0
    # work in the lower tail so tiny tail probabilities keep full relative precision
    if p > 0.5:
        return -std_normal_quantile(1.0 - p) if 1.0 - p < 0.5 else 0.0
    x = _quantile_guess(p)
    for _ in range(2):
        dens = std_normal_pdf(x)
        if dens == 0.0:
            break
        x -= (std_normal_cdf(x) - p) / dens
    return x


# incomplete beta and Clopper-Pearson

BETA_MAX_ITER = 300


def _beta_contfrac(a: float, b: float, x: float, max_iter: int) -> float:
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-16:
            return h
    raise NumericalError(
        f"incomplete beta continued fraction did not converge in {max_iter} iterations "
        f"(a={a}, b={b}, x={x}, last delta={delta!r})"
    )


def reg_inc_beta(a: float, b: float, x: float, max_iter: int = BETA_MAX_ITER) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not (0.0 <= x <= 1.0):
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    if x > (a + 1.0) / (a + b + 2.0):
        return 1.0 - reg_inc_beta(b, a, 1.0 - x, max_iter)
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    return math.exp(log_front) * _beta_contfrac(a, b, x, max_iter) / a


CP_BISECTION_STEPS = 80


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided lower confidence bound for a binomial proportion.

    The alpha quantile of Beta(k, n-k+1), found by bisection on I_p(k, n-k+1).
    """
    if n < 1 or not (0 <= k <= n):
        raise ValueError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    lo, hi = 0.0, 1.0
    for _ in range(CP_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        # I_mid(k, n-k+1) = P(Bin(n, mid) >= k), increasing in mid
        if reg_inc_beta(k, n - k + 1, mid) > alpha:
            hi = mid
        else:
            lo = mid
    return lo


def clopper_pearson_upper(k: int, n: int, alpha: float) -> float:
    if k == n:
        return 1.0
    return 1.0 - clopper_pearson_lower(n - k, n, alpha)


@dataclass(frozen=True)
class ConfidenceBound:
    point_estimate: float
    lower: float
    upper: float
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.point_estimate <= self.upper <= 1.0):
            raise ValueError(f"inconsistent bound {self}")


def binomial_bound(k: int, n: int, alpha: float) -> ConfidenceBound:
    """Point estimate with one-sided lower and upper Clopper-Pearson limits at level 1 - alpha each."""
    return ConfidenceBound(k / n, clopper_pearson_lower(k, n, alpha),
                           clopper_pearson_upper(k, n, alpha), 1.0 - alpha)
