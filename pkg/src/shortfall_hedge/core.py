"""Market, loss and shaping-factor primitives shared by every other module.

The asset follows a geometric Brownian motion ``dX = mu X dt + sigma X dW``
and the monthly contract is quoted as ``Lambda * X`` once the shaping factor
``Lambda`` is revealed.  Randomness goes through :class:`RngStream`, a
counter-based Philox stream so that ``(seed, stream, index)`` pins down every
Gaussian draw regardless of how work is split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

DAYS_PER_YEAR = 250

# Beta mass left outside the numerical support of a scaled-beta law.
BETA_TAIL = 1e-15


class DomainError(ValueError):
    """Raised when an input lies outside the mathematical domain of an operation."""


class NumericalError(RuntimeError):
    """Raised when a numerical procedure fails (no convergence, loss of convexity)."""


@dataclass(frozen=True)
class ModelParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise DomainError(f"sigma must be > 0, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise DomainError(f"mu must be finite, got {self.mu}")

    @property
    def theta(self) -> float:
        """Market price of risk ``mu / sigma``."""
        return self.mu / self.sigma


@dataclass(frozen=True)
class LossSpec:
    """Lower partial moment loss ``u**k / k`` with credit line and loss level.

    ``p_threshold`` is stored negative; :meth:`from_magnitude` accepts ``|p|``.
    ``kappa`` defaults to an unlimited credit line.
    """

    k: float
    p_threshold: float = -0.1
    kappa: float = math.inf

    def __post_init__(self):
        if not self.k > 1:
            raise DomainError(f"loss exponent k must be > 1, got {self.k}")
        if not self.p_threshold < 0:
            raise DomainError(f"loss level p must be < 0, got {self.p_threshold}")
        if not self.kappa >= 0:
            raise DomainError(f"credit line kappa must be >= 0, got {self.kappa}")

    @classmethod
    def from_magnitude(cls, k: float, p_abs: float, kappa: float = math.inf) -> "LossSpec":
        if not p_abs > 0:
            raise DomainError(f"|p| must be > 0, got {p_abs}")
        return cls(k=k, p_threshold=-float(p_abs), kappa=kappa)


@dataclass(frozen=True)
class OptionSpec:
    """Call on the monthly contract; ``T`` reveals the shaping factor, ``T_star`` is expiry."""

    K: float
    T: float
    T_star: float

    def __post_init__(self):
        if not self.K > 0:
            raise DomainError(f"strike must be > 0, got {self.K}")
        if not (0 < self.T < self.T_star < math.inf):
            raise DomainError(f"need 0 < T < T_star, got T={self.T}, T_star={self.T_star}")

    def payoff(self, lam_x):
        return np.maximum(np.asarray(lam_x, dtype=float) - self.K, 0.0)


@dataclass(frozen=True)
class TimeGrid:
    """Regular mesh ``0 = t_0 < ... < t_N = T``.  ``N = 0`` is the single instant ``T``."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 0:
            raise DomainError(f"step count must be >= 0, got {self.N}")
        if not self.T > 0:
            raise DomainError(f"horizon must be > 0, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N if self.N else 0.0

    @property
    def times(self) -> np.ndarray:
        if self.N == 0:
            return np.array([self.T])
        return np.linspace(0.0, self.T, self.N + 1)

    @classmethod
    def daily(cls, days: int) -> "TimeGrid":
        return cls(T=days / DAYS_PER_YEAR, N=days)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream)``.

    The ``n``-th raw 64-bit output of the Philox generator keyed by
    ``(seed, stream)`` is mapped to the uniform ``(bits >> 11 + 0.5) / 2**53``,
    which never hits 0 or 1, and then to a Gaussian by the inverse normal CDF.
    Draw ``index`` is therefore fixed by the triple alone.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        mask = (1 << 64) - 1
        object.__setattr__(self, "seed", int(self.seed) & mask)
        object.__setattr__(self, "stream", int(self.stream) & mask)

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def uniforms(self, shape, start: int = 0) -> np.ndarray:
        n = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        # Philox4x64 emits four 64-bit words per counter increment.
        blocks, rest = divmod(int(start), 4)
        if blocks:
            bitgen.advance(blocks)
        raw = bitgen.random_raw(n + rest)[rest:]
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def normals(self, shape, start: int = 0) -> np.ndarray:
        return special.ndtri(self.uniforms(shape, start))


@dataclass(frozen=True)
class ShapingLaw:
    """Law of the shaping factor: ``degenerate``, ``scaled_beta`` or ``empirical``.

    Build instances with :meth:`degenerate`, :meth:`scaled_beta` or
    :meth:`empirical`.  For the scaled beta law the numerical support is the
    interval between the ``BETA_TAIL`` and ``1 - BETA_TAIL`` quantiles, which
    keeps ``lambda_min > 0``.
    """

    kind: str
    lam0: float = 1.0
    scale: float = 1.0
    a: float = 1.0
    b: float = 1.0
    samples: tuple = field(default=())

    def __post_init__(self):
        if self.kind == "degenerate":
            if not self.lam0 > 0:
                raise DomainError(f"degenerate shaping value must be > 0, got {self.lam0}")
        elif self.kind == "scaled_beta":
            if not (self.scale > 0 and self.a > 0 and self.b > 0):
                raise DomainError("scaled beta needs scale, a, b > 0")
        elif self.kind == "empirical":
            if len(self.samples) == 0 or min(self.samples) <= 0:
                raise DomainError("empirical law needs a nonempty sample of positive values")
        else:
            raise DomainError(f"unknown shaping law kind {self.kind!r}")

    @classmethod
    def degenerate(cls, lam0: float) -> "ShapingLaw":
        return cls(kind="degenerate", lam0=float(lam0))

    @classmethod
    def scaled_beta(cls, scale: float, a: float, b: float) -> "ShapingLaw":
        return cls(kind="scaled_beta", scale=float(scale), a=float(a), b=float(b))

    @classmethod
    def empirical(cls, samples: Sequence[float]) -> "ShapingLaw":
        return cls(kind="empirical", samples=tuple(float(s) for s in samples))

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "degenerate":
            return (self.lam0, self.lam0)
        if self.kind == "empirical":
            return (min(self.samples), max(self.samples))
        lo = self.scale * special.betaincinv(self.a, self.b, BETA_TAIL)
        hi = self.scale * special.betaincinv(self.a, self.b, 1.0 - BETA_TAIL)
        return (float(lo), float(hi))

    @property
    def is_continuous(self) -> bool:
        return self.kind == "scaled_beta"

    def mean(self) -> float:
        if self.kind == "degenerate":
            return self.lam0
        if self.kind == "empirical":
            return float(np.mean(self.samples))
        return self.scale * self.a / (self.a + self.b)

    def variance(self) -> float:
        if self.kind == "degenerate":
            return 0.0
        if self.kind == "empirical":
            return float(np.var(self.samples))
        a, b = self.a, self.b
        return self.scale**2 * a * b / ((a + b) ** 2 * (a + b + 1))

    def pdf(self, lam):
        """Density of the scaled beta law (continuous kind only)."""
        if not self.is_continuous:
            raise DomainError(f"{self.kind} law has no density")
        z = np.asarray(lam, dtype=float) / self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            logpdf = ((self.a - 1) * np.log(z) + (self.b - 1) * np.log1p(-z)
                      - special.betaln(self.a, self.b) - math.log(self.scale))
        return np.where((z > 0) & (z < 1), np.exp(logpdf), 0.0)


def loss(u, spec: LossSpec):
    """Lower partial moment ``u**k / k`` for ``u >= 0``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise DomainError("loss is defined on u >= 0")
    out = u**spec.k / spec.k
    return out if out.ndim else float(out)


def loss_inverse(z, spec: LossSpec):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise DomainError("loss_inverse is defined on z >= 0")
    out = (spec.k * z) ** (1.0 / spec.k)
    return out if out.ndim else float(out)


def simulate_gbm(params: ModelParams, x0: float, grid: TimeGrid, measure: str,
                 rng: RngStream, n_paths: int = 1) -> np.ndarray:
    """Exact GBM paths on ``grid``; shape ``(n_paths, N + 1)``.

    Under ``"Q"`` the log increments are ``sigma sqrt(dt) eps - sigma^2 dt / 2``;
    under ``"P"`` the drift ``mu dt`` is added.  Path ``m`` uses draws
    ``m*N .. m*N + N - 1`` of ``rng``.
    """
    if not x0 > 0:
        raise DomainError(f"x0 must be > 0, got {x0}")
    if measure not in ("P", "Q"):
        raise DomainError(f"measure must be 'P' or 'Q', got {measure!r}")
    N, dt = grid.N, grid.dt
    paths = np.empty((n_paths, N + 1))
    paths[:, 0] = x0
    if N == 0:
        return paths
    eps = rng.normals((n_paths, N))
    drift = (params.mu if measure == "P" else 0.0) - 0.5 * params.sigma**2
    log_inc = drift * dt + params.sigma * math.sqrt(dt) * eps
    paths[:, 1:] = x0 * np.exp(np.cumsum(log_inc, axis=1))
    return paths


def sample_lambda(law: ShapingLaw, n: int, rng: RngStream) -> np.ndarray:
    """``n`` draws of the shaping factor, by inverse CDF of the stream uniforms."""
    if n < 1:
        raise DomainError(f"need n >= 1 draws, got {n}")
    if law.kind == "degenerate":
        return np.full(n, law.lam0)
    u = rng.uniforms(n)
    if law.kind == "empirical":
        samples = np.asarray(law.samples)
        return samples[np.minimum((u * len(samples)).astype(int), len(samples) - 1)]
    lo, hi = law.support
    draws = law.scale * special.betaincinv(law.a, law.b, u)
    return np.clip(draws, lo, hi)


def gauss_legendre(n: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (hi - lo)
    return lo + half * (t + 1.0), half * w


def lambda_quadrature(law: ShapingLaw, n_nodes: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights approximating integrals against the law.

    Scaled beta: Gauss-Legendre on the numerical support against the density,
    renormalised to sum to one.  Empirical: the samples with equal weights.
    """
    if n_nodes < 1:
        raise DomainError(f"need at least one quadrature node, got {n_nodes}")
    if law.kind == "degenerate":
        return np.array([law.lam0]), np.array([1.0])
    if law.kind == "empirical":
        nodes = np.asarray(law.samples, dtype=float)
        return nodes, np.full(len(nodes), 1.0 / len(nodes))
    nodes, w = gauss_legendre(n_nodes, *law.support)
    w = w * law.pdf(nodes)
    return nodes, w / w.sum()
