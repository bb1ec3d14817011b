"""Closed-form shortfall hedging on ``[T, T*]`` once the shaping factor is known.

For the loss ``u**k / k`` the minimal capital is the call price minus a
penalty that only depends on ``p`` and the time to maturity:

    V(t, x, p, lam) = C(t, x, lam) - (-k p)**(1/k) * exp(theta^2 (T* - t) / (2 (k - 1)))

The constraint process ``P`` is a martingale under the physical measure with
constant volatility ``a* = -k theta / (k - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, LossSpec, ModelParams, OptionSpec
from .pricing import bs_call_price, bs_delta, bs_gamma, bs_theta


@dataclass(frozen=True)
class CompleteMarketState:
    t: float
    x: float
    p: float
    lam: float = 1.0

    def __post_init__(self):
        if not self.x > 0:
            raise DomainError(f"x must be > 0, got {self.x}")
        if not self.p < 0:
            raise DomainError(f"p must be < 0, got {self.p}")
        if not self.lam > 0:
            raise DomainError(f"lambda must be > 0, got {self.lam}")


def _neg_p(p):
    p = np.asarray(p, dtype=float)
    if np.any(p >= 0):
        raise DomainError("loss level p must be < 0")
    return -p


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def penalty_growth(t, opt: OptionSpec, params: ModelParams, spec: LossSpec):
    """``exp(theta^2 (T* - t) / (2 (k - 1)))``."""
    tau = opt.T_star - np.asarray(t, dtype=float)
    return np.exp(params.theta**2 * tau / (2.0 * (spec.k - 1.0)))


def value_V(t, x, p, lam, opt: OptionSpec, params: ModelParams, spec: LossSpec):
    k = spec.k
    q = _neg_p(p)
    C = bs_call_price(t, x, lam, opt, params)
    return _scalar(C - (k * q) ** (1.0 / k) * penalty_growth(t, opt, params, spec))


def value_U(t, x, y, lam, opt: OptionSpec, params: ModelParams, spec: LossSpec):
    """Best expected-loss level reachable from capital ``y``; zero once ``y >= C``."""
    y = np.asarray(y, dtype=float)
    if np.any(y < -spec.kappa):
        raise DomainError("capital below the credit line")
    k = spec.k
    gap = np.maximum(bs_call_price(t, x, lam, opt, params) - y, 0.0)
    return _scalar(-(gap**k) / k * penalty_growth(t, opt, params, spec) ** (-k))


@dataclass(frozen=True)
class ValueDerivatives:
    V_t: np.ndarray
    V_x: np.ndarray
    V_xx: np.ndarray
    V_p: np.ndarray
    V_pp: np.ndarray
    V_xp: np.ndarray


def derivatives_V(t, x, p, lam, opt: OptionSpec, params: ModelParams,
                  spec: LossSpec) -> ValueDerivatives:
    k = spec.k
    q = _neg_p(p)
    growth = penalty_growth(t, opt, params, spec)
    kq = k * q
    V_t = (bs_theta(t, x, lam, opt, params)
           + kq ** (1.0 / k) * params.theta**2 / (2.0 * (k - 1.0)) * growth)
    V_p = np.exp((1.0 - k) / k * np.log(kq)) * growth
    V_pp = (k - 1.0) * kq ** (1.0 / k - 2.0) * growth
    shape = np.broadcast(np.asarray(t), np.asarray(x), q, np.asarray(lam)).shape
    return ValueDerivatives(
        V_t=_scalar(np.broadcast_to(V_t, shape)),
        V_x=_scalar(np.broadcast_to(bs_delta(t, x, lam, opt, params), shape)),
        V_xx=_scalar(np.broadcast_to(bs_gamma(t, x, lam, opt, params), shape)),
        V_p=_scalar(np.broadcast_to(V_p, shape)),
        V_pp=_scalar(np.broadcast_to(V_pp, shape)),
        V_xp=_scalar(np.zeros(shape)),
    )


def control_from_derivatives(x, p, V_p, V_xp, V_pp, params: ModelParams):
    """``(theta V_p - sigma x V_xp) / (p V_pp)``, the minimiser of the HJB control term."""
    V_pp = np.asarray(V_pp, dtype=float)
    if np.any(V_pp == 0):
        raise DomainError("V_pp vanishes; the control is undefined")
    x, p = np.asarray(x, dtype=float), np.asarray(p, dtype=float)
    return _scalar((params.theta * V_p - params.sigma * x * V_xp) / (p * V_pp))


def constant_control(params: ModelParams, spec: LossSpec) -> float:
    return -spec.k * params.theta / (spec.k - 1.0)


def optimal_a(t, x, p, lam, opt, params, spec):
    d = derivatives_V(t, x, p, lam, opt, params, spec)
    return control_from_derivatives(x, p, d.V_p, d.V_xp, d.V_pp, params)


def hedge_from_derivatives(x, p, a, V_x, V_p, params: ModelParams):
    """Asset position ``V_x + a p V_p / (sigma x)``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("x must be > 0")
    return _scalar(V_x + a * np.asarray(p) * V_p / (params.sigma * x))


def optimal_nu(t, x, p, lam, opt, params, spec):
    d = derivatives_V(t, x, p, lam, opt, params, spec)
    a = control_from_derivatives(x, p, d.V_p, d.V_xp, d.V_pp, params)
    return hedge_from_derivatives(x, p, a, d.V_x, d.V_p, params)


def p_explicit(s, x_s, t, x, p, params: ModelParams, spec: LossSpec):
    """Constraint martingale at time ``s`` started from ``P_t = p`` at ``X_t = x``.

    With ``a = -k theta / (k - 1)`` this is ``p exp(a (W_s - W_t) - a^2 (s - t) / 2)``
    rewritten through the asset price, so ``E[P_s] = p`` under the physical
    measure.
    """
    _neg_p(p)
    s, t = np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    if np.any(s < t):
        raise DomainError("need s >= t")
    a = constant_control(params, spec)
    mu, sigma = params.mu, params.sigma
    rate = -a * (mu - 0.5 * sigma**2) / sigma - 0.5 * a * a
    ratio = np.asarray(x_s, dtype=float) / np.asarray(x, dtype=float)
    return _scalar(p * ratio ** (a / sigma) * np.exp(rate * (s - t)))


def p_explicit_verbatim(s, x_s, t, x, p, params: ModelParams, spec: LossSpec):
    """The printed variant ``p (X_s/x)^(-k mu / ((k-1) sigma^2)) exp(k^2 (theta^2 - mu)(s-t) / (2(k-1)))``.

    Kept only to document that it is not a martingale when ``mu != 0``.
    """
    k, mu, sigma = spec.k, params.mu, params.sigma
    ratio = np.asarray(x_s, dtype=float) / np.asarray(x, dtype=float)
    expo = -k / (k - 1.0) * mu / sigma**2
    rate = k * k * (params.theta**2 - mu) / (2.0 * (k - 1.0))
    return _scalar(p * ratio**expo * np.exp(rate * (np.asarray(s) - np.asarray(t))))


def u_reference(s, x, t0, x0, p0, opt, params, spec, lam=1.0):
    """Value along the explicit constraint path: ``V(s, x, P_s(x), lam)``."""
    P = p_explicit(s, x, t0, x0, p0, params, spec)
    return value_V(s, x, P, lam, opt, params, spec)


def nu_reference(s, x, t0, x0, p0, opt, params, spec, lam=1.0):
    P = p_explicit(s, x, t0, x0, p0, params, spec)
    return optimal_nu(s, x, P, lam, opt, params, spec)
