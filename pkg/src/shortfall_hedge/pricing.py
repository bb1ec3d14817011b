"""Zero-rate Black-Scholes price and sensitivities of the call ``(lambda x - K)^+``."""

import numpy as np
from scipy.special import ndtr

from .core import DomainError, ModelParams, OptionSpec

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _norm_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _check(t, x, lam, opt):
    t, x, lam = (np.asarray(v, dtype=float) for v in (t, x, lam))
    if np.any(x <= 0):
        raise DomainError("asset price must be > 0")
    if np.any(lam <= 0):
        raise DomainError("shaping factor must be > 0")
    tau = opt.T_star - t
    if np.any(tau < 0):
        raise DomainError("evaluation time beyond option maturity")
    return tau, x, lam


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def _d1(tau, x, lam, K, sigma):
    vol = sigma * np.sqrt(tau)
    return (np.log(lam * x / K) + 0.5 * vol * vol) / vol, vol


def bs_call_price(t, x, lam, opt: OptionSpec, params: ModelParams):
    """``E^Q[(lam X_{T*} - K)^+ | X_t = x]``; equals the payoff at ``t = T*``."""
    tau, x, lam = _check(t, x, lam, opt)
    live = tau > 0
    d1, vol = _d1(np.where(live, tau, 1.0), x, lam, opt.K, params.sigma)
    price = lam * x * ndtr(d1) - opt.K * ndtr(d1 - vol)
    return _scalar(np.where(live, price, np.maximum(lam * x - opt.K, 0.0)))


def bs_delta(t, x, lam, opt: OptionSpec, params: ModelParams):
    """``dC/dx``, including the factor ``lam``; at expiry ``lam * 1{lam x > K}``."""
    tau, x, lam = _check(t, x, lam, opt)
    live = tau > 0
    d1, _ = _d1(np.where(live, tau, 1.0), x, lam, opt.K, params.sigma)
    return _scalar(np.where(live, lam * ndtr(d1), np.where(lam * x > opt.K, lam, 0.0)))


def bs_gamma(t, x, lam, opt: OptionSpec, params: ModelParams):
    tau, x, lam = _check(t, x, lam, opt)
    if np.any(tau == 0):
        raise DomainError("gamma is singular at expiry")
    d1, vol = _d1(tau, x, lam, opt.K, params.sigma)
    return _scalar(lam * _norm_pdf(d1) / (x * vol))


def bs_theta(t, x, lam, opt: OptionSpec, params: ModelParams):
    """``dC/dt = -sigma^2 x^2 C_xx / 2`` (zero rate)."""
    x = np.asarray(x, dtype=float)
    return _scalar(-0.5 * params.sigma**2 * x * x * bs_gamma(t, x, lam, opt, params))
