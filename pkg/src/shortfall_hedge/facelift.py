"""Intermediary target at the revelation date ``T``.

Before ``T`` the shaping factor is unknown, so the loss constraint at ``T*``
is replaced by the averaged best reachable loss level

    Xi(x, y) = -(D / k) * int_L (C(T, x, lam) - y)_+^k rho(dlam),
    D = exp(-k theta^2 (T* - T) / (2 (k - 1))),

whose generalised inverse in ``y`` is the terminal condition of the backward
scheme.  For a call ``C(T, x, .)`` is increasing, so the set where the
integrand is active is ``[lam*, lam_max]`` with ``C(T, x, lam*) = y``.
Continuous laws integrate over that interval directly (Gauss-Legendre
against the density), which keeps ``Xi`` and its inverse smooth; discrete
laws compare node by node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .complete import value_U
from .core import (DomainError, LossSpec, ModelParams, NumericalError, OptionSpec,
                   RngStream, ShapingLaw, lambda_quadrature, sample_lambda)
from .pricing import bs_call_price, bs_delta

_BISECT_CAP = 200


@dataclass(frozen=True)
class TerminalFields:
    value: np.ndarray
    d_x: np.ndarray
    d_p: np.ndarray
    d_pp: np.ndarray
    d_xp: np.ndarray


@dataclass(frozen=True)
class FaceliftContext:
    law: ShapingLaw
    opt: OptionSpec
    params: ModelParams
    spec: LossSpec
    n_nodes: int = 128
    tol: float = 1e-10
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes, weights = lambda_quadrature(self.law, self.n_nodes)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        ref_t, ref_w = np.polynomial.legendre.leggauss(self.n_nodes)
        object.__setattr__(self, "_ref_t", ref_t)
        object.__setattr__(self, "_ref_w", ref_w)

    # -- building blocks --------------------------------------------------

    @property
    def discount(self) -> float:
        k = self.spec.k
        tau = self.opt.T_star - self.opt.T
        return math.exp(-k * self.params.theta**2 * tau / (2.0 * (k - 1.0)))

    def call(self, x, lam):
        return bs_call_price(self.opt.T, x, lam, self.opt, self.params)

    def call_x(self, x, lam):
        return bs_delta(self.opt.T, x, lam, self.opt, self.params)

    def _active_nodes(self, x, lam_star):
        """Quadrature on ``[lam_star, lam_max]`` for continuous laws, else the fixed nodes.

        Returns ``(lam, w)`` broadcastable against ``x[..., None]``.
        """
        if not self.law.is_continuous:
            return self.nodes, self.weights
        hi = self.law.support[1]
        lo = lam_star[..., None]
        half = 0.5 * (hi - lo)
        lam = lo + half * (self._ref_t + 1.0)
        return lam, half * self._ref_w * self.law.pdf(lam)

    def _gaps(self, x, y, lam_star):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if lam_star is not None:
            lam_star = np.asarray(lam_star, dtype=float)
        lam, w = self._active_nodes(x, lam_star)
        xe = x[..., None]
        gap = self.call(xe, lam) - y[..., None]
        active = gap >= 0
        return lam, w, xe, np.where(active, gap, 0.0), active

    def _lam_star(self, x, y):
        """Smallest ``lam`` of the support with ``C(T, x, lam) >= y`` (continuous laws)."""
        lo_l, hi_l = self.law.support
        lo = np.full(np.shape(x), lo_l)
        hi = np.full(np.shape(x), hi_l)
        inside = (self.call(x, lo) < y)
        for _ in range(_BISECT_CAP):
            mid = 0.5 * (lo + hi)
            up = self.call(x, mid) < y
            lo = np.where(inside & up, mid, lo)
            hi = np.where(inside & ~up, mid, hi)
            if np.all(hi - lo <= 4 * np.finfo(float).eps * hi):
                break
        return np.where(inside, hi, lo_l)

    def _moment(self, x, y, lam_star, power, tilde=False):
        lam, w, xe, gap, active = self._gaps(x, y, lam_star)
        integrand = np.where(active, gap**power, 0.0) if power != 0 else active.astype(float)
        if tilde:
            integrand = integrand * self.call_x(xe, lam)
        return np.sum(w * integrand, axis=-1)

    def _prep(self, x, other):
        x, other = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(other, dtype=float))
        if np.any(x <= 0):
            raise DomainError("x must be > 0")
        return x, other

    # -- public operations -----------------------------------------------

    def xi(self, x, y):
        """Averaged best reachable loss level from capital ``y`` at ``X_T = x``."""
        x, y = self._prep(x, y)
        if np.any(y < -self.spec.kappa):
            raise DomainError("capital below the credit line")
        lam_star = self._lam_star(x, y) if self.law.is_continuous else None
        k = self.spec.k
        out = -(self.discount / k) * self._moment(x, y, lam_star, k)
        return float(out) if out.ndim == 0 else out

    def xi_monte_carlo(self, x: float, y: float, n: int, rng: RngStream):
        """Monte Carlo estimate of ``xi`` over ``n`` draws of the law; returns (mean, se)."""
        lam = sample_lambda(self.law, n, rng)
        vals = value_U(self.opt.T, x, y, lam, self.opt, self.params, self.spec)
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))

    def xi_robust(self, x, y, n_grid: int = 513):
        """Worst case over the support: ``max_lam U(T, x, y, lam)``."""
        x, y = self._prep(x, y)
        lo, hi = self.law.support
        grid = np.unique(np.concatenate([np.linspace(lo, hi, n_grid), self.nodes, [lo, hi]]))
        if not self.law.is_continuous:
            grid = self.nodes
        vals = value_U(self.opt.T, x[..., None], y[..., None], grid, self.opt, self.params, self.spec)
        out = np.max(vals, axis=-1)
        return float(out) if out.ndim == 0 else out

    def _solve(self, x, p):
        """Root of ``Xi(x, .) = p``; returns ``(y, lam_star)``."""
        k, D, kappa = self.spec.k, self.discount, self.spec.kappa
        lo_l, hi_l = self.law.support
        reach = (-k * p / D) ** (1.0 / k)
        c_lo = self.call(x, lo_l)

        if self.law.kind == "degenerate":
            y = np.maximum(c_lo - reach, -kappa)
            return y, None

        if self.law.is_continuous:
            lam_lo = np.full(x.shape, lo_l)
            xi_lo = -(D / k) * self._moment(x, c_lo, lam_lo, k)
            whole = p <= xi_lo
            # Interior root: bisection on lam* along y = C(T, x, lam*).
            a = np.full(x.shape, lo_l)
            b = np.full(x.shape, hi_l)
            for _ in range(_BISECT_CAP):
                mid = 0.5 * (a + b)
                val = -(D / k) * self._moment(x, self.call(x, mid), mid, k)
                enough = val >= p
                a = np.where(enough, a, mid)
                b = np.where(enough, mid, b)
                if np.all(b - a <= 4 * np.finfo(float).eps * b):
                    break
            lam_star = np.where(whole, lo_l, b)
            y_inner = self.call(x, lam_star)
            y_top = c_lo
        else:
            whole = np.ones(x.shape, dtype=bool)
            lam_star = None
            y_inner = np.zeros(x.shape)
            y_top = self.call(x, hi_l)

        if lam_star is not None:
            lam_star = np.where(whole, lo_l, lam_star)

        # Bracketed bisection in y where the active set is (or may be) everything.
        y_lo = np.maximum(c_lo - reach, -kappa)
        floor_ok = self._xi_at(x, y_lo, lam_star) >= p
        a, b = y_lo.copy(), np.array(y_top, dtype=float)
        converged = False
        for _ in range(_BISECT_CAP):
            mid = 0.5 * (a + b)
            ok = self._xi_at(x, mid, lam_star) >= p
            a = np.where(ok, a, mid)
            b = np.where(ok, mid, b)
            if np.all((b - a)[whole] <= self.tol):
                converged = True
                break
        if not converged:
            raise NumericalError("face-lift inverse: bisection tolerance not reached")
        y = b
        # One Newton polish with the analytic slope dXi/dy = D f_{k-1}.
        slope = D * self._moment(x, y, lam_star, k - 1)
        resid = self._xi_at(x, y, lam_star) - p
        step = np.where(slope > 0, resid / np.where(slope > 0, slope, 1.0), 0.0)
        y = np.where(np.abs(step) <= self.tol, y - step, y)
        y = np.where(floor_ok, y_lo, y)
        return np.where(whole, y, y_inner), lam_star

    def _xi_at(self, x, y, lam_star):
        return -(self.discount / self.spec.k) * self._moment(x, y, lam_star, self.spec.k)

    def xi_inverse(self, x, p):
        """Minimal capital at ``T`` whose averaged reachable loss level is ``p``."""
        x, p = self._prep(x, p)
        if np.any(p >= 0):
            raise DomainError("p must be < 0")
        y, _ = self._solve(x, p)
        return float(y) if y.ndim == 0 else y

    def f_moments(self, x, p):
        """``(f_{k-1}, f~_{k-1}, f_{k-2}, f~_{k-2})`` over the active set at ``Xi^{-1}(x, p)``.

        ``f~`` carries the factor ``dC(T, x, lam)/dx`` (which includes ``lam``).
        """
        x, p = self._prep(x, p)
        k = self.spec.k
        if k < 2:
            raise DomainError("moment formulas need k >= 2 (k - 2 < 0 is an improper integral)")
        if np.any(p >= 0):
            raise DomainError("p must be < 0")
        y, lam_star = self._solve(x, p)
        return self._moments_at(x, y, lam_star)

    def _moments_at(self, x, y, lam_star):
        k = self.spec.k
        lam, w, xe, gap, active = self._gaps(x, y, lam_star)
        if not np.all(np.any(active & (w > 0), axis=-1)):
            raise NumericalError("active shaping set is empty; p too close to 0 for this x")
        cx = self.call_x(xe, lam)
        g1 = np.where(active, gap ** (k - 1), 0.0)
        g2 = np.where(active, gap ** (k - 2), 0.0) if k != 2 else active.astype(float)
        out = (np.sum(w * g1, axis=-1), np.sum(w * cx * g1, axis=-1),
               np.sum(w * g2, axis=-1), np.sum(w * cx * g2, axis=-1))
        return tuple(float(v) if v.ndim == 0 else v for v in out)

    def terminal_fields(self, x, p) -> TerminalFields:
        """``Xi^{-1}`` and its derivatives ``(x, p, pp, xp)`` in one pass."""
        x, p = self._prep(x, p)
        k = self.spec.k
        if k < 2:
            raise DomainError("moment formulas need k >= 2")
        if np.any(p >= 0):
            raise DomainError("p must be < 0")
        y, lam_star = self._solve(x, p)
        f1, tf1, f2, tf2 = self._moments_at(x, y, lam_star)
        if np.any(np.asarray(f1) <= 0):
            raise NumericalError("f_{k-1} vanishes; Xi^{-1} is not differentiable here")
        d_p = 1.0 / (self.discount * f1)
        # Where the credit line binds the inverse is flat in both variables.
        free = y > -self.spec.kappa
        return TerminalFields(
            value=y,
            d_x=np.where(free, tf1 / f1, 0.0),
            d_p=np.where(free, d_p, 0.0),
            d_pp=np.where(free, (k - 1.0) * (f2 / f1) * d_p**2, 0.0),
            d_xp=np.where(free, (k - 1.0) * d_p * (tf1 * f2 - tf2 * f1) / f1**2, 0.0),
        )

    def xi_inverse_derivatives(self, x, p):
        """``(dXi^{-1}/dx, dXi^{-1}/dp, d2Xi^{-1}/dp2, d2Xi^{-1}/dxdp)``."""
        f = self.terminal_fields(x, p)
        out = (f.d_x, f.d_p, f.d_pp, f.d_xp)
        return tuple(float(v) if np.ndim(v) == 0 else v for v in out)
