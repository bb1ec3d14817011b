"""Path-level hedging of the call with the shortfall-risk (SR) strategy and a naive delta hedge.

Both strategies run on the same asset paths and the same shaping-factor draws
(asset shocks on stream 0, shaping draws on stream 1 of the seed), so their
differences are attributable to the strategy alone.  The hedging error is
``e = (Lambda X_{T*} - K)^+ - Y_{T*}``; positive values are losses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .complete import constant_control, p_explicit, penalty_growth, value_U
from .core import (DAYS_PER_YEAR, DomainError, LossSpec, ModelParams, OptionSpec, RngStream,
                   ShapingLaw, TimeGrid, loss, sample_lambda, simulate_gbm)
from .pricing import bs_call_price, bs_delta
from .solver import ValueSurface, evaluate_surface, one_step

CVAR_LEVELS = (0.90, 0.95, 0.99)
Z95 = 1.96


@dataclass(frozen=True)
class BacktestConfig:
    """Everything a hedging run needs.  ``bs_post_lambda`` is ``"realized"`` or ``"belief"``."""

    params: ModelParams
    opt: OptionSpec
    law: ShapingLaw
    spec: LossSpec
    x0: float
    lam0: float
    n_paths: int = 10_000
    seed: int = 0
    steps_per_year: int = DAYS_PER_YEAR
    bs_post_lambda: str = "realized"

    def __post_init__(self):
        if self.n_paths < 1:
            raise DomainError("need at least one hedging path")
        if not self.x0 > 0 or not self.lam0 > 0:
            raise DomainError("x0 and lam0 must be > 0")
        if self.bs_post_lambda not in ("realized", "belief"):
            raise DomainError("bs_post_lambda must be 'realized' or 'belief'")
        # Both horizons must sit on the rebalancing grid.
        self._steps(self.opt.T)
        self._steps(self.opt.T_star)

    @property
    def dt(self) -> float:
        return 1.0 / self.steps_per_year

    def _steps(self, horizon: float) -> int:
        n = round(horizon * self.steps_per_year)
        if abs(n - horizon * self.steps_per_year) > 1e-9 * max(1, n):
            raise DomainError(f"horizon {horizon} is not a whole number of rebalancing steps")
        return n

    @property
    def n_T(self) -> int:
        return self._steps(self.opt.T)

    @property
    def n_total(self) -> int:
        return self._steps(self.opt.T_star)

    @property
    def grid_T(self) -> TimeGrid:
        """Rebalancing grid on ``[0, T]``; a solved surface must share it."""
        return TimeGrid(self.opt.T, self.n_T)

    @property
    def belief_outside_support(self) -> bool:
        """A benchmark belief outside the law's support is allowed but flagged."""
        lo, hi = self.law.support
        return not lo <= self.lam0 <= hi


@dataclass
class Paths:
    """Common random numbers: asset paths on ``[0, T*]`` under the physical measure and ``Lambda``."""

    times: np.ndarray
    X: np.ndarray
    lam: np.ndarray


def simulate_paths(cfg: BacktestConfig) -> Paths:
    rng = RngStream(cfg.seed)
    grid = TimeGrid(cfg.opt.T_star, cfg.n_total)
    X = simulate_gbm(cfg.params, cfg.x0, grid, "P", rng.child(0), cfg.n_paths)
    lam = sample_lambda(cfg.law, cfg.n_paths, rng.child(1))
    return Paths(times=grid.times, X=X, lam=lam)


def shortfall_risk(errors, spec: LossSpec) -> float:
    """``(mean of l(e^+))^(1/k)``, in currency units."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise DomainError("empty error sample")
    return float(np.mean(loss(np.maximum(e, 0.0), spec)) ** (1.0 / spec.k))


def cvar(errors, q: float) -> float:
    """Mean of the worst ``1 - q`` fraction of the errors."""
    if not 0 < q < 1:
        raise DomainError("quantile level must lie in (0, 1)")
    e = np.sort(np.asarray(errors, dtype=float))[::-1]
    n_tail = math.ceil(round((1.0 - q) * e.size, 9))
    if n_tail < 1:
        raise DomainError("fewer than one tail observation")
    return float(math.fsum(e[:n_tail]) / n_tail)


@dataclass
class HedgeReport:
    strategy: str
    initial_capital: float
    errors: np.ndarray
    spec: LossSpec
    breaches: int = 0
    nu: Optional[np.ndarray] = field(default=None, repr=False)
    wealth: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def losses(self) -> np.ndarray:
        return loss(np.maximum(self.errors, 0.0), self.spec)

    @property
    def expected_loss(self) -> float:
        return math.fsum(self.losses) / self.errors.size

    @property
    def shortfall_risk(self) -> float:
        return shortfall_risk(self.errors, self.spec)

    def cvar(self, q: float) -> float:
        return cvar(self.errors, q)

    @property
    def stddev(self) -> float:
        return float(np.std(self.errors, ddof=1)) if self.errors.size > 1 else 0.0

    @property
    def ci_halfwidth(self) -> float:
        """95% half-width of the expected loss."""
        n = self.errors.size
        return Z95 * float(np.std(self.losses, ddof=1)) / math.sqrt(n) if n > 1 else math.inf

    def summary_row(self) -> dict:
        row = {"strategy": self.strategy, "initial_capital": self.initial_capital,
               "expected_loss": self.expected_loss, "shortfall_risk": self.shortfall_risk}
        for q in CVAR_LEVELS:
            row[f"cvar@{q:.2f}"] = self.cvar(q)
        row["stddev"] = self.stddev
        row["ci_halfwidth"] = self.ci_halfwidth
        return row


def paired_halfwidth(a: HedgeReport, b: HedgeReport) -> float:
    """95% half-width of the mean of per-path loss differences (common random numbers)."""
    d = a.losses - b.losses
    return Z95 * float(np.std(d, ddof=1)) / math.sqrt(d.size)


def _rollout(cfg: BacktestConfig, paths: Paths, y0: np.ndarray, hedge_before, hedge_after,
             keep: bool):
    """Self-financing bookkeeping ``Y+ = Y + nu (X+ - X)`` with a switch at ``T``."""
    n_T, n = cfg.n_T, cfg.n_total
    X, times = paths.X, paths.times
    Y = np.array(y0, dtype=float)
    nus = np.empty((cfg.n_paths, n)) if keep else None
    ys = np.empty((cfg.n_paths, n + 1)) if keep else None
    breached = np.zeros(cfg.n_paths, dtype=bool)
    state = None
    for i in range(n):
        if i < n_T:
            nu = hedge_before(i, X[:, i], X[:, i + 1])
        else:
            if i == n_T:
                state = hedge_after.start(X[:, i], Y)
            nu = hedge_after(state, times[i], X[:, i])
        if keep:
            nus[:, i] = nu
            ys[:, i] = Y
        Y = Y + nu * (X[:, i + 1] - X[:, i])
        breached |= Y < -cfg.spec.kappa
    if keep:
        ys[:, n] = Y
    payoff = cfg.opt.payoff(paths.lam * X[:, n])
    return payoff - Y, int(breached.sum()), nus, ys


class _CompleteMarketHedge:
    """On ``[T, T*]``: the closed-form SR hedge restarted from ``p_T = U(T, X_T, Y_T, Lambda)``."""

    def __init__(self, cfg: BacktestConfig, lam):
        self.cfg, self.lam = cfg, lam

    def start(self, x_T, y_T):
        c = self.cfg
        y = np.maximum(y_T, -c.spec.kappa)
        p_T = value_U(c.opt.T, x_T, y, self.lam, c.opt, c.params, c.spec)
        return {"x_T": x_T, "p_T": np.asarray(p_T, dtype=float)}

    def __call__(self, state, t, x):
        c = self.cfg
        delta = bs_delta(t, x, self.lam, c.opt, c.params)
        p_T = state["p_T"]
        live = p_T < 0
        safe = np.where(live, p_T, -1.0)
        P = p_explicit(t, x, c.opt.T, state["x_T"], safe, c.params, c.spec)
        # p V_p = -(-k P)^(1/k) growth / k in closed form.
        k = c.spec.k
        pVp = -((-k * P) ** (1.0 / k)) * penalty_growth(t, c.opt, c.params, c.spec) / k
        corr = constant_control(c.params, c.spec) * pVp / (c.params.sigma * x)
        return delta + np.where(live, corr, 0.0)


class _DeltaHedge:
    def __init__(self, cfg: BacktestConfig, lam):
        self.cfg, self.lam = cfg, lam

    def start(self, x_T, y_T):
        return None

    def __call__(self, state, t, x):
        return bs_delta(t, x, self.lam, self.cfg.opt, self.cfg.params)


def run_sr(cfg: BacktestConfig, surface: ValueSurface, paths: Optional[Paths] = None,
           keep_paths: bool = False) -> HedgeReport:
    """Surface-driven hedge on ``[0, T]``, then the closed-form hedge for the revealed ``Lambda``."""
    if surface.config.grid.N != cfg.n_T or not math.isclose(surface.config.grid.T, cfg.opt.T):
        raise DomainError("surface time grid does not match the rebalancing grid on [0, T]")
    paths = paths or simulate_paths(cfg)
    p0 = cfg.spec.p_threshold
    y0 = evaluate_surface(surface, 0, cfg.x0, p0).V
    params, dt = cfg.params, cfg.dt
    P = np.full(cfg.n_paths, p0)

    def before(i, x, x_next):
        nonlocal P
        f = evaluate_surface(surface, i, x, P)
        nu = f.V_x + f.a * P * f.V_p / (params.sigma * x)
        eps_q = (np.log(x_next / x) + 0.5 * params.sigma**2 * dt) / (params.sigma * math.sqrt(dt))
        _, P = one_step(x, P, f.a, dt, eps_q, params)
        return nu

    errors, breaches, nus, ys = _rollout(cfg, paths, np.full(cfg.n_paths, y0), before,
                                         _CompleteMarketHedge(cfg, paths.lam), keep_paths)
    return HedgeReport("SR", float(y0), errors, cfg.spec, breaches, nus, ys)


def run_sr_complete(cfg: BacktestConfig, p_abs: Optional[float] = None,
                    paths: Optional[Paths] = None, keep_paths: bool = False) -> HedgeReport:
    """SR hedge on ``[T, T*]`` only, for a degenerate law: capital ``V(T, X_T, p, lam0)``.

    The asset path is the segment of ``paths`` after ``T``, restarted at ``x0``.
    """
    if cfg.law.kind != "degenerate":
        raise DomainError("the [T, T*] closed-form run needs a degenerate shaping law")
    paths = paths or simulate_paths(cfg)
    p = -abs(p_abs) if p_abs is not None else cfg.spec.p_threshold
    lam = cfg.law.lam0
    n_T = cfg.n_T
    Xs = paths.X[:, n_T:] * (cfg.x0 / paths.X[:, n_T:n_T + 1])
    c = cfg.opt
    k = cfg.spec.k
    y0 = float(bs_call_price(c.T, cfg.x0, lam, c, cfg.params)
               - (-k * p) ** (1.0 / k) * penalty_growth(c.T, c, cfg.params, cfg.spec))
    hedge = _CompleteMarketHedge(cfg, np.full(cfg.n_paths, lam))
    state = {"x_T": Xs[:, 0], "p_T": np.full(cfg.n_paths, p)}
    Y = np.full(cfg.n_paths, y0)
    times = paths.times[n_T:]
    nus = np.empty((cfg.n_paths, len(times) - 1)) if keep_paths else None
    for j in range(len(times) - 1):
        nu = hedge(state, times[j], Xs[:, j])
        if keep_paths:
            nus[:, j] = nu
        Y = Y + nu * (Xs[:, j + 1] - Xs[:, j])
    errors = c.payoff(lam * Xs[:, -1]) - Y
    return HedgeReport("SR", y0, errors, cfg.spec, int(np.sum(Y < -cfg.spec.kappa)), nus)


def run_bs_naive(cfg: BacktestConfig, paths: Optional[Paths] = None,
                 keep_paths: bool = False) -> HedgeReport:
    """Delta hedge under the belief ``lam0`` up to ``T``, then under the realised ``Lambda``."""
    paths = paths or simulate_paths(cfg)
    c = cfg.opt
    y0 = float(bs_call_price(0.0, cfg.x0, cfg.lam0, c, cfg.params))
    times = paths.times

    def before(i, x, x_next):
        return bs_delta(times[i], x, cfg.lam0, c, cfg.params)

    post = paths.lam if cfg.bs_post_lambda == "realized" else np.full(cfg.n_paths, cfg.lam0)
    errors, breaches, nus, ys = _rollout(cfg, paths, np.full(cfg.n_paths, y0), before,
                                         _DeltaHedge(cfg, post), keep_paths)
    return HedgeReport("BS", y0, errors, cfg.spec, breaches, nus, ys)


def write_errors_csv(path, report: HedgeReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "terminal_error"])
        for m, e in enumerate(report.errors):
            w.writerow([m, repr(float(e))])


def write_summary_csv(path, reports, extra_cols=None):
    """One row per report; ``extra_cols`` is a list of dicts merged in front of each row."""
    rows = []
    for j, r in enumerate(reports):
        row = dict(extra_cols[j]) if extra_cols else {}
        row.update(r.summary_row())
        rows.append(row)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})
