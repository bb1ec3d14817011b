"""Backward scheme on ``[0, T]`` for the value surface and its feedback control.

Each layer is computed node by node on a tensor grid in ``(log x, log(-p))``.
With the control frozen at a node the one-step transition of ``(X, P)`` is
driven by a single Gaussian, so the conditional expectations are computed by
Gauss-Hermite quadrature (or by Monte Carlo as a cross-check).  Derivatives
travel backwards through tangent processes:

    V_x  = E[X+ V_x+] / x           V_p  = E[P+ V_p+] / p
    V_xp = E[X+ P+ V_xp+] / (x p)   V_pp = E[P+^2 V_pp+] / p^2

and the control is the fixed point of

    a -> (theta E[P+ V_p+] - sigma E[X+ P+ V_xp+]) / E[P+^2 V_pp+].
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import DomainError, ModelParams, NumericalError, RngStream, TimeGrid
from .complete import control_from_derivatives
from .facelift import FaceliftContext

log = logging.getLogger(__name__)

FIELDS = ("V", "V_x", "V_p", "V_xp", "V_pp", "a")


@dataclass(frozen=True)
class SolverConfig:
    """Grid, expectation engine and fixed-point settings.

    ``p_nodes`` are stored increasing, i.e. from the most negative level up
    towards zero.
    """

    grid: TimeGrid
    x_nodes: np.ndarray
    p_nodes: np.ndarray
    engine: str = "gauss_hermite"
    n_gh: int = 64
    n_mc: int = 100_000
    eps: float = 1e-3
    max_fp_iters: int = 3
    extrap_limit: float = 1.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        x = np.asarray(self.x_nodes, dtype=float)
        p = np.sort(np.asarray(self.p_nodes, dtype=float))
        if x.ndim != 1 or p.ndim != 1 or len(x) < 2 or len(p) < 2:
            raise DomainError("need at least two x-nodes and two p-nodes")
        if np.any(x <= 0):
            raise DomainError("x-nodes must be > 0")
        if np.any(p >= 0):
            raise DomainError("p-nodes must be < 0")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(p) <= 0):
            raise DomainError("grid nodes must be distinct and x-nodes increasing")
        if self.engine not in ("gauss_hermite", "monte_carlo"):
            raise DomainError(f"unknown expectation engine {self.engine!r}")
        if self.n_gh < 1 or self.n_mc < 2 or self.max_fp_iters < 1 or not self.eps > 0:
            raise DomainError("invalid engine or fixed-point settings")
        if self.threads < 1:
            raise DomainError("threads must be >= 1")
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "p_nodes", p)

    @classmethod
    def log_grid(cls, grid: TimeGrid, x_range, p_abs_range, R_x: int = 81, R_p: int = 41,
                 **kw) -> "SolverConfig":
        """Log-spaced nodes: ``x`` over ``x_range`` and ``-p`` over ``p_abs_range``."""
        x = np.geomspace(x_range[0], x_range[1], R_x)
        p = -np.geomspace(p_abs_range[1], p_abs_range[0], R_p)
        return cls(grid=grid, x_nodes=x, p_nodes=p, **kw)

    @classmethod
    def default(cls, grid: TimeGrid, x0: float, p0: float, **kw) -> "SolverConfig":
        """``R_x = 201`` on ``[x0/2, 2 x0]`` and ``R_p = 121`` on ``[|p0|/10, 10 |p0|]``."""
        q = abs(p0)
        kw.setdefault("R_x", 201)
        kw.setdefault("R_p", 121)
        return cls.log_grid(grid, (0.5 * x0, 2.0 * x0), (q / 10.0, 10.0 * q), **kw)

    @property
    def shape(self):
        return (len(self.x_nodes), len(self.p_nodes))

    def mesh(self):
        return np.meshgrid(self.x_nodes, self.p_nodes, indexing="ij")


@dataclass(frozen=True)
class Layer:
    """One sealed time slice: fields on the ``(x, p)`` mesh plus fixed-point diagnostics."""

    i: int
    t: float
    V: np.ndarray
    V_x: np.ndarray
    V_p: np.ndarray
    V_xp: np.ndarray
    V_pp: np.ndarray
    a: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([getattr(self, f) for f in FIELDS], axis=-1)


@dataclass(frozen=True)
class SurfacePoint:
    V: np.ndarray
    V_x: np.ndarray
    V_p: np.ndarray
    V_xp: np.ndarray
    V_pp: np.ndarray
    a: np.ndarray


@dataclass
class ValueSurface:
    config: SolverConfig
    params: ModelParams
    layers: dict = field(default_factory=dict)

    def layer(self, i: int) -> Layer:
        if i not in self.layers:
            raise DomainError(f"layer {i} is not populated")
        return self.layers[i]

    def to_csv(self, path, layers=None):
        """Columns ``i, t_i, x, p, V, V_p, V_xp, V_pp, a, V_x``."""
        X, P = self.config.mesh()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "t_i", "x", "p", "V", "V_p", "V_xp", "V_pp", "a", "V_x"])
            for i in sorted(self.layers) if layers is None else layers:
                L = self.layers[i]
                for row in zip(X.ravel(), P.ravel(), L.V.ravel(), L.V_p.ravel(),
                               L.V_xp.ravel(), L.V_pp.ravel(), L.a.ravel(), L.V_x.ravel()):
                    w.writerow([i, repr(float(L.t))] + [repr(float(v)) for v in row])


class _Interp:
    """Bilinear interpolation of a layer in ``(log x, log(-p))`` with flat extrapolation.

    Hand-rolled because every call evaluates all fields at once on millions of
    points, where a gather on a fixed tensor grid is several times faster than
    a general interpolator.
    """

    def __init__(self, config: SolverConfig, layer: Layer, fields=FIELDS):
        self.lx = np.log(config.x_nodes)
        self.lq = np.log(-config.p_nodes)[::-1]
        self.values = np.ascontiguousarray(
            np.stack([getattr(layer, f) for f in fields], axis=-1)[:, ::-1, :])
        self.limit = config.extrap_limit

    def _locate(self, coord, nodes, name):
        lo, hi = nodes[0], nodes[-1]
        reach = self.limit * (hi - lo)
        if np.any(coord < lo - reach) or np.any(coord > hi + reach):
            raise NumericalError(f"interpolation target in {name} lies far outside the grid")
        coord = np.clip(coord, lo, hi)
        j = np.clip(np.searchsorted(nodes, coord, side="right") - 1, 0, len(nodes) - 2)
        w = (coord - nodes[j]) / (nodes[j + 1] - nodes[j])
        return j, w

    def __call__(self, x, p) -> np.ndarray:
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        j, wx = self._locate(np.log(x), self.lx, "x")
        m, wq = self._locate(np.log(-p), self.lq, "p")
        n_q = len(self.lq)
        flat = self.values.reshape(-1, self.values.shape[-1])
        base = j * n_q + m
        wx, wq = wx[..., None], wq[..., None]
        return ((1 - wx) * ((1 - wq) * flat[base] + wq * flat[base + 1])
                + wx * ((1 - wq) * flat[base + n_q] + wq * flat[base + n_q + 1]))


def one_step(x, p, a, dt, eps, params: ModelParams):
    """Exact lognormal step of ``X`` and the exponential step of ``P`` driven by the same ``eps``.

    ``eps`` is the pricing-measure shock of the asset, so
    ``P+ = p exp(a sqrt(dt) eps - (a theta + a^2 / 2) dt)`` realises
    ``dP = a P dW`` with ``W`` the physical Brownian motion.
    """
    if not dt > 0:
        raise DomainError("dt must be > 0")
    sigma, theta = params.sigma, params.theta
    sq = math.sqrt(dt)
    x_next = x * np.exp(sigma * sq * eps - 0.5 * sigma**2 * dt)
    p_next = p * np.exp(a * sq * eps - (a * theta + 0.5 * a * a) * dt)
    return x_next, p_next


def gauss_hermite(n: int):
    """Nodes and probability weights for expectations over a standard normal."""
    z, w = np.polynomial.hermite_e.hermegauss(n)
    return z, w / w.sum()


@dataclass(frozen=True)
class StepResult:
    V: np.ndarray
    V_x: np.ndarray
    V_p: np.ndarray
    V_xp: np.ndarray
    V_pp: np.ndarray
    moments: tuple
    se: Optional[np.ndarray] = None


def _draws(config: SolverConfig, x, layer_index: int, node_ids):
    """Shocks of shape ``x.shape + (n,)`` and their weights."""
    if config.engine == "gauss_hermite":
        z, w = gauss_hermite(config.n_gh)
        return np.broadcast_to(z, x.shape + z.shape), w
    M = config.n_mc
    n_total = int(np.prod(config.shape))
    ids = np.asarray(node_ids).ravel()
    eps = np.empty((ids.size, M))
    for j, node in enumerate(ids):
        eps[j] = RngStream(config.seed, layer_index * n_total + int(node)).normals(M)
    return eps.reshape(x.shape + (M,)), np.full(M, 1.0 / M)


def step_expectations(x, p, a, interp: _Interp, config: SolverConfig, params: ModelParams,
                      layer_index: int = 0, node_ids=None) -> StepResult:
    """One-step conditional expectations at nodes ``(x, p)`` under control ``a``.

    ``moments`` holds ``(E[P+ V_p+], E[X+ P+ V_xp+], E[P+^2 V_pp+])`` which
    the fixed-point map reuses.  In Monte Carlo mode ``se`` is the standard
    error of ``V``.
    """
    x, p, a = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, p, a)))
    if node_ids is None:
        node_ids = np.arange(x.size).reshape(x.shape)
    eps, w = _draws(config, x, layer_index, node_ids)
    xn, pn = one_step(x[..., None], p[..., None], a[..., None], config.grid.dt, eps, params)
    f = interp(xn, pn)
    V, Vx, Vp, Vxp, Vpp = (f[..., j] for j in range(5))
    mean = lambda arr: np.sum(w * arr, axis=-1)  # noqa: E731
    E_V = mean(V)
    E_xVx = mean(xn * Vx)
    E_pVp = mean(pn * Vp)
    E_xpVxp = mean(xn * pn * Vxp)
    E_ppVpp = mean(pn * pn * Vpp)
    se = None
    if config.engine == "monte_carlo":
        se = np.std(V, axis=-1, ddof=1) / math.sqrt(V.shape[-1])
    return StepResult(V=E_V, V_x=E_xVx / x, V_p=E_pVp / p, V_xp=E_xpVxp / (x * p),
                      V_pp=E_ppVpp / (p * p), moments=(E_pVp, E_xpVxp, E_ppVpp), se=se)


def _control_map(moments, params: ModelParams):
    E_pVp, E_xpVxp, E_ppVpp = moments
    if np.any(E_ppVpp <= 0):
        raise NumericalError("E[P+^2 V_pp+] <= 0: convexity in p is lost")
    return (params.theta * E_pVp - params.sigma * E_xpVxp) / E_ppVpp


def fixed_point_control(x, p, a_init, interp: _Interp, config: SolverConfig,
                        params: ModelParams, layer_index: int = 0, node_ids=None):
    """Iterate the control map from ``a_init``; returns ``(a, iterations, residual, step)``.

    ``step`` is the :class:`StepResult` evaluated at the returned control.
    """
    a = np.array(np.broadcast_to(np.asarray(a_init, dtype=float), np.shape(x)))
    iters = np.zeros(np.shape(x), dtype=int)
    resid = np.full(np.shape(x), np.inf)
    active = np.ones(np.shape(x), dtype=bool)
    for _ in range(config.max_fp_iters):
        step = step_expectations(x, p, a, interp, config, params, layer_index, node_ids)
        a_new = _control_map(step.moments, params)
        delta = np.abs(a_new - a)
        resid = np.where(active, delta, resid)
        iters = iters + active
        a = np.where(active, a_new, a)
        active = active & (delta > config.eps)
        if not active.any():
            break
    if active.any():
        log.info("fixed point not converged at %d nodes (max residual %.3g)",
                 int(active.sum()), float(resid[active].max()))
    step = step_expectations(x, p, a, interp, config, params, layer_index, node_ids)
    return a, iters, resid, step


def init_terminal(config: SolverConfig, ctx: FaceliftContext) -> Layer:
    """Layer ``N``: the face-lifted target inverse and its derivatives at every node."""
    X, P = config.mesh()
    try:
        f = ctx.terminal_fields(X, P)
    except (DomainError, NumericalError) as exc:
        raise type(exc)(f"terminal layer: {exc}") from exc
    if np.any(f.d_pp <= 0):
        j, m = np.argwhere(f.d_pp <= 0)[0]
        raise NumericalError(f"terminal V_pp <= 0 at node x={X[j, m]:.6g}, p={P[j, m]:.6g}")
    a = control_from_derivatives(X, P, f.d_p, f.d_xp, f.d_pp, ctx.params)
    N = config.grid.N
    zeros = np.zeros(config.shape, dtype=int)
    return Layer(i=N, t=config.grid.T, V=np.asarray(f.value), V_x=np.asarray(f.d_x),
                 V_p=np.asarray(f.d_p), V_xp=np.asarray(f.d_xp), V_pp=np.asarray(f.d_pp),
                 a=np.asarray(a), iterations=zeros, residual=np.zeros(config.shape))


def _row_chunks(n_rows: int, threads: int):
    bounds = np.linspace(0, n_rows, threads + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _envelope(params: ModelParams, k: float) -> float:
    return 10.0 * k * abs(params.theta) / (k - 1.0) + 1.0


def solve_backward(config: SolverConfig, ctx: FaceliftContext) -> ValueSurface:
    """Layers ``N`` down to ``0``; layer 0 is the capital surface at time zero."""
    params = ctx.params
    surface = ValueSurface(config=config, params=params)
    layer = init_terminal(config, ctx)
    surface.layers[layer.i] = layer
    X, P = config.mesh()
    ids = np.arange(X.size).reshape(X.shape)
    times = config.grid.times
    threads = int(config.threads)
    envelope = _envelope(params, ctx.spec.k)
    for i in range(config.grid.N - 1, -1, -1):
        interp = _Interp(config, layer)

        def work(rows, i=i, interp=interp, prev=layer):
            return fixed_point_control(X[rows], P[rows], prev.a[rows], interp, config,
                                       params, i, ids[rows])

        chunks = _row_chunks(X.shape[0], threads)
        try:
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    parts = list(pool.map(work, chunks))
            else:
                parts = [work(rows) for rows in chunks]
        except NumericalError as exc:
            raise NumericalError(f"layer {i}: {exc}") from exc
        cat = lambda get: np.concatenate([get(pt) for pt in parts], axis=0)  # noqa: E731
        a = cat(lambda pt: pt[0])
        layer = Layer(i=i, t=float(times[i]),
                      V=cat(lambda pt: pt[3].V), V_x=cat(lambda pt: pt[3].V_x),
                      V_p=cat(lambda pt: pt[3].V_p), V_xp=cat(lambda pt: pt[3].V_xp),
                      V_pp=cat(lambda pt: pt[3].V_pp), a=a,
                      iterations=cat(lambda pt: pt[1]), residual=cat(lambda pt: pt[2]))
        bad = np.argwhere(layer.V_pp <= 0)
        if bad.size:
            j, m = bad[0]
            raise NumericalError(f"layer {i}: V_pp <= 0 at node x={X[j, m]:.6g}, p={P[j, m]:.6g}")
        wild = np.abs(a) > envelope
        if wild.any():
            log.warning("layer %d: |a| above %.3g at %d nodes", i, envelope, int(wild.sum()))
        surface.layers[i] = layer
    return surface


def evaluate_surface(surface: ValueSurface, i: int, x, p) -> SurfacePoint:
    """Bilinear read-out of layer ``i`` in ``(log x, log(-p))``; flat outside the grid."""
    if not surface.layers:
        raise DomainError("surface is empty")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(x <= 0) or np.any(p >= 0):
        raise DomainError("need x > 0 and p < 0")
    layer = surface.layer(i)
    shape = np.broadcast(x, p).shape
    vals = _Interp(replace(surface.config, extrap_limit=np.inf), layer)(x, p)
    out = {name: vals[..., j] for j, name in enumerate(FIELDS)}
    if not shape:
        out = {k: float(v) for k, v in out.items()}
    return SurfacePoint(**out)


def audit_surface(surface: ValueSurface) -> dict:
    """Counts of ``V_pp <= 0`` and of decreases of ``V`` along ``p`` over all layers."""
    convexity = sum(int(np.sum(L.V_pp <= 0)) for L in surface.layers.values())
    monotone = sum(int(np.sum(np.diff(L.V, axis=1) < 0)) for L in surface.layers.values())
    return {"convexity_violations": convexity, "monotonicity_violations": monotone}


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("SHORTFALL_HEDGE_THREADS", default)))
    except ValueError:
        return default
