"""Command-line entry point: ``shortfall-hedge {price,facelift,solve,backtest,calibrate,validate}``.

Configuration is a JSON file with optional sections ``model``, ``option``,
``loss``, ``law``, ``solver``, ``backtest``, ``price``, ``facelift``,
``validate`` and ``calibrate``.  Missing keys fall back to the one-month
validation setting (``mu = 0.1``, ``sigma = 0.28``, ``x0 = K = 50.89``,
``k = 2``, ``|p| = 0.1``).  Exit codes: 1 validation tolerance exceeded,
2 bad configuration, 3 domain error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import backtest as bt
from .calibration import calibrate_from_quotes, synthetic_quotes, write_quotes
from .complete import optimal_nu, p_explicit, value_V
from .core import (DAYS_PER_YEAR, DomainError, LossSpec, ModelParams, NumericalError,
                   OptionSpec, ShapingLaw, TimeGrid)
from .facelift import FaceliftContext
from .pricing import bs_call_price
from .solver import SolverConfig, evaluate_surface, solve_backward, threads_from_env

EXIT_TOLERANCE, EXIT_CONFIG, EXIT_DOMAIN, EXIT_NUMERICAL = 1, 2, 3, 4

DEFAULTS = {
    "model": {"mu": 0.1, "sigma": 0.28},
    "option": {"K": 50.89, "T_days": 20, "T_star_days": 40},
    "loss": {"k": 2.0, "p_abs": 0.1, "kappa": None},
    "law": {"kind": "degenerate", "lam0": 1.0},
    "solver": {"x0": 50.89, "R_x": 201, "R_p": 121, "x_range": [0.5, 2.0],
               "p_range": [0.1, 10.0], "engine": "gauss_hermite", "n_gh": 64,
               "n_mc": 100000, "eps": 1e-3, "max_fp_iters": 3},
    "backtest": {"x0": 50.89, "lam0": 1.0012, "n_paths": 10000,
                 "gammas": [0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2],
                 "p_abs": [], "match_capital": True, "bs_post_lambda": "realized",
                 "R_x": 81, "R_p": 41, "x_range": [0.35, 3.0], "p_abs_range": [1e-3, 30.0],
                 "cvar_levels": [0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.975, 0.99]},
    "validate": {"x0": 50.89, "layers": [1, 5, 10, 15, 19], "x_band": [0.7, 1.3],
                 "tol": 0.01, "nu_tol": 0.05},
    "price": {"points": [{"t_days": 20, "x": 50.89, "lam": 1.0}]},
    "facelift": {"x": [35.0, 50.89, 65.0], "p_abs": [0.01, 0.1, 1.0]},
    "calibrate": {},
}


class ConfigError(Exception):
    pass


def load_config(path) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    for section, body in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        cfg[section].update(body)
    return cfg


def _years(sec: dict, key: str) -> float:
    if f"{key}_days" in sec and sec[f"{key}_days"] is not None:
        return float(sec[f"{key}_days"]) / DAYS_PER_YEAR
    if key in sec:
        return float(sec[key])
    raise ConfigError(f"missing {key} or {key}_days")


def build_model(cfg):
    try:
        m, o, lo, la = cfg["model"], cfg["option"], cfg["loss"], cfg["law"]
        params = ModelParams(float(m["mu"]), float(m["sigma"]))
        opt = OptionSpec(float(o["K"]), _years(o, "T"), _years(o, "T_star"))
        kappa = math.inf if lo.get("kappa") is None else float(lo["kappa"])
        spec = LossSpec.from_magnitude(float(lo["k"]), float(lo["p_abs"]), kappa)
        kind = la["kind"]
        if kind == "degenerate":
            law = ShapingLaw.degenerate(float(la["lam0"]))
        elif kind == "scaled_beta":
            law = ShapingLaw.scaled_beta(float(la["scale"]), float(la["a"]), float(la["b"]))
        elif kind == "empirical":
            law = ShapingLaw.empirical(la["samples"])
        else:
            raise ConfigError(f"unknown law kind {kind!r}")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"incomplete model configuration: {exc}") from exc
    return params, opt, spec, law


def _grid_T(opt: OptionSpec, cfg) -> TimeGrid:
    N = cfg["solver"].get("N")
    if N is None:
        N = round(opt.T * DAYS_PER_YEAR)
    return TimeGrid(opt.T, int(N))


def build_solver_config(cfg, grid, p_abs, threads, seed, x0=None, grid_keys=None) -> SolverConfig:
    """Solver settings; ``grid_keys`` (``R_x, R_p, x_range, p_abs_range``) override the mesh."""
    s = dict(cfg["solver"])
    x0 = float(x0 if x0 is not None else s["x0"])
    p_span = (s["p_range"][0] * p_abs, s["p_range"][1] * p_abs)
    if grid_keys:
        s.update({k: grid_keys[k] for k in ("R_x", "R_p", "x_range") if k in grid_keys})
        p_span = tuple(grid_keys.get("p_abs_range", p_span))
    try:
        return SolverConfig.log_grid(
            grid, (s["x_range"][0] * x0, s["x_range"][1] * x0), p_span,
            R_x=int(s["R_x"]), R_p=int(s["R_p"]), engine=s["engine"], n_gh=int(s["n_gh"]),
            n_mc=int(s["n_mc"]), eps=float(s["eps"]), max_fp_iters=int(s["max_fp_iters"]),
            seed=seed, threads=threads)
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"incomplete solver configuration: {exc}") from exc


def _writer(path):
    fh = open(path, "w", newline="") if path else sys.stdout
    return fh, csv.writer(fh)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def cmd_price(cfg, args):
    params, opt, spec, _ = build_model(cfg)
    p = -abs(args.p) if args.p is not None else spec.p_threshold
    rows = []
    for pt in cfg["price"]["points"]:
        t = _years(pt, "t")
        x, lam = float(pt["x"]), float(pt.get("lam", 1.0))
        rows.append((t, x, lam, p, bs_call_price(t, x, lam, opt, params),
                     value_V(t, x, p, lam, opt, params, spec)))
    for t, x, lam, pp, C, V in rows:
        print(f"t={t:.6g} x={x:.6g} lam={lam:.6g} p={pp:.6g}  C={C:.10g}  V={V:.10g}")
    if args.out:
        fh, w = _writer(args.out)
        with fh:
            w.writerow(["t", "x", "lam", "p", "C", "V"])
            w.writerows([[_fmt(v) for v in r] for r in rows])
    return 0


def cmd_facelift(cfg, args):
    params, opt, spec, law = build_model(cfg)
    ctx = FaceliftContext(law, opt, params, spec)
    xs = np.asarray(cfg["facelift"]["x"], dtype=float)
    ps = -np.asarray(cfg["facelift"]["p_abs"], dtype=float)
    X, P = np.meshgrid(xs, ps, indexing="ij")
    f = ctx.terminal_fields(X, P)
    fh, w = _writer(args.out)
    try:
        w.writerow(["x", "p", "xi_inverse", "d_x", "d_p", "d_pp", "d_xp"])
        for row in zip(*(np.ravel(a) for a in (X, P, f.value, f.d_x, f.d_p, f.d_pp, f.d_xp))):
            w.writerow([_fmt(v) for v in row])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_solve(cfg, args):
    params, opt, spec, law = build_model(cfg)
    ctx = FaceliftContext(law, opt, params, spec)
    scfg = build_solver_config(cfg, _grid_T(opt, cfg), abs(spec.p_threshold), args.threads, args.seed)
    surface = solve_backward(scfg, ctx)
    x0 = float(cfg["solver"]["x0"])
    print(f"capital V(0, {x0:g}, {spec.p_threshold:g}) = {evaluate_surface(surface, 0, x0, spec.p_threshold).V:.10g}")
    if args.out:
        surface.to_csv(args.out)
    return 0


def _match_p(surface, x0, target, p_nodes):
    """``|p|`` at which the layer-0 capital equals ``target``, or None outside the grid."""
    lo, hi = np.log(-p_nodes[-1]), np.log(-p_nodes[0])
    f = lambda lq: evaluate_surface(surface, 0, x0, -math.exp(lq)).V - target  # noqa: E731
    if f(lo) * f(hi) > 0:
        return None
    return math.exp(brentq(f, lo, hi, xtol=1e-12))


def cmd_backtest(cfg, args):
    params, opt0, spec, law = build_model(cfg)
    b = cfg["backtest"]
    x0, lam0 = float(b["x0"]), float(b["lam0"])
    summary, curves, extra = [], [], []
    for gamma in b["gammas"]:
        opt = OptionSpec(gamma * lam0 * x0, opt0.T, opt0.T_star)
        ctx = FaceliftContext(law, opt, params, spec)
        scfg = build_solver_config(cfg, _grid_T(opt, cfg), abs(spec.p_threshold), args.threads,
                                   args.seed, x0=x0, grid_keys=b)
        surface = solve_backward(scfg, ctx)
        base = bt.BacktestConfig(params, opt, law, spec, x0, lam0, n_paths=int(b["n_paths"]),
                                 seed=args.seed, bs_post_lambda=b["bs_post_lambda"])
        paths = bt.simulate_paths(base)
        bs = bt.run_bs_naive(base, paths)
        levels = [float(q) for q in b["p_abs"]]
        if b["match_capital"]:
            q = _match_p(surface, x0, bs.initial_capital, scfg.p_nodes)
            if q is None:
                logging.warning("gamma=%g: BS capital outside the solved p-range", gamma)
            else:
                levels.append(q)
        print(f"gamma={gamma:g} K={opt.K:.6g}: BS capital {bs.initial_capital:.6g}, "
              f"shortfall risk {bs.shortfall_risk:.6g}")
        summary.append(bs)
        extra.append({"gamma": gamma, "K": opt.K, "p_abs": ""})
        for q in levels:
            run_cfg = bt.BacktestConfig(params, opt, law, LossSpec.from_magnitude(spec.k, q, spec.kappa),
                                        x0, lam0, n_paths=base.n_paths, seed=args.seed)
            sr = bt.run_sr(run_cfg, surface, paths)
            print(f"  |p|={q:.6g}: SR capital {sr.initial_capital:.6g}, shortfall risk "
                  f"{sr.shortfall_risk:.6g} (paired half-width on E[l] "
                  f"{bt.paired_halfwidth(sr, bs):.3g})")
            summary.append(sr)
            extra.append({"gamma": gamma, "K": opt.K, "p_abs": q})
            for lv in b["cvar_levels"]:
                curves.append([gamma, q, lv, sr.cvar(lv), bs.cvar(lv)])
    if args.out:
        out = Path(args.out)
        bt.write_summary_csv(out, summary, extra)
        with open(out.with_name(out.stem + "_cvar.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "p_abs", "q", "cvar_sr", "cvar_bs"])
            w.writerows([[_fmt(v) for v in r] for r in curves])
    return 0


def cmd_calibrate(cfg, args):
    c = cfg["calibrate"]
    if args.quotes or c.get("quotes") or c.get("month_quotes"):
        month = args.quotes or c.get("month_quotes") or c["quotes"]
        quarter = args.quotes or c.get("quarter_quotes") or c["quotes"]
    else:
        params, _, _, law = build_model(cfg)
        quotes, _ = synthetic_quotes(params, law, seed=args.seed)
        month = quarter = quotes
        if c.get("write_synthetic"):
            write_quotes(c["write_synthetic"], quotes)
    res = calibrate_from_quotes(month, quarter)
    print(f"contracts={res.n_contracts} returns={res.n_returns} mu={res.params.mu:.6g} "
          f"sigma={res.params.sigma:.6g} lambda_mean={res.lambda_mean:.6g} "
          f"lambda_var={res.lambda_var:.6g}")
    if args.out:
        fh, w = _writer(args.out)
        with fh:
            w.writerow(["mu", "sigma", "lambda_mean", "lambda_var", "n_contracts", "n_returns"])
            w.writerow([_fmt(res.params.mu), _fmt(res.params.sigma), _fmt(res.lambda_mean),
                        _fmt(res.lambda_var), res.n_contracts, res.n_returns])
    return 0


def validation_errors(surface, params, opt, spec, x0, layers, band, lam=1.0):
    """Per-layer rows and worst errors against the closed-form curve.

    The curve is read at the solver's own x-nodes inside ``band * x0``.  The
    value error is ``max|u_num - u| / max|u|`` over the band (the curve
    crosses zero, so pointwise ratios are meaningless); the hedge error is
    pointwise relative.
    """
    nodes = surface.config.x_nodes
    xs = nodes[(nodes >= band[0] * x0) & (nodes <= band[1] * x0)]
    if xs.size == 0:
        raise ConfigError("no x-node inside the validation band")
    p0 = spec.p_threshold
    rows, worst_u, worst_nu = [], 0.0, 0.0
    times = surface.config.grid.times
    for i in layers:
        s = float(times[i])
        P = p_explicit(s, xs, float(times[0]), x0, p0, params, spec)
        u = value_V(s, xs, P, lam, opt, params, spec)
        nu = optimal_nu(s, xs, P, lam, opt, params, spec)
        f = evaluate_surface(surface, i, xs, P)
        nu_num = f.V_x + f.a * P * f.V_p / (params.sigma * xs)
        worst_u = max(worst_u, float(np.max(np.abs(f.V - u)) / np.max(np.abs(u))))
        worst_nu = max(worst_nu, float(np.max(np.abs(nu_num - nu) / np.abs(nu))))
        rows += [[i, s, x, a, b, c, d] for x, a, b, c, d in zip(xs, u, f.V, nu, nu_num)]
    return rows, worst_u, worst_nu


def cmd_validate(cfg, args):
    params, opt, spec, law = build_model(cfg)
    if law.kind != "degenerate":
        raise ConfigError("validate needs a degenerate shaping law")
    v = cfg["validate"]
    ctx = FaceliftContext(law, opt, params, spec)
    grid = _grid_T(opt, cfg)
    x0 = float(v["x0"])
    scfg = build_solver_config(cfg, grid, abs(spec.p_threshold), args.threads, args.seed, x0=x0)
    surface = solve_backward(scfg, ctx)
    layers = [i for i in v["layers"] if 0 <= i <= grid.N] or [0]
    rows, err_u, err_nu = validation_errors(surface, params, opt, spec, x0, layers, v["x_band"],
                                            lam=law.lam0)
    tol = args.tol if args.tol is not None else float(v["tol"])
    nu_tol = float(v["nu_tol"])
    print(f"max relative error: value {err_u:.4g} (tol {tol:g}), hedge {err_nu:.4g} (tol {nu_tol:g})")
    if args.out:
        fh, w = _writer(args.out)
        with fh:
            w.writerow(["i", "t_i", "x", "u_exact", "u_numeric", "nu_exact", "nu_numeric"])
            w.writerows([[_fmt(x) for x in r] for r in rows])
    return 0 if (err_u <= tol and err_nu <= nu_tol) else EXIT_TOLERANCE


COMMANDS = {"price": cmd_price, "facelift": cmd_facelift, "solve": cmd_solve,
            "backtest": cmd_backtest, "calibrate": cmd_calibrate, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shortfall-hedge", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output CSV path")
        sp.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        sp.add_argument("--tol", type=float, help="validation tolerance on the value surface")
        sp.add_argument("--threads", type=int, help="worker threads (env SHORTFALL_HEDGE_THREADS)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "price":
            sp.add_argument("--p", type=float, help="loss level |p| (overrides the config)")
        if name == "calibrate":
            sp.add_argument("--quotes", help="combined month/quarter quote CSV")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = threads_from_env()
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
