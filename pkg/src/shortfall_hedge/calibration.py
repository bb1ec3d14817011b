"""Estimation of the shaping-factor sample and of ``(mu, sigma)`` from futures quotes.

Quote files are CSV with columns ``contract_id, contract_type, date,
settlement_price, delivery_start, delivery_end`` where ``contract_type`` is
``month`` or ``quarter`` and dates are ISO-8601.  Each month contract is
matched to the quarter whose delivery period covers its own; its shaping
factor is the month/quarter price ratio on the month's first quotation date.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import DAYS_PER_YEAR, DomainError, ModelParams, RngStream, ShapingLaw, sample_lambda

COLUMNS = ("contract_id", "contract_type", "date", "settlement_price", "delivery_start",
           "delivery_end")


@dataclass(frozen=True)
class Quote:
    contract_id: str
    contract_type: str
    date: dt.date
    price: float
    delivery_start: dt.date
    delivery_end: dt.date


@dataclass(frozen=True)
class CalibrationResult:
    law: ShapingLaw
    params: ModelParams
    lambda_mean: float
    lambda_var: float
    n_contracts: int
    n_returns: int

    @property
    def lambda_se(self) -> float:
        return math.sqrt(self.lambda_var / self.n_contracts)


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def read_quotes(source) -> list[Quote]:
    """Rows of a quote CSV (path or open file)."""
    fh = source if hasattr(source, "read") else open(source, newline="")
    try:
        reader = csv.DictReader(fh)
        missing = set(COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DomainError(f"quote file lacks columns {sorted(missing)}")
        out = []
        for row in reader:
            kind = row["contract_type"].strip().lower()
            if kind not in ("month", "quarter"):
                raise DomainError(f"unknown contract type {row['contract_type']!r}")
            out.append(Quote(row["contract_id"].strip(), kind, _parse_date(row["date"]),
                             float(row["settlement_price"]), _parse_date(row["delivery_start"]),
                             _parse_date(row["delivery_end"])))
        return out
    finally:
        if fh is not source:
            fh.close()


def write_quotes(path, quotes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for q in quotes:
            w.writerow([q.contract_id, q.contract_type, q.date.isoformat(), repr(q.price),
                        q.delivery_start.isoformat(), q.delivery_end.isoformat()])


def _series(quotes):
    by_id = defaultdict(list)
    meta = {}
    for q in quotes:
        by_id[q.contract_id].append(q)
        meta[q.contract_id] = q
    return {cid: sorted(rows, key=lambda q: q.date) for cid, rows in by_id.items()}, meta


def calibrate_from_quotes(month_quotes, quarter_quotes) -> CalibrationResult:
    """Empirical shaping law and GBM parameters from month and quarter quote files.

    Either argument may be a path, an open file or an already parsed list of
    :class:`Quote`; rows are filtered by ``contract_type`` so one combined file
    can be passed twice.
    """
    load = lambda src: src if isinstance(src, list) else read_quotes(src)  # noqa: E731
    quotes = [q for q in load(month_quotes) if q.contract_type == "month"]
    quotes += [q for q in load(quarter_quotes) if q.contract_type == "quarter"]
    if any(not q.price > 0 for q in quotes):
        raise DomainError("settlement prices must be > 0")
    series, meta = _series(quotes)
    months = [cid for cid, q in meta.items() if q.contract_type == "month"]
    quarters = [cid for cid, q in meta.items() if q.contract_type == "quarter"]
    if not months:
        raise DomainError("no month contracts in the quotes")

    samples = []
    for mid in sorted(months, key=lambda c: meta[c].delivery_start):
        m = meta[mid]
        cover = [qid for qid in quarters
                 if meta[qid].delivery_start <= m.delivery_start and m.delivery_end <= meta[qid].delivery_end]
        if not cover:
            raise DomainError(f"month contract {mid} has no covering quarter")
        first = series[mid][0]
        qprice = {q.date: q.price for q in series[cover[0]]}
        if first.date not in qprice:
            raise DomainError(f"quarter {cover[0]} has no quote on {first.date} for month {mid}")
        samples.append(first.price / qprice[first.date])

    returns = np.concatenate([np.diff(np.log([q.price for q in rows])) for rows in series.values()])
    if returns.size < 2:
        raise DomainError("need at least two daily returns")
    sd = float(np.std(returns, ddof=1))
    if sd == 0.0:
        raise DomainError("price series are constant: the estimated volatility is zero")
    sigma = sd * math.sqrt(DAYS_PER_YEAR)
    mu = float(np.mean(returns)) * DAYS_PER_YEAR + 0.5 * sigma**2
    lam = np.asarray(samples)
    return CalibrationResult(law=ShapingLaw.empirical(lam), params=ModelParams(mu, sigma),
                             lambda_mean=float(lam.mean()),
                             lambda_var=float(lam.var(ddof=1)) if lam.size > 1 else 0.0,
                             n_contracts=lam.size, n_returns=int(returns.size))


def _add_months(d: dt.date, n: int) -> dt.date:
    y, m = divmod(d.month - 1 + n, 12)
    return dt.date(d.year + y, m + 1, 1)


def synthetic_quotes(params: ModelParams, law: ShapingLaw, n_quarters: int = 26,
                     start: dt.date = dt.date(2004, 10, 1), quarter_days: int = 250,
                     reveal_days: int = 20, x0: float = 50.0, seed: int = 0):
    """Quotes generated from the model; returns ``(quotes, true_lambdas)``.

    Each quarter price follows a GBM on business days, quoted for
    ``quarter_days`` days before its delivery starts.  Its three months are
    listed ``reveal_days`` days before that and quote ``Lambda * X`` until
    their own delivery start.
    """
    rng = RngStream(seed)
    lams = sample_lambda(law, 3 * n_quarters, rng.child(1))
    quotes = []
    dt_year = 1.0 / DAYS_PER_YEAR
    for qi in range(n_quarters):
        qs = _add_months(start, 3 * qi)
        qe = _add_months(qs, 3) - dt.timedelta(days=1)
        last = np.busday_offset(np.datetime64(_add_months(qs, 2)), -1, roll="backward")
        first = np.busday_offset(np.datetime64(qs), -quarter_days, roll="forward")
        days = np.arange(first, last + 1, dtype="datetime64[D]")
        days = days[np.is_busday(days)]
        eps = rng.child(100 + qi).normals(len(days) - 1)
        logx = np.log(x0) + np.concatenate([[0.0], np.cumsum(
            (params.mu - 0.5 * params.sigma**2) * dt_year + params.sigma * math.sqrt(dt_year) * eps)])
        X = np.exp(logx)
        reveal = np.busday_offset(np.datetime64(qs), -reveal_days, roll="forward")
        for d, x in zip(days, X):
            day = d.astype(dt.date)
            if d < np.datetime64(qs):
                quotes.append(Quote(f"Q{qi:03d}", "quarter", day, float(x), qs, qe))
        for j in range(3):
            ms = _add_months(qs, j)
            me = _add_months(ms, 1) - dt.timedelta(days=1)
            lam = float(lams[3 * qi + j])
            for d, x in zip(days, X):
                if reveal <= d < np.datetime64(ms):
                    quotes.append(Quote(f"M{3 * qi + j:03d}", "month", d.astype(dt.date),
                                        lam * float(x), ms, me))
    return quotes, lams
