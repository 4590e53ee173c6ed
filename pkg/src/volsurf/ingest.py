"""Option-quote files to gridded surfaces with natural missingness.

Pipeline per quote date: filter quotes, solve missing implied vols from mid
prices, match market expiries to the standard tenors (interpolating total
variance between bracketing expiries), spline each matched slice onto the
grid log-moneyness without extrapolating, then apply coverage filters.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from datetime import date, timedelta

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import FormatError, VolSurfError
from .pricing import HestonParams, MarketContext, OptionSpec, heston_otm_prices, implied_vol
from .surface import SurfaceGrid, VolSurface

DAYS_PER_YEAR = 365.25
QUOTE_COLUMNS = ("quote_date", "expiry_date", "strike", "type", "bid", "ask", "underlying", "iv")
MIN_SLICE_QUOTES = 4
TENOR_COVERAGE = "tenor-coverage"
STRIKE_COVERAGE = "strike-coverage"


@dataclass(frozen=True)
class OptionQuote:
    quote_date: date
    expiry_date: date
    strike: float
    is_call: bool
    bid: float
    ask: float
    underlying_price: float
    iv: float | None = None

    def __post_init__(self):
        if self.expiry_date <= self.quote_date:
            raise ValueError(f"expiry {self.expiry_date} not after quote date {self.quote_date}")
        if self.bid > self.ask:
            raise ValueError(f"bid {self.bid} above ask {self.ask}")
        if not (self.strike > 0 and self.underlying_price > 0):
            raise ValueError("strike and underlying must be positive")

    @property
    def dte(self) -> int:
        return (self.expiry_date - self.quote_date).days

    @property
    def tenor(self) -> float:
        return self.dte / DAYS_PER_YEAR

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)


@dataclass(frozen=True)
class IngestConfig:
    moneyness_band: tuple[float, float] = (0.70, 1.30)
    dte_band_days: tuple[int, int] = (7, 800)
    max_rel_spread: float = 0.50
    iv_band: tuple[float, float] = (0.01, 2.0)
    tenor_rel_tolerance: float = 0.30
    min_tenor_coverage: float = 0.75
    min_avg_strike_coverage: float = 0.70
    rate: float = 0.0
    dividend_yield: float = 0.0

    def __post_init__(self):
        for name in ("moneyness_band", "dte_band_days", "iv_band"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-empty interval")
            object.__setattr__(self, name, (lo, hi))
        for name in ("max_rel_spread", "tenor_rel_tolerance", "min_tenor_coverage", "min_avg_strike_coverage"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not (math.isfinite(self.rate) and math.isfinite(self.dividend_yield)):
            raise ValueError("rates must be finite")

    def forward(self, spot: float, tenor: float) -> float:
        return spot * math.exp((self.rate - self.dividend_yield) * tenor)


@dataclass(frozen=True)
class Rejection:
    quote_date: date
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class Slice:
    """Quotes of one expiry (or one interpolated tenor): strikes, ivs, forward."""

    tenor: float
    strikes: np.ndarray
    iv: np.ndarray
    forward: float


# -- reading ---------------------------------------------------------------------

def _parse_type(s: str) -> bool:
    t = s.strip().lower()
    if t in ("c", "call"):
        return True
    if t in ("p", "put"):
        return False
    raise ValueError(f"unknown option type {s!r}")


def read_quotes(path) -> list[OptionQuote]:
    """Read a quote CSV; any malformed row raises ``FormatError`` naming its line."""
    quotes = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != QUOTE_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(QUOTE_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(QUOTE_COLUMNS):
                raise FormatError(f"{path}:{line}: expected {len(QUOTE_COLUMNS)} fields, got {len(row)}")
            try:
                qd, ed, k, typ, bid, ask, und, iv = (c.strip() for c in row)
                quotes.append(OptionQuote(
                    date.fromisoformat(qd), date.fromisoformat(ed), float(k), _parse_type(typ),
                    float(bid), float(ask), float(und), float(iv) if iv else None,
                ))
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
    return quotes


def write_quotes(quotes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(QUOTE_COLUMNS)
        for q in quotes:
            w.writerow([
                q.quote_date.isoformat(), q.expiry_date.isoformat(), repr(q.strike), "C" if q.is_call else "P",
                repr(q.bid), repr(q.ask), repr(q.underlying_price), "" if q.iv is None else repr(q.iv),
            ])


# -- pipeline stages ---------------------------------------------------------------

def _solve_iv(q: OptionQuote, cfg: IngestConfig) -> float | None:
    ctx = MarketContext(cfg.forward(q.underlying_price, q.tenor), cfg.rate, cfg.dividend_yield)
    try:
        return implied_vol(q.mid, ctx, OptionSpec(q.strike, q.tenor, q.is_call))
    except VolSurfError:
        return None


def filter_quotes(quotes, cfg: IngestConfig, spot: float | None = None) -> list[OptionQuote]:
    """Keep liquid OTM quotes inside the moneyness, maturity and iv bands.

    Returned quotes always carry an ``iv`` (solved from the mid when blank).
    ``spot`` defaults to each quote's own underlying price.
    """
    if spot is not None and not spot > 0:
        raise ValueError("spot must be positive")
    out = []
    for q in quotes:
        s = spot if spot is not None else q.underlying_price
        if not cfg.moneyness_band[0] <= q.strike / s <= cfg.moneyness_band[1]:
            continue
        if not cfg.dte_band_days[0] <= q.dte <= cfg.dte_band_days[1]:
            continue
        if not q.bid > 0 or (q.ask - q.bid) / q.mid >= cfg.max_rel_spread:
            continue
        if q.is_call != (q.strike >= s):
            continue
        iv = q.iv if q.iv is not None else _solve_iv(q, cfg)
        if iv is None or not cfg.iv_band[0] <= iv <= cfg.iv_band[1]:
            continue
        out.append(q if q.iv is not None else replace(q, iv=iv))
    return out


def group_slices(quotes, cfg: IngestConfig) -> dict[float, Slice]:
    """One slice per expiry, strikes sorted, duplicate strikes averaged."""
    by_exp = defaultdict(list)
    for q in quotes:
        by_exp[q.expiry_date].append(q)
    slices = {}
    for qs in by_exp.values():
        tau = qs[0].tenor
        ks = np.array([q.strike for q in qs])
        ivs = np.array([q.iv for q in qs])
        uk, inv = np.unique(ks, return_inverse=True)
        iv_mean = np.bincount(inv, weights=ivs) / np.bincount(inv)
        spot = float(np.mean([q.underlying_price for q in qs]))
        slices[tau] = Slice(tau, uk, iv_mean, cfg.forward(spot, tau))
    return slices


def _interp_total_variance(lo: Slice, hi: Slice, tau: float, cfg: IngestConfig) -> Slice | None:
    common, i_lo, i_hi = np.intersect1d(lo.strikes, hi.strikes, return_indices=True)
    if common.size < MIN_SLICE_QUOTES:
        return None
    wt = (tau - lo.tenor) / (hi.tenor - lo.tenor)
    w = (1.0 - wt) * lo.iv[i_lo] ** 2 * lo.tenor + wt * hi.iv[i_hi] ** 2 * hi.tenor
    fwd = lo.forward * (hi.forward / lo.forward) ** wt
    return Slice(tau, common, np.sqrt(w / tau), fwd)


def match_tenors(slices: dict[float, Slice], g: SurfaceGrid, cfg: IngestConfig) -> list[Slice | None]:
    """Map market expiries onto the grid tenors.

    An exact expiry is used as is. Otherwise, if the nearest expiries on both
    sides lie within the relative tolerance, total variance is interpolated
    linearly between them at their common strikes; failing that the single
    nearest expiry within tolerance is used. Anything else is absent (None).
    """
    taus = np.array(sorted(slices))
    out: list[Slice | None] = []
    for tau in g.tenors:
        tau = float(tau)
        if taus.size == 0:
            out.append(None)
            continue
        near = np.abs(taus - tau) <= cfg.tenor_rel_tolerance * tau
        exact = np.isclose(taus, tau, rtol=1e-12, atol=0.0)
        if exact.any():
            out.append(slices[float(taus[exact][0])])
            continue
        below = taus[(taus < tau) & near]
        above = taus[(taus > tau) & near]
        if below.size and above.size:
            s = _interp_total_variance(slices[float(below[-1])], slices[float(above[0])], tau, cfg)
            if s is not None:
                out.append(s)
                continue
        if near.any():
            out.append(slices[float(taus[near][np.argmin(np.abs(taus[near] - tau))])])
        else:
            out.append(None)
    return out


def interpolate_strikes(k, iv, g: SurfaceGrid, cfg: IngestConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Natural cubic spline of iv against log-moneyness onto the grid.

    Returns ``(iv_grid, valid)``. Grid points outside the observed span, or
    whose interpolated iv leaves the iv band, are invalid (iv set to 0).
    Fewer than four distinct points give an all-invalid slice.
    """
    cfg = cfg or IngestConfig()
    k = np.asarray(k, dtype=np.float64)
    iv = np.asarray(iv, dtype=np.float64)
    uk, inv = np.unique(k, return_inverse=True)
    out = np.zeros(g.shape[1])
    if uk.size < MIN_SLICE_QUOTES:
        return out, np.zeros(g.shape[1], dtype=bool)
    uiv = np.bincount(inv, weights=iv) / np.bincount(inv)
    spline = CubicSpline(uk, uiv, bc_type="natural")
    grid_k = g.log_moneyness
    inside = (grid_k >= uk[0] - 1e-12) & (grid_k <= uk[-1] + 1e-12)
    vals = spline(np.clip(grid_k, uk[0], uk[-1]))
    valid = inside & (vals >= cfg.iv_band[0]) & (vals <= cfg.iv_band[1])
    out[valid] = vals[valid]
    return out, valid


def build_real_surface(quotes, g: SurfaceGrid, cfg: IngestConfig | None = None) -> VolSurface | Rejection:
    """Grid one quote date; returns a surface or a ``Rejection`` with its reason."""
    cfg = cfg or IngestConfig()
    quotes = list(quotes)
    if not quotes:
        raise ValueError("no quotes given")
    day = quotes[0].quote_date
    if any(q.quote_date != day for q in quotes):
        raise ValueError("quotes span more than one quote date")
    matched = match_tenors(group_slices(filter_quotes(quotes, cfg), cfg), g, cfg)
    iv = np.zeros(g.shape)
    valid = np.zeros(g.shape, dtype=bool)
    present = []
    for i, s in enumerate(matched):
        if s is None:
            continue
        row, ok = interpolate_strikes(np.log(s.strikes / s.forward), s.iv, g, cfg)
        if ok.any():
            iv[i], valid[i] = row, ok
            present.append(i)
    n_tenors = g.shape[0]
    if len(present) < math.ceil(cfg.min_tenor_coverage * n_tenors - 1e-12):
        return Rejection(day, TENOR_COVERAGE, f"{len(present)}/{n_tenors} tenors present")
    coverage = float(valid[present].mean())
    if coverage < cfg.min_avg_strike_coverage:
        return Rejection(day, STRIKE_COVERAGE, f"average strike coverage {coverage:.3f}")
    return VolSurface(iv, valid.astype(np.float64))


def build_real_dataset(quotes, g: SurfaceGrid, cfg: IngestConfig | None = None):
    """Grid every quote date. Returns ``(dataset, rejections)``."""
    from .synthgen import Dataset

    cfg = cfg or IngestConfig()
    by_day = defaultdict(list)
    for q in quotes:
        by_day[q.quote_date].append(q)
    surfaces, labels, rejections = [], [], []
    for day in sorted(by_day):
        res = build_real_surface(by_day[day], g, cfg)
        if isinstance(res, Rejection):
            rejections.append(res)
        else:
            surfaces.append(res)
            labels.append(day.isoformat())
    if surfaces:
        iv = np.stack([s.iv for s in surfaces])
        tm = np.stack([s.target_mask for s in surfaces])
    else:
        iv = tm = np.zeros((0, *g.shape))
    return Dataset(g, iv, tm, [], None, "real", labels), rejections


def write_rejections(rejections, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "reason", "detail"])
        for r in rejections:
            w.writerow([r.quote_date.isoformat(), r.reason, r.detail])


# -- synthetic quotes ------------------------------------------------------------

def synthetic_quotes(p: HestonParams, g: SurfaceGrid, quote_date: date,
                     spot: float | None = None, half_spread: float = 0.01) -> list[OptionQuote]:
    """OTM quotes from a Heston model at the grid strikes.

    Every grid tenor gets two expiries, on the whole days just below and
    above it, so the pipeline has to interpolate in total variance. Rates
    are zero, so the forward equals ``spot`` (default: the grid forward).
    """
    spot = g.forward if spot is None else spot
    ctx = MarketContext(spot)
    strikes = g.strikes * spot / g.forward
    quotes = []
    for tau in g.tenors:
        days = tau * DAYS_PER_YEAR
        for d in sorted({math.floor(days), math.ceil(days)}):
            t = d / DAYS_PER_YEAR
            prices = heston_otm_prices(p, ctx, strikes, t)
            exp = quote_date + timedelta(days=d)
            for K, px in zip(strikes, prices):
                quotes.append(OptionQuote(quote_date, exp, float(K), bool(K >= spot),
                                          float(px * (1 - half_spread)), float(px * (1 + half_spread)), spot))
    return quotes
