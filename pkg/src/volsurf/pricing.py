"""Black-76 and Heston pricing, vega, and implied-volatility inversion.

Scalar entry points take the small record types below; the ``*_prices``
helpers are vectorized over strikes for surface generation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad_vec
from scipy.special import erfc

from .errors import ConvergenceError, DomainError, NumericalOverflowError, OutOfBandError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

IV_TOL = 1e-12
IV_NEWTON_ITERS = 50
IV_MAX_ITERS = 300
IV_BRACKET = (1e-6, 5.0)

# Gil-Pelaez truncation: stop where |cf(u)|/u < CF_DECAY, never beyond U_CAP.
CF_DECAY = 1e-14
U_CAP = 500.0
U_START = 1e-8
QUAD_TOL = 1e-10
QUAD_LIMIT = 2000


@dataclass(frozen=True, slots=True)
class MarketContext:
    forward: float
    rate: float = 0.0
    dividend_yield: float = 0.0

    def __post_init__(self):
        if not (self.forward > 0 and math.isfinite(self.forward)):
            raise DomainError(f"forward must be positive and finite, got {self.forward}")
        if not (math.isfinite(self.rate) and math.isfinite(self.dividend_yield)):
            raise DomainError("rate and dividend_yield must be finite")


@dataclass(frozen=True, slots=True)
class OptionSpec:
    strike: float
    tenor: float
    is_call: bool = True

    def __post_init__(self):
        if not self.strike > 0:
            raise DomainError(f"strike must be positive, got {self.strike}")
        if not self.tenor > 0:
            raise DomainError(f"tenor must be positive, got {self.tenor}")


@dataclass(frozen=True, slots=True)
class HestonParams:
    """Heston parameters. Construction enforces positivity, |rho| < 1 and Feller."""

    v0: float
    kappa: float
    theta: float
    xi: float
    rho: float

    def __post_init__(self):
        for name in ("v0", "kappa", "theta", "xi"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if not abs(self.rho) < 1:
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")
        if 2.0 * self.kappa * self.theta < self.xi**2:
            raise DomainError(
                f"Feller condition violated: 2*kappa*theta={2 * self.kappa * self.theta:.6g} "
                f"< xi^2={self.xi**2:.6g}"
            )

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.v0, self.kappa, self.theta, self.xi, self.rho)


# --------------------------------------------------------------------------
# Black-76
# --------------------------------------------------------------------------

def norm_cdf(x):
    """Standard normal CDF through the complementary error function.

    Accepts scalars or arrays; the erfc form keeps full relative accuracy in
    the lower tail.
    """
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / _SQRT2)
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def norm_pdf(x):
    if np.ndim(x) == 0:
        return _INV_SQRT2PI * math.exp(-0.5 * float(x) ** 2)
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _black76(forward: float, strike: float, tenor: float, rate: float, sigma: float, is_call: bool) -> float:
    df = math.exp(-rate * tenor)
    if sigma == 0.0:
        intrinsic = forward - strike if is_call else strike - forward
        return df * max(intrinsic, 0.0)
    sq = sigma * math.sqrt(tenor)
    d1 = (math.log(forward / strike) + 0.5 * sq * sq) / sq
    d2 = d1 - sq
    if is_call:
        return df * (forward * norm_cdf(d1) - strike * norm_cdf(d2))
    return df * (strike * norm_cdf(-d2) - forward * norm_cdf(-d1))


def _vega(forward: float, strike: float, tenor: float, rate: float, sigma: float) -> float:
    sq = sigma * math.sqrt(tenor)
    d1 = (math.log(forward / strike) + 0.5 * sq * sq) / sq
    return math.exp(-rate * tenor) * forward * norm_pdf(d1) * math.sqrt(tenor)


def black76_price(ctx: MarketContext, opt: OptionSpec, sigma: float) -> float:
    """Discounted Black-76 price; ``sigma = 0`` gives discounted intrinsic value."""
    if sigma < 0 or not math.isfinite(sigma):
        raise DomainError(f"sigma must be finite and non-negative, got {sigma}")
    return _black76(ctx.forward, opt.strike, opt.tenor, ctx.rate, float(sigma), opt.is_call)


def black76_prices(forward, strikes, tenor, rate, sigma, is_call):
    """Vectorized Black-76 over arrays (broadcasting); sigma must be positive."""
    strikes = np.asarray(strikes, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    is_call = np.asarray(is_call, dtype=bool)
    sq = sigma * np.sqrt(tenor)
    d1 = (np.log(forward / strikes) + 0.5 * sq * sq) / sq
    d2 = d1 - sq
    call = forward * norm_cdf(d1) - strikes * norm_cdf(d2)
    put = strikes * norm_cdf(-d2) - forward * norm_cdf(-d1)
    return np.exp(-rate * np.asarray(tenor)) * np.where(is_call, call, put)


def vega(ctx: MarketContext, opt: OptionSpec, sigma: float) -> float:
    """dPrice/dsigma; identical for calls and puts."""
    if not sigma > 0:
        raise DomainError(f"vega requires sigma > 0, got {sigma}")
    return _vega(ctx.forward, opt.strike, opt.tenor, ctx.rate, float(sigma))


def price_bounds(ctx: MarketContext, opt: OptionSpec) -> tuple[float, float]:
    """Open no-arbitrage band (discounted intrinsic, discounted upper bound)."""
    df = math.exp(-ctx.rate * opt.tenor)
    if opt.is_call:
        return df * max(ctx.forward - opt.strike, 0.0), df * ctx.forward
    return df * max(opt.strike - ctx.forward, 0.0), df * opt.strike


def implied_vol(target_price: float, ctx: MarketContext, opt: OptionSpec) -> float:
    """Invert Black-76 with safeguarded Newton-Raphson.

    A bisection bracket is carried along; a Newton iterate leaving the bracket
    is replaced by the bracket midpoint, and after ``IV_NEWTON_ITERS`` Newton
    iterations the solver continues with bisection only.

    In-the-money targets are converted to the out-of-the-money counterpart by
    put-call parity first; the root is the same and the OTM price is far
    better conditioned.
    """
    lo_band, hi_band = price_bounds(ctx, opt)
    target = float(target_price)
    if not (math.isfinite(target) and lo_band < target < hi_band):
        raise OutOfBandError(
            f"price {target!r} outside no-arbitrage band ({lo_band!r}, {hi_band!r}) "
            f"for K={opt.strike}, tau={opt.tenor}, call={opt.is_call}"
        )
    F, K, tau, r = ctx.forward, opt.strike, opt.tenor, ctx.rate
    is_call = opt.is_call
    parity = math.exp(-r * tau) * (F - K)
    if is_call and K < F:
        target, is_call = target - parity, False
    elif not is_call and K > F:
        target, is_call = target + parity, True
    if not target > 0:
        raise OutOfBandError(
            f"time value of {target_price!r} is not resolvable in double precision "
            f"for K={K}, tau={tau}"
        )

    # stricter than the absolute 1e-12 price tolerance whenever target < 1
    price_tol = IV_TOL * min(1.0, target)
    lo, hi = IV_BRACKET
    guess = target * math.exp(r * tau) * math.sqrt(2.0 * math.pi / tau) / F
    sigma = min(max(guess, 1e-4), 5.0)

    for it in range(IV_MAX_ITERS):
        diff = _black76(F, K, tau, r, sigma, is_call) - target
        if abs(diff) < price_tol:
            return sigma
        if diff > 0:
            hi = sigma
        else:
            lo = sigma
        new = None
        if it < IV_NEWTON_ITERS:
            v = _vega(F, K, tau, r, sigma)
            # a step longer than the bracket is rejected anyway; testing first avoids overflow
            if abs(diff) < v * (hi - lo):
                cand = sigma - diff / v
                if lo < cand < hi:
                    new = cand
        if new is None:
            new = 0.5 * (lo + hi)
        if abs(new - sigma) < IV_TOL:
            return new
        sigma = new
    raise ConvergenceError(
        f"implied_vol did not converge in {IV_MAX_ITERS} iterations (K={K}, tau={tau}, price={target_price!r})"
    )


# --------------------------------------------------------------------------
# Heston
# --------------------------------------------------------------------------

def _log1p(z):
    # numpy's complex log1p is just log(1 + z); this form keeps relative accuracy
    w = 1.0 + z
    with np.errstate(all="ignore"):
        out = np.log(w) * z / (w - 1.0)
    return np.where(w == 1.0, z, out)


def _heston_log_cf(u, p: HestonParams, tenor: float):
    """log E[exp(i u x)] for x = log(F_T / F), Albrecher et al. trap-free form."""
    v0, kappa, theta, xi, rho = p.as_tuple()
    u = np.asarray(u, dtype=np.complex128)
    s = 1j * u + u * u
    beta = kappa - rho * xi * 1j * u
    d = np.sqrt(beta * beta + xi * xi * s)
    bpd = beta + d
    # beta - d without cancellation, so tiny xi stays accurate
    bmd = -xi * xi * s / bpd
    g = bmd / bpd
    e = np.exp(-d * tenor)
    C = kappa * theta * (bmd * tenor / xi**2 - 2.0 / xi**2 * _log1p(g * (1.0 - e) / (1.0 - g)))
    D = -s / bpd * (1.0 - e) / (1.0 - g * e)
    return C + D * v0


def _safe_exp(z):
    if np.any(np.real(z) > 700.0):
        raise NumericalOverflowError("characteristic-function exponent exceeds representable range")
    return np.exp(z)


def heston_cf(u, p: HestonParams, forward: float, tenor: float):
    """Characteristic function of the log-forward, normalized by ``forward``.

    Returns E[exp(i u log(F_T / forward))], so cf(0) = 1 and, since the
    forward is a martingale, cf(-i) = 1.
    """
    if not forward > 0:
        raise DomainError(f"forward must be positive, got {forward}")
    u = np.asarray(u, dtype=np.complex128)
    with np.errstate(all="ignore"):
        z = _heston_log_cf(u, p, tenor)
    if np.any(np.isnan(z)):
        raise NumericalOverflowError(f"characteristic function undefined at u={u}")
    out = _safe_exp(z)
    return out.item() if np.ndim(out) == 0 else out


def _mean_integrated_variance(v0: float, kappa: float, theta: float, tenor: float) -> float:
    if abs(kappa * tenor) < 1e-12:
        frac = tenor
    else:
        frac = -math.expm1(-kappa * tenor) / kappa
    return theta * tenor + (v0 - theta) * frac


def _truncation(p: HestonParams, tenor: float) -> float:
    u = np.linspace(1.0, U_CAP, 500)
    with np.errstate(all="ignore"):
        mag = np.maximum(
            np.abs(np.exp(_heston_log_cf(u - 1j, p, tenor))),
            np.abs(np.exp(_heston_log_cf(u, p, tenor))),
        ) / u
    above = np.nonzero(~(mag < CF_DECAY))[0]
    if above.size == 0:
        return float(u[0])
    last = above[-1]
    return float(u[min(last + 1, u.size - 1)])


def heston_probabilities(p: HestonParams, forward: float, strikes, tenor: float):
    """Gil-Pelaez P1 (share measure) and P2 (forward measure) of {F_T > K}."""
    strikes = np.atleast_1d(np.asarray(strikes, dtype=np.float64))
    k = np.log(strikes / forward)
    n = k.size
    u_max = _truncation(p, tenor)

    def integrand(u):
        with np.errstate(all="ignore"):
            share = np.exp(_heston_log_cf(u - 1j, p, tenor))
            fwd = np.exp(_heston_log_cf(u, p, tenor))
        phase = np.exp(-1j * u * k) / (1j * u)
        return np.concatenate([(phase * share).real, (phase * fwd).real])

    # [0, U_START] from the analytic u -> 0 limit E[x] - k of each integrand
    v0, kappa, theta, xi, rho = p.as_tuple()
    mean_fwd = -0.5 * _mean_integrated_variance(v0, kappa, theta, tenor)
    kappa_s = kappa - rho * xi
    mean_share = 0.5 * _mean_integrated_variance(v0, kappa_s, kappa * theta / kappa_s, tenor) if kappa_s != 0 else 0.5 * (
        v0 * tenor + 0.5 * kappa * theta * tenor**2
    )
    head = U_START * np.concatenate([mean_share - k, mean_fwd - k])

    # price error is about (F + K)/pi times the integral error
    epsabs = QUAD_TOL * math.pi / (forward + float(strikes.max()))
    res, err, info = quad_vec(
        integrand, U_START, u_max, epsabs=epsabs, epsrel=0.0, norm="max", limit=QUAD_LIMIT, full_output=True
    )
    # status 2 (rounding) is benign once the error estimate meets the target
    if err > epsabs or info.status == 1:
        raise ConvergenceError(f"Gil-Pelaez quadrature failed to reach tolerance (err={err:.3g}, u_max={u_max})")
    res = res + head
    P1 = 0.5 + res[:n] / math.pi
    P2 = 0.5 + res[n:] / math.pi
    return P1, P2


def heston_prices(p: HestonParams, ctx: MarketContext, strikes, tenor: float, is_call=True):
    """Gil-Pelaez Heston prices for many strikes at one tenor."""
    strikes = np.atleast_1d(np.asarray(strikes, dtype=np.float64))
    P1, P2 = heston_probabilities(p, ctx.forward, strikes, tenor)
    df = math.exp(-ctx.rate * tenor)
    call = df * (ctx.forward * P1 - strikes * P2)
    put = df * (strikes * (1.0 - P2) - ctx.forward * (1.0 - P1))
    return np.where(np.asarray(is_call, dtype=bool), call, put)


def heston_price(p: HestonParams, ctx: MarketContext, opt: OptionSpec) -> float:
    """European option price under Heston by Gil-Pelaez inversion."""
    return float(heston_prices(p, ctx, [opt.strike], opt.tenor, opt.is_call)[0])


# Damped-contour OTM pricing. Gil-Pelaez gives prices to an absolute accuracy
# near 1e-12, which cannot resolve deep-wing OTM prices (down to 1e-20 on
# low-vol short tenors). Shifting the contour by an optimal damping alpha
# (alpha > 0 prices the call, alpha < -1 the put) keeps relative accuracy.

# log-spaced: the optimum grows like |k| / (variance * tau) on short tenors
_CALL_ALPHAS = np.geomspace(0.02, 4000.0, 500)
_PUT_ALPHAS = -1.0 - _CALL_ALPHAS[::-1]


def _moment_finite(omega, p: HestonParams, tenor: float):
    """True where E[(F_T/F)^omega] stays finite until well past ``tenor``."""
    _, kappa, _, xi, rho = p.as_tuple()
    beta = kappa - rho * xi * omega
    disc = beta**2 - xi**2 * omega * (omega - 1.0)
    sq = np.sqrt(np.abs(disc))
    with np.errstate(all="ignore"):
        t_osc = 2.0 / sq * (np.pi * (beta > 0) - np.arctan(sq / beta))
        t_real = np.log((beta - sq) / (beta + sq)) / sq
    t_star = np.where(disc < 0, t_osc, np.where(beta < 0, t_real, np.inf))
    return t_star > 1.1 * tenor


# Normalized integrands start at 1 and each result is a price-to-bound
# ratio, so the absolute floor bounds every price error by 1e-11 times its
# saddle-point bound. Deep wings whose optimal damping lies past the moment
# explosion hit this cancellation floor.
DAMPED_RTOL = 1e-10
DAMPED_ABS_FLOOR = 1e-11
_PROBE_U = np.concatenate([np.linspace(0.0, 60.0, 241)[1:], np.geomspace(60.0, 1e4, 120)])


def _contour_clean(alpha: float, p: HestonParams, tenor: float) -> bool:
    """|cf| along the shifted contour may never exceed its value at u = 0.

    Far from the real axis the closed form can land on the wrong log branch;
    this probe rejects such contours.
    """
    z0 = -1j * (alpha + 1.0)
    with np.errstate(all="ignore"):
        base = _heston_log_cf(np.array([z0]), p, tenor).real[0]
        vals = _heston_log_cf(z0 + _PROBE_U, p, tenor).real
    return bool(np.all(np.isfinite(vals)) and np.all(vals - base <= 1e-9))


def _optimal_alpha(p: HestonParams, tenor: float, k):
    alphas = np.concatenate([_CALL_ALPHAS, _PUT_ALPHAS])
    ok = _moment_finite(alphas + 1.0, p, tenor)
    with np.errstate(all="ignore"):
        log_mgf = _heston_log_cf(-1j * (alphas + 1.0), p, tenor).real
    objective = log_mgf - np.log(alphas * (alphas + 1.0))
    objective = np.where(ok & np.isfinite(objective), objective, np.inf)
    call_side = alphas > 0
    wanted = np.where(k[:, None] >= 0, call_side[None, :], ~call_side[None, :])
    rows = np.arange(k.size)
    checked: dict[int, bool] = {}
    while True:
        # rows: strikes; the OTM side decides which half of the candidates is admissible
        obj = np.where(wanted, objective[None, :] - alphas[None, :] * k[:, None], np.inf)
        best = np.argmin(obj, axis=1)
        if np.any(~np.isfinite(obj[rows, best])):
            raise ConvergenceError("no admissible damping parameter (moment explosion)")
        bad = [j for j in set(best.tolist()) if not checked.setdefault(j, _contour_clean(alphas[j], p, tenor))]
        if not bad:
            return alphas[best], obj[rows, best]
        objective[bad] = np.inf


def heston_otm_prices(p: HestonParams, ctx: MarketContext, strikes, tenor: float):
    """OTM option prices (puts below the forward, calls at or above) with
    full relative accuracy via an optimally damped Fourier integral."""
    strikes = np.atleast_1d(np.asarray(strikes, dtype=np.float64))
    k = np.log(strikes / ctx.forward)
    alpha, log_scale = _optimal_alpha(p, tenor, k)
    # integrands are normalized by their value at u = 0 times e^{-alpha k}
    scale = np.exp(log_scale)
    log_psi0 = log_scale + alpha * k

    def integrand(u):
        z = -1j * (alpha + 1.0) + u
        with np.errstate(all="ignore"):
            lcf = _heston_log_cf(z, p, tenor)
        val = np.exp(lcf - log_psi0 - 1j * u * k) / ((alpha + 1j * u) * (alpha + 1.0 + 1j * u))
        return val.real

    res, err, info = quad_vec(
        integrand, 0.0, np.inf, epsabs=DAMPED_ABS_FLOOR, epsrel=DAMPED_RTOL, norm="max", limit=QUAD_LIMIT, full_output=True
    )
    if np.any(res <= 0):
        raise ConvergenceError("damped Fourier quadrature produced a non-positive OTM price")
    if not err <= DAMPED_ABS_FLOOR + DAMPED_RTOL * np.max(res):
        raise ConvergenceError(f"damped Fourier quadrature failed (err={err:.3g})")
    return math.exp(-ctx.rate * tenor) * ctx.forward * scale * res / math.pi
