"""Raw-SVI slices and a per-tenor bound-constrained fitting baseline."""
from __future__ import annotations

import logging
from dataclasses import astuple, dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import OptimizerError
from .surface import SurfaceGrid, VolSurface

log = logging.getLogger(__name__)

BOUNDS = ((-0.05, 1.0), (0.0, 5.0), (-0.999, 0.999), (-1.0, 1.0), (1e-4, 2.0))
RHO_STARTS = (-0.9, -0.5, 0.0, 0.5, 0.9)
CURVATURE_SIGMAS = (0.05, 0.2, 0.5)
W_FLOOR = 1e-8
_OPTIONS = {"maxiter": 3000, "ftol": 1e-15, "gtol": 1e-13, "maxls": 50}


@dataclass(frozen=True)
class SviParams:
    a: float
    b: float
    rho: float
    m: float
    sigma: float

    def __post_init__(self):
        if self.b < 0 or abs(self.rho) > 1 or not self.sigma > 0:
            raise ValueError(f"invalid SVI parameters {self}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


def svi_total_variance(p: SviParams, k) -> np.ndarray:
    """w(k) = a + b (rho (k - m) + sqrt((k - m)^2 + sigma^2))."""
    x = np.asarray(k, dtype=np.float64) - p.m
    return p.a + p.b * (p.rho * x + np.sqrt(x * x + p.sigma * p.sigma))


def _objective(theta, k, w, scale):
    a, b, rho, m, sig = theta
    x = k - m
    r = np.sqrt(x * x + sig * sig)
    res = a + b * (rho * x + r) - w
    n = k.size
    f = np.dot(res, res) / n / scale
    c = 2.0 / n / scale
    grad = c * np.array([
        res.sum(),
        np.dot(res, rho * x + r),
        np.dot(res, b * x),
        np.dot(res, -b * (rho + x / r)),
        np.dot(res, b * sig / r),
    ])
    return f, grad


def default_init(w) -> SviParams:
    w = np.asarray(w, dtype=np.float64)
    a = max(0.9 * float(np.min(w)), 1e-6) if w.size else 1e-6
    return SviParams(min(a, BOUNDS[0][1]), 0.1, -0.5, 0.0, 0.1)


def curvature_starts(k, w) -> list[np.ndarray]:
    """Starts matched to a quadratic fit of the slice.

    Near m = 0, w ~ a + b sigma + b rho k + b k^2 / (2 sigma); one start per
    sigma in ``CURVATURE_SIGMAS``. Starts from a fixed b tend to collapse onto
    b = 0 when the true slope is small, where the other gradients vanish.
    """
    if k.size < 3 or np.ptp(k) <= 0:
        return []
    c2, c1, c0 = np.polyfit(k, w, 2)
    lo, hi = np.array([b[0] for b in BOUNDS]), np.array([b[1] for b in BOUNDS])
    out = []
    for sig in CURVATURE_SIGMAS:
        b = max(2.0 * sig * c2, 1e-3)
        rho = float(np.clip(c1 / b, -0.9, 0.9))
        out.append(np.clip([c0 - b * sig, b, rho, 0.0, sig], lo, hi))
    return out


def slice_objective(p: SviParams, k, w) -> float:
    r = svi_total_variance(p, k) - np.asarray(w, dtype=np.float64)
    return float(np.mean(r * r))


def fit_slice(k, w, init: SviParams | None = None) -> SviParams:
    """Least-squares raw-SVI fit of one slice with L-BFGS-B.

    Starts from ``init``, a multistart over rho and the curvature-matched
    starts, and keeps the best objective, never worse than ``init`` itself.
    """
    k = np.asarray(k, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if k.size != w.size or k.size < 1:
        raise ValueError("need at least one (k, w) observation of matching length")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(w))):
        raise ValueError("observations must be finite")
    init = init or default_init(w)
    scale = max(float(np.mean(w * w)), 1e-16)
    x0 = np.clip(init.as_array(), [b[0] for b in BOUNDS], [b[1] for b in BOUNDS])
    starts = [x0] + [np.array([x0[0], x0[1], r, x0[3], x0[4]]) for r in RHO_STARTS] + curvature_starts(k, w)

    best_x, best_f = x0, _objective(x0, k, w, scale)[0]
    failures = []
    for s in starts:
        res = minimize(_objective, s, args=(k, w, scale), jac=True, method="L-BFGS-B",
                       bounds=BOUNDS, options=_OPTIONS)
        if not np.isfinite(res.fun) or not np.all(np.isfinite(res.x)):
            failures.append(res.message)
            continue
        if not res.success:
            log.debug("SVI start %s stopped early: %s", s, res.message)
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    if len(failures) == len(starts):
        raise OptimizerError(f"every SVI start broke down: {failures[0]}")
    a, b, rho, m, sig = (float(v) for v in best_x)
    return SviParams(a, max(b, 0.0), rho, m, sig)


def _fallback_init(g: SurfaceGrid, iv, valid, tenor: float) -> SviParams:
    # a slice with no quotes borrows the surface's mean observed variance
    var = float(np.mean(iv[valid] ** 2)) if valid.any() else 0.04
    return SviParams(min(max(var * tenor, 1e-6), BOUNDS[0][1]), 0.1, -0.5, 0.0, 0.1)


def fit_surface(s: VolSurface | np.ndarray, mask, g: SurfaceGrid) -> tuple[list[SviParams], np.ndarray]:
    """Fit every tenor slice on its observed points; return params and the
    reconstructed ``(8, 25)`` iv matrix."""
    iv = s.iv if isinstance(s, VolSurface) else np.asarray(s, dtype=np.float64)
    tmask = s.target_mask if isinstance(s, VolSurface) else np.ones_like(iv)
    obs = (np.asarray(mask) > 0.5) & (tmask > 0.5)
    k = g.log_moneyness
    params, out = [], np.empty(g.shape)
    for i, tau in enumerate(g.tenors):
        sel = obs[i]
        if sel.any():
            try:
                p = fit_slice(k[sel], iv[i, sel] ** 2 * tau)
            except (OptimizerError, ValueError) as exc:
                raise OptimizerError(f"tenor index {i}: {exc}") from exc
        else:
            p = _fallback_init(g, iv, obs, float(tau))
        params.append(p)
        out[i] = np.sqrt(np.maximum(svi_total_variance(p, k), W_FLOOR) / tau)
    return params, out


class SviBaseline:
    """Reconstructor with the same ``predict`` interface as the neural models."""

    kind = "svi"

    def __init__(self, grid: SurfaceGrid):
        self.grid = grid

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        return np.stack([fit_surface(xi[0], xi[1], self.grid)[1] for xi in x])
