"""Calendar and butterfly no-arbitrage checks and differentiable penalties.

Checks work on plain arrays of total variance and apply a small tolerance;
penalties are autodiff expressions and penalize any negativity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .nn import autodiff as ad

VIOLATION_TOL = 1e-10


@dataclass(frozen=True)
class ViolationStats:
    rate: float
    mean_magnitude: float
    count_checked: int
    count_violating: int = 0

    @classmethod
    def from_values(cls, values: np.ndarray, tol: float = VIOLATION_TOL) -> "ViolationStats":
        """Stats for quantities that must be non-negative."""
        values = np.asarray(values, dtype=np.float64)
        bad = values < -tol
        n_bad = int(bad.sum())
        mean_mag = float(np.abs(values[bad]).mean()) if n_bad else 0.0
        return cls(n_bad / values.size if values.size else 0.0, mean_mag, int(values.size), n_bad)

    @classmethod
    def pooled(cls, stats) -> "ViolationStats":
        """Combine stats by pooling the underlying checks."""
        stats = list(stats)
        checked = sum(s.count_checked for s in stats)
        bad = sum(s.count_violating for s in stats)
        mag = sum(s.mean_magnitude * s.count_violating for s in stats)
        return cls(bad / checked if checked else 0.0, mag / bad if bad else 0.0, checked, bad)

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "mean_magnitude": self.mean_magnitude,
            "count_checked": self.count_checked,
            "count_violating": self.count_violating,
        }


def expected_severity(v: ViolationStats) -> float:
    return v.rate * v.mean_magnitude


def _spacings(m) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m, dtype=np.float64)
    h = np.diff(m)
    if np.any(h <= 0):
        raise DomainError("log-moneyness must be strictly increasing")
    return h[:-1], h[1:]


def butterfly_second_diff(w, m) -> np.ndarray:
    """Non-uniform three-point second derivative of ``w`` along its last axis."""
    hm, hp = _spacings(m)
    w = np.asarray(w, dtype=np.float64)
    return 2.0 / (hm + hp) * (w[..., :-2] / hm - w[..., 1:-1] * (1.0 / hm + 1.0 / hp) + w[..., 2:] / hp)


def calendar_diff(w) -> np.ndarray:
    """Forward differences along the tenor axis (second to last)."""
    w = np.asarray(w, dtype=np.float64)
    return w[..., 1:, :] - w[..., :-1, :]


def calendar_check(w, tol: float = VIOLATION_TOL) -> ViolationStats:
    return ViolationStats.from_values(calendar_diff(w), tol)


def butterfly_check(w, m, tol: float = VIOLATION_TOL) -> ViolationStats:
    return ViolationStats.from_values(butterfly_second_diff(w, m), tol)


# -- differentiable penalties --------------------------------------------------

def _second_diff_tensor(w: ad.Tensor, m) -> ad.Tensor:
    hm, hp = _spacings(m)
    c = 2.0 / (hm + hp)
    left, centre, right = c / hm, -c * (1.0 / hm + 1.0 / hp), c / hp
    return w[..., :-2] * left + w[..., 1:-1] * centre + w[..., 2:] * right


def calendar_penalty_t(w: ad.Tensor) -> ad.Tensor:
    """Mean of relu(-dw)^2 over adjacent-tenor pairs (and batch)."""
    dw = w[..., 1:, :] - w[..., :-1, :]
    return ad.square(ad.relu(-dw)).mean()


def butterfly_penalty_t(w: ad.Tensor, m) -> ad.Tensor:
    """Mean of relu(-d2w/dm2)^2 over interior stencils (and batch)."""
    return ad.square(ad.relu(-_second_diff_tensor(w, m))).mean()


def calendar_penalty(w) -> float:
    return calendar_penalty_t(ad.as_tensor(w)).item()


def butterfly_penalty(w, m) -> float:
    return butterfly_penalty_t(ad.as_tensor(w), m).item()
