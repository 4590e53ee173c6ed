"""Evaluation lattice, surface container, and observation masks.

Masks are plain ``(8, 25)`` float arrays of zeros and ones (1 = observed);
model inputs are ``(2, 8, 25)`` arrays, optionally with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMaskError, ShapeError

TENORS = (0.08, 0.17, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0)
STRIKE_RANGE = (70.0, 130.0)
N_STRIKES = 25
REFERENCE_FORWARD = 100.0
WING_THRESHOLD = 0.3


@dataclass(frozen=True)
class SurfaceGrid:
    tenors: np.ndarray
    strikes: np.ndarray
    forward: float = REFERENCE_FORWARD
    log_moneyness: np.ndarray = field(init=False)

    def __post_init__(self):
        tenors = np.asarray(self.tenors, dtype=np.float64)
        strikes = np.asarray(self.strikes, dtype=np.float64)
        if tenors.ndim != 1 or strikes.ndim != 1:
            raise ShapeError("tenors and strikes must be one-dimensional")
        if np.any(np.diff(tenors) <= 0) or np.any(tenors <= 0):
            raise ValueError("tenors must be positive and strictly increasing")
        if np.any(np.diff(strikes) <= 0) or np.any(strikes <= 0):
            raise ValueError("strikes must be positive and strictly increasing")
        if not self.forward > 0:
            raise ValueError("forward must be positive")
        for a in (tenors, strikes):
            a.setflags(write=False)
        logm = np.log(strikes / self.forward)
        logm.setflags(write=False)
        object.__setattr__(self, "tenors", tenors)
        object.__setattr__(self, "strikes", strikes)
        object.__setattr__(self, "forward", float(self.forward))
        object.__setattr__(self, "log_moneyness", logm)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.tenors.size, self.strikes.size)

    @property
    def size(self) -> int:
        return self.tenors.size * self.strikes.size

    def to_dict(self) -> dict:
        return {"tenors": self.tenors.tolist(), "strikes": self.strikes.tolist(), "forward": self.forward}

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceGrid":
        return cls(np.asarray(d["tenors"]), np.asarray(d["strikes"]), float(d["forward"]))

    def __eq__(self, other):
        if not isinstance(other, SurfaceGrid):
            return NotImplemented
        return (
            self.forward == other.forward
            and np.array_equal(self.tenors, other.tenors)
            and np.array_equal(self.strikes, other.strikes)
        )

    def __hash__(self):
        return hash((self.forward, self.tenors.tobytes(), self.strikes.tobytes()))


def make_grid() -> SurfaceGrid:
    """The standard 8-tenor x 25-strike lattice around a forward of 100."""
    return SurfaceGrid(
        np.array(TENORS),
        np.linspace(STRIKE_RANGE[0], STRIKE_RANGE[1], N_STRIKES),
        REFERENCE_FORWARD,
    )


@dataclass
class VolSurface:
    """Implied volatilities on a grid plus the mask of valid ground truth."""

    iv: np.ndarray
    target_mask: np.ndarray | None = None

    def __post_init__(self):
        self.iv = np.asarray(self.iv, dtype=np.float64)
        if self.iv.ndim != 2:
            raise ShapeError(f"iv must be a matrix, got shape {self.iv.shape}")
        if self.target_mask is None:
            self.target_mask = np.ones_like(self.iv)
        self.target_mask = np.asarray(self.target_mask, dtype=np.float64)
        if self.target_mask.shape != self.iv.shape:
            raise ShapeError(f"target_mask shape {self.target_mask.shape} != iv shape {self.iv.shape}")

    def validate(self) -> None:
        valid = self.target_mask > 0.5
        vals = self.iv[valid]
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0) or np.any(vals >= 3):
            raise ValueError("valid iv entries must be finite and in (0, 3)")


def total_variance(s: VolSurface | np.ndarray, g: SurfaceGrid) -> np.ndarray:
    """w = iv^2 * tau, row by row; accepts a surface or a raw (..., 8, 25) array."""
    iv = s.iv if isinstance(s, VolSurface) else np.asarray(s, dtype=np.float64)
    return iv * iv * g.tenors[:, None]


def _check_mask(m: np.ndarray) -> np.ndarray:
    if not np.any(m):
        raise DegenerateMaskError("mask has no observed entries")
    return m


def random_mask(p: float, rng: np.random.Generator, shape: tuple[int, int] = (8, 25)) -> np.ndarray:
    """Drop each entry independently with probability ``p``.

    An all-missing draw is resampled once; a second one raises.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"missing fraction must lie in [0, 1), got {p}")
    for _ in range(2):
        m = (rng.random(shape) >= p).astype(np.float64)
        if m.any():
            return m
    raise DegenerateMaskError(f"two consecutive all-missing masks drawn at p={p}")


def mask_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, ...) coordinate, e.g. (seed, epoch, index)."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


def wing_mask(g: SurfaceGrid) -> np.ndarray:
    """Zero out every column with |log-moneyness| above the wing threshold."""
    keep = np.abs(g.log_moneyness) <= WING_THRESHOLD
    return np.broadcast_to(keep.astype(np.float64), g.shape).copy()


def combine_masks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.logical_and(np.asarray(a) > 0.5, np.asarray(b) > 0.5).astype(np.float64)
    return _check_mask(out)


def build_input(s: VolSurface | np.ndarray, m: np.ndarray) -> np.ndarray:
    """Two-channel model input: masked iv (zeros where missing) and the mask."""
    iv = s.iv if isinstance(s, VolSurface) else np.asarray(s, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if iv.shape != m.shape:
        raise ShapeError(f"iv shape {iv.shape} != mask shape {m.shape}")
    return np.stack([np.where(m > 0.5, iv, 0.0), m], axis=-3)
