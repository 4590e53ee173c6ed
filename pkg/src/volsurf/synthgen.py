"""Heston parameter sampling, synthetic surfaces, dataset persistence."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._container import read_container, write_container
from .errors import FormatError, GenerationError, SamplingBudgetError, VolSurfError
from .pricing import HestonParams, MarketContext, OptionSpec, heston_otm_prices, implied_vol
from .surface import SurfaceGrid, VolSurface, make_grid

PARAM_RANGES = {
    "v0": (0.01, 0.16),
    "kappa": (0.5, 5.0),
    "theta": (0.01, 0.16),
    "xi": (0.1, 0.8),
    "rho": (-0.9, -0.1),
}
MAX_REJECTIONS = 10_000
DEFAULT_SPLITS = {"train": (8000, 42), "val": (1000, 123), "test": (1000, 456)}
DATASET_MAGIC = b"VSDATA\x00\x01"


@dataclass
class Dataset:
    """A stack of surfaces on one grid.

    ``iv`` and ``target_mask`` are ``(n, 8, 25)``; invalid entries hold 0.
    ``params`` is empty for market data; ``labels`` carries per-surface tags
    such as quote dates.
    """

    grid: SurfaceGrid
    iv: np.ndarray
    target_mask: np.ndarray
    params: list[HestonParams] = field(default_factory=list)
    seed: int | None = None
    split_name: str = ""
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.iv = np.asarray(self.iv, dtype=np.float64).reshape(-1, *self.grid.shape)
        self.target_mask = np.asarray(self.target_mask, dtype=np.float64).reshape(self.iv.shape)
        if self.params and len(self.params) != len(self.iv):
            raise ValueError("params and surfaces must have the same length")

    def __len__(self) -> int:
        return self.iv.shape[0]

    @property
    def surfaces(self) -> list[VolSurface]:
        return [VolSurface(self.iv[i], self.target_mask[i]) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.grid,
            self.iv[idx],
            self.target_mask[idx],
            [self.params[i] for i in idx] if self.params else [],
            self.seed,
            self.split_name,
            [self.labels[i] for i in idx] if self.labels else [],
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.iv, other.iv)
            and np.array_equal(self.target_mask, other.target_mask)
            and self.params == other.params
            and self.seed == other.seed
            and self.split_name == other.split_name
            and self.labels == other.labels
        )


def sample_heston_params(rng: np.random.Generator) -> HestonParams:
    """Uniform draw from the sampling box, rejecting Feller violations."""
    lo = np.array([r[0] for r in PARAM_RANGES.values()])
    hi = np.array([r[1] for r in PARAM_RANGES.values()])
    for _ in range(MAX_REJECTIONS):
        v0, kappa, theta, xi, rho = rng.uniform(lo, hi)
        if 2.0 * kappa * theta >= xi * xi:
            return HestonParams(float(v0), float(kappa), float(theta), float(xi), float(rho))
    raise SamplingBudgetError(f"{MAX_REJECTIONS} consecutive Feller rejections")


def generate_surface(p: HestonParams, g: SurfaceGrid, ctx: MarketContext | None = None) -> VolSurface:
    """Heston implied-volatility surface on ``g``.

    Each grid point is priced as the OTM option (put below the forward) and
    inverted with ``implied_vol``.
    """
    ctx = ctx or MarketContext(g.forward)
    iv = np.empty(g.shape)
    for i, tau in enumerate(g.tenors):
        try:
            prices = heston_otm_prices(p, ctx, g.strikes, float(tau))
        except VolSurfError as exc:
            raise GenerationError(f"pricing failed at tenor {tau}: {exc}", i, None) from exc
        for j, K in enumerate(g.strikes):
            try:
                iv[i, j] = implied_vol(float(prices[j]), ctx, OptionSpec(float(K), float(tau), bool(K >= ctx.forward)))
            except VolSurfError as exc:
                raise GenerationError(f"inversion failed at (tau={tau}, K={K}): {exc}", i, j) from exc
    return VolSurface(iv)


def _surface_job(args):
    p, grid_dict = args
    return generate_surface(p, SurfaceGrid.from_dict(grid_dict)).iv


def generate_dataset(
    n: int,
    seed: int,
    grid: SurfaceGrid | None = None,
    split_name: str = "",
    workers: int | None = None,
) -> Dataset:
    """``n`` surfaces from independent parameter draws.

    Surface ``i`` draws its parameters from the substream ``(seed, i)``, so the
    result does not depend on ``workers`` or on execution order.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    grid = grid or make_grid()
    params = [sample_heston_params(np.random.default_rng([seed, i])) for i in range(n)]
    workers = workers or os.cpu_count() or 1
    jobs = [(p, grid.to_dict()) for p in params]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            ivs = list(pool.map(_surface_job, jobs, chunksize=max(1, n // (4 * workers))))
    else:
        ivs = [_surface_job(j) for j in jobs]
    iv = np.stack(ivs)
    return Dataset(grid, iv, np.ones_like(iv), params, seed, split_name)


def save_dataset(d: Dataset, path) -> None:
    header = {
        "kind": "dataset",
        "grid": d.grid.to_dict(),
        "seed": d.seed,
        "count": len(d),
        "split_name": d.split_name,
        "params": [list(p.as_tuple()) for p in d.params],
        "labels": list(d.labels),
    }
    # invalid entries travel as NaN so the payload stays one block
    payload = np.where(d.target_mask > 0.5, d.iv, np.nan)
    write_container(path, DATASET_MAGIC, header, payload)


def load_dataset(path) -> Dataset:
    header, payload = read_container(path, DATASET_MAGIC)
    try:
        grid = SurfaceGrid.from_dict(header["grid"])
        count = int(header["count"])
        params = [HestonParams(*row) for row in header["params"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset header ({exc})") from exc
    if payload.size != count * grid.size:
        raise FormatError(f"{path}: payload holds {payload.size} values, expected {count * grid.size}")
    raw = payload.reshape(count, *grid.shape)
    valid = np.isfinite(raw)
    return Dataset(
        grid,
        np.where(valid, raw, 0.0),
        valid.astype(np.float64),
        params,
        header.get("seed"),
        header.get("split_name", ""),
        list(header.get("labels", [])),
    )


def export_csv(d: Dataset, path) -> None:
    """One row per grid point; iv left blank where there is no ground truth."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["surface_id", "tenor", "strike", "log_moneyness", "iv"])
        for s in range(len(d)):
            for i, tau in enumerate(d.grid.tenors):
                for j, K in enumerate(d.grid.strikes):
                    val = repr(float(d.iv[s, i, j])) if d.target_mask[s, i, j] > 0.5 else ""
                    w.writerow([s, repr(float(tau)), repr(float(K)), repr(float(d.grid.log_moneyness[j])), val])
