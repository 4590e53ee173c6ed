"""Reconstruction metrics, regional breakdown, sweeps and attention export.

Any object with ``predict(x) -> (B, 8, 25)`` on ``(B, 2, 8, 25)`` inputs can
be evaluated: the neural models and ``svi.SviBaseline`` both qualify.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ModelKindError, NoMissingPointsError, VolSurfError
from .noarb import ViolationStats, butterfly_check, calendar_check, expected_severity
from .surface import SurfaceGrid, build_input, mask_rng, random_mask, total_variance, wing_mask

log = logging.getLogger(__name__)

MONEYNESS_REGIONS = ("deep_otm_put", "otm_put", "atm", "otm_call", "deep_otm_call")
TENOR_REGIONS = ("short", "medium", "long")
MASK_MODES = ("random", "wing+random")
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 10))
DEFAULT_LAMBDAS = (0.0, 0.01, 0.05, 0.1, 0.5, 1.0)
PREDICT_BATCH = 32


@dataclass(frozen=True)
class Metrics:
    rmse_miss: float | None
    rmse_obs: float | None
    mae: float
    max_err: float
    butterfly: ViolationStats
    calendar: ViolationStats
    expected_severity: float

    def to_dict(self) -> dict:
        return {
            "rmse_miss": self.rmse_miss,
            "rmse_obs": self.rmse_obs,
            "mae": self.mae,
            "max_err": self.max_err,
            "butterfly_rate": self.butterfly.rate,
            "butterfly_mean_magnitude": self.butterfly.mean_magnitude,
            "calendar_rate": self.calendar.rate,
            "calendar_mean_magnitude": self.calendar.mean_magnitude,
            "expected_severity": self.expected_severity,
        }


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def evaluate(pred, truth, mask, g: SurfaceGrid, target_mask=None, allow_no_missing: bool = False) -> Metrics:
    """Metrics of one ``(8, 25)`` prediction.

    rmse_miss uses missing-but-valid points, rmse_obs observed valid points,
    mae and max_err all valid points. Arbitrage statistics come from the
    predicted total variance over the whole grid.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(g.shape)
    iv = getattr(truth, "iv", truth)
    iv = np.asarray(iv, dtype=np.float64).reshape(g.shape)
    if target_mask is None:
        target_mask = getattr(truth, "target_mask", None)
    valid = np.ones(g.shape, bool) if target_mask is None else np.asarray(target_mask).reshape(g.shape) > 0.5
    obs = np.asarray(mask).reshape(g.shape) > 0.5
    miss = valid & ~obs
    if not miss.any() and not allow_no_missing:
        raise NoMissingPointsError("no missing point with valid ground truth")
    err = (pred - iv)[valid]
    w = total_variance(pred, g)
    bf = butterfly_check(w, g.log_moneyness)
    return Metrics(
        _rms((pred - iv)[miss]) if miss.any() else None,
        _rms((pred - iv)[valid & obs]) if (valid & obs).any() else None,
        float(np.mean(np.abs(err))) if err.size else 0.0,
        float(np.max(np.abs(err))) if err.size else 0.0,
        bf,
        calendar_check(w),
        expected_severity(bf),
    )


def aggregate(metrics) -> Metrics:
    """Arithmetic mean of per-surface errors; violation statistics pooled."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("nothing to aggregate")

    def mean(name):
        vals = [getattr(m, name) for m in metrics if getattr(m, name) is not None]
        return float(np.mean(vals)) if vals else None

    bf = ViolationStats.pooled(m.butterfly for m in metrics)
    return Metrics(
        mean("rmse_miss"), mean("rmse_obs"), mean("mae"), float(max(m.max_err for m in metrics)),
        bf, ViolationStats.pooled(m.calendar for m in metrics), expected_severity(bf),
    )


def predict_batched(model, x: np.ndarray) -> np.ndarray:
    return np.concatenate([model.predict(x[s : s + PREDICT_BATCH]) for s in range(0, len(x), PREDICT_BATCH)])


def draw_eval_masks(dataset, p: float, seed: int, mode: str = "random") -> np.ndarray:
    """Deterministic per-surface masks for rate ``p``; wing mode ANDs the wing mask."""
    if mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}")
    g = dataset.grid
    wing = wing_mask(g) if mode == "wing+random" else np.ones(g.shape)
    out = np.empty((len(dataset), *g.shape))
    tag = int(round(p * 1_000_000))
    for i in range(len(dataset)):
        m = random_mask(p, mask_rng(seed, tag, i), g.shape) * wing
        if not m.any():
            m = wing
        out[i] = m
    return out


def evaluate_model(model, dataset, p: float = 0.3, seed: int = 0, mode: str = "random",
                   masks: np.ndarray | None = None):
    """Aggregate Metrics plus the per-surface list and the predictions."""
    masks = draw_eval_masks(dataset, p, seed, mode) if masks is None else masks
    obs = masks * (dataset.target_mask > 0.5)
    preds = predict_batched(model, build_input(dataset.iv, obs))
    per = [
        evaluate(preds[i], dataset.iv[i], obs[i], dataset.grid, dataset.target_mask[i], allow_no_missing=True)
        for i in range(len(dataset))
    ]
    return aggregate(per), per, preds


# -- regional breakdown ----------------------------------------------------------------

def moneyness_region(m: float) -> int:
    if m < -0.2:
        return 0
    if m < -0.05:
        return 1
    if m <= 0.05:
        return 2
    if m <= 0.2:
        return 3
    return 4


def tenor_region(tau: float) -> int:
    if tau <= 0.25:
        return 0
    if tau <= 1.0:
        return 1
    return 2


@dataclass(frozen=True)
class RegionalMatrix:
    rmse: list[list[float | None]]
    counts: list[list[int]]
    moneyness_regions: tuple = MONEYNESS_REGIONS
    tenor_regions: tuple = TENOR_REGIONS

    def to_rows(self) -> list[dict]:
        return [
            {"moneyness": mr, "tenor": tr, "rmse_miss": self.rmse[i][j], "count": self.counts[i][j]}
            for i, mr in enumerate(self.moneyness_regions)
            for j, tr in enumerate(self.tenor_regions)
        ]

    def recombined(self) -> float | None:
        """Count-weighted root-mean-square over the non-empty cells."""
        num = sum(self.rmse[i][j] ** 2 * self.counts[i][j] for i in range(5) for j in range(3) if self.counts[i][j])
        den = sum(c for row in self.counts for c in row)
        return math.sqrt(num / den) if den else None


def regional(pred, truth, mask, g: SurfaceGrid, target_mask=None) -> RegionalMatrix:
    """RMSE over missing points in each moneyness x tenor cell.

    Accepts single ``(8, 25)`` arrays or stacks ``(n, 8, 25)``; errors are
    pooled within each cell. Empty cells are reported as None.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, *g.shape)
    iv = np.asarray(getattr(truth, "iv", truth), dtype=np.float64).reshape(pred.shape)
    if target_mask is None:
        target_mask = getattr(truth, "target_mask", np.ones(pred.shape))
    miss = (np.asarray(target_mask).reshape(pred.shape) > 0.5) & (np.asarray(mask).reshape(pred.shape) < 0.5)
    sq = np.where(miss, (pred - iv) ** 2, 0.0)
    mr = np.array([moneyness_region(m) for m in g.log_moneyness])
    tr = np.array([tenor_region(t) for t in g.tenors])
    rmse = [[None] * 3 for _ in range(5)]
    counts = [[0] * 3 for _ in range(5)]
    for i in range(5):
        for j in range(3):
            cell = np.ix_(tr == j, mr == i)
            n = int(miss[:, cell[0], cell[1]].sum())
            counts[i][j] = n
            if n:
                rmse[i][j] = math.sqrt(float(sq[:, cell[0], cell[1]].sum()) / n)
    return RegionalMatrix(rmse, counts)


# -- sweeps ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    p: float
    mode: str
    metrics: Metrics
    structural_missing: int = 0

    def to_dict(self) -> dict:
        return {"p": self.p, "mask_mode": self.mode, "structural_missing": self.structural_missing,
                **self.metrics.to_dict()}


def sparsity_sweep(model, test_set, fractions=DEFAULT_FRACTIONS, seed: int = 0, mode: str = "random") -> list[SweepRow]:
    """Evaluate a fixed model at each missing fraction (no retraining)."""
    rows = []
    structural = int((wing_mask(test_set.grid) == 0).sum()) if mode == "wing+random" else 0
    for p in fractions:
        agg, _, _ = evaluate_model(model, test_set, float(p), seed, mode)
        rows.append(SweepRow(float(p), mode, agg, structural))
    return rows


@dataclass
class LambdaCell:
    lam: float
    seed: int
    metrics: Metrics | None = None
    error: str | None = None


@dataclass
class LambdaRow:
    lam: float
    rmse_miss: float | None
    butterfly_rate: float | None
    expected_severity: float | None
    n_ok: int
    cells: list[LambdaCell] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "rmse_miss": self.rmse_miss, "butterfly_rate": self.butterfly_rate,
                "expected_severity": self.expected_severity, "n_seeds_ok": self.n_ok,
                "errors": [c.error for c in self.cells if c.error]}


def lambda_sweep(cfg, tcfg, lambdas, seeds, train_set, val_set, test_set,
                 p: float = 0.3, eval_seed: int = 0, trainer=None) -> list[LambdaRow]:
    """Train one model per (lambda, seed) with butterfly weight lambda and
    report seed-averaged test metrics, ordered by lambda.

    A failing cell is recorded and skipped; the sweep carries on.
    """
    from .nn.train import train as default_train

    trainer = trainer or default_train
    lambdas = sorted(float(x) for x in lambdas)
    seeds = [int(s) for s in seeds]
    if not lambdas or not seeds:
        raise ValueError("lambda_sweep needs at least one lambda and one seed")
    masks = draw_eval_masks(test_set, p, eval_seed)
    rows = []
    for lam in lambdas:
        cells = []
        for s in seeds:
            cell = LambdaCell(lam, s)
            try:
                report = trainer(cfg, replace(tcfg, lambda_but=lam, seed=s), train_set, val_set)
                cell.metrics = evaluate_model(report.model, test_set, masks=masks)[0]
            except (VolSurfError, ArithmeticError, ValueError) as exc:
                cell.error = f"{type(exc).__name__}: {exc}"
                log.warning("lambda %g seed %d failed: %s", lam, s, cell.error)
            cells.append(cell)
        ok = [c.metrics for c in cells if c.metrics is not None]

        def avg(f):
            vals = [f(m) for m in ok if f(m) is not None]
            return float(np.mean(vals)) if vals else None

        rows.append(LambdaRow(lam, avg(lambda m: m.rmse_miss), avg(lambda m: m.butterfly.rate),
                              avg(lambda m: m.expected_severity), len(ok), cells))
    return rows


# -- attention --------------------------------------------------------------------------

def attention_export(model, x, tokens) -> np.ndarray:
    """Decoder cross-attention rows for the requested query tokens.

    ``x`` is one ``(2, 8, 25)`` input. Returns ``(layers, heads, len(tokens), 200)``.
    """
    if not hasattr(model, "attention"):
        raise ModelKindError(f"attention export needs a Transformer, got {type(model).__name__}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("attention export takes a single surface")
    n = model.grid.size
    tokens = [int(t) for t in tokens]
    bad = [t for t in tokens if not 0 <= t < n]
    if bad:
        raise IndexError(f"token indices {bad} outside [0, {n})")
    layers = model.attention(x)
    return np.stack([w[0][:, tokens, :] for w in layers])


# -- writers ---------------------------------------------------------------------------

def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_table(rows: list[dict], csv_path, json_path=None, meta: dict | None = None) -> None:
    """CSV table plus a JSON sidecar holding the same rows (and ``meta``)."""
    rows = [{k: _clean(v) for k, v in r.items()} for r in rows]
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (json.dumps(r[k]) if isinstance(r.get(k), (list, dict)) else r[k])) for k in cols})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"meta": meta or {}, "rows": rows}, fh, indent=2, sort_keys=True)
