"""Masked-reconstruction loss, training loop with early stopping, checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .._container import read_container, write_container
from ..errors import ConfigMismatchError, DivergenceError, FormatError, NoMissingPointsError
from ..noarb import butterfly_penalty_t, calendar_penalty_t
from ..surface import SurfaceGrid, build_input, mask_rng, random_mask
from . import autodiff as ad
from .models import Model, ModelConfig, build_model
from .optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VSCKPT\x00\x01"
# stream tags keep training and validation masks on disjoint substreams
_TRAIN_STREAM, _VAL_STREAM = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 30
    lambda_cal: float = 0.0
    lambda_but: float = 0.0
    missing_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.lambda_cal < 0 or self.lambda_but < 0:
            raise ValueError("penalty weights must be non-negative")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        """Defaults with the lower Transformer learning rate."""
        if kind.lower() == "transformer":
            overrides.setdefault("learning_rate", 1e-4)
        return cls(**overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    initial_val_loss: float
    best_epoch: int
    best_val_loss: float
    best_params: dict[str, np.ndarray] = field(repr=False)
    stop_reason: str

    @property
    def epochs_run(self) -> int:
        return len(self.val_losses)

    def summary(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "initial_val_loss": self.initial_val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "epochs_run": self.epochs_run,
        }

    def __eq__(self, other):
        if not isinstance(other, TrainReport):
            return NotImplemented
        return self.summary() == other.summary() and all(
            np.array_equal(self.best_params[k], other.best_params[k]) for k in self.best_params
        ) and self.best_params.keys() == other.best_params.keys()


def loss(pred: ad.Tensor, target, mask, target_mask, grid: SurfaceGrid,
         lambda_cal: float = 0.0, lambda_but: float = 0.0) -> ad.Tensor:
    """MSE on missing-but-valid points plus weighted no-arbitrage penalties.

    ``pred`` is ``(B, 1, 8, 25)`` or ``(B, 8, 25)``; the other arrays are
    ``(B, 8, 25)``. Penalties use w = pred^2 * tau over the full grid.
    """
    target = np.asarray(target, dtype=np.float64)
    B = target.shape[0] if target.ndim == 3 else 1
    shape = (B, *grid.shape)
    target = target.reshape(shape)
    weight = (1.0 - np.asarray(mask, dtype=np.float64).reshape(shape)) * np.asarray(target_mask, dtype=np.float64).reshape(shape)
    if not weight.any():
        raise NoMissingPointsError("no missing point with valid ground truth in this batch")
    sig = pred.reshape(*shape)
    out = ad.masked_mse(sig, target, weight)
    if lambda_cal or lambda_but:
        w = ad.square(sig) * grid.tenors[:, None]
        if lambda_cal:
            out = out + calendar_penalty_t(w) * lambda_cal
        if lambda_but:
            out = out + butterfly_penalty_t(w, grid.log_moneyness) * lambda_but
    return out


def draw_masks(dataset, tcfg: TrainConfig, epoch: int, stream: int, idx=None) -> np.ndarray:
    """Observation masks for surfaces ``idx`` of ``dataset`` at ``epoch``.

    Each mask depends only on (seed, stream, epoch, surface index) and is
    intersected with the surface's ground-truth mask.
    """
    idx = range(len(dataset)) if idx is None else idx
    out = np.empty((len(idx), *dataset.grid.shape))
    for r, i in enumerate(idx):
        rng = mask_rng(tcfg.seed, stream, epoch, int(i))
        m = random_mask(tcfg.missing_fraction, rng, dataset.grid.shape) * (dataset.target_mask[i] > 0.5)
        out[r] = m if m.any() else dataset.target_mask[i]
    return out


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def evaluate_loss(model: Model, dataset, masks: np.ndarray, tcfg: TrainConfig) -> float:
    """Sample-weighted mean batch loss, no graph built."""
    total, count = 0.0, 0
    with ad.no_grad():
        for sl in _batches(len(dataset), tcfg.batch_size):
            iv, tm, m = dataset.iv[sl], dataset.target_mask[sl], masks[sl]
            if not ((1.0 - m) * tm).any():
                continue
            pred = model.forward(build_input(iv, m))
            val = loss(pred, iv, m, tm, dataset.grid, tcfg.lambda_cal, tcfg.lambda_but).item()
            total += val * iv.shape[0]
            count += iv.shape[0]
    if count == 0:
        raise NoMissingPointsError("validation set has no missing points under the drawn masks")
    return total / count


def train(cfg: ModelConfig | Model, tcfg: TrainConfig, train_set, val_set, callback=None) -> TrainReport:
    """Adam training with fresh masks per epoch and early stopping.

    ``cfg`` may be a config (a model is built from ``tcfg.seed``) or an
    existing model to continue from. On return the model, reachable as
    ``report.model``, holds the best-validation parameters. ``callback``
    is called as ``callback(epoch, train_loss, val_loss)``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation splits must be non-empty")
    if train_set.grid != val_set.grid:
        raise ValueError("training and validation grids differ")
    grid = train_set.grid
    model = cfg if isinstance(cfg, Model) else build_model(cfg, grid, tcfg.seed)
    opt = Adam(model.parameters(), tcfg.learning_rate)
    order_rng = np.random.default_rng([tcfg.seed, 2])

    initial = evaluate_loss(model, val_set, draw_masks(val_set, tcfg, 0, _VAL_STREAM), tcfg)
    train_losses, val_losses = [], []
    best_epoch, best_val, best = -1, math.inf, model.state()
    stop = "max_epochs"
    for epoch in range(tcfg.max_epochs):
        order = order_rng.permutation(len(train_set))
        masks = draw_masks(train_set, tcfg, epoch, _TRAIN_STREAM, order)
        run, seen = 0.0, 0
        for sl in _batches(len(order), tcfg.batch_size):
            idx = order[sl]
            iv, tm, m = train_set.iv[idx], train_set.target_mask[idx], masks[sl]
            if not ((1.0 - m) * tm).any():
                continue
            opt.zero_grad()
            value = loss(model.forward(build_input(iv, m)), iv, m, tm, grid, tcfg.lambda_cal, tcfg.lambda_but)
            if not np.isfinite(value.item()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            value.backward()
            opt.step()
            run += value.item() * len(idx)
            seen += len(idx)
        train_loss = run / seen if seen else math.nan
        val_loss = evaluate_loss(model, val_set, draw_masks(val_set, tcfg, epoch, _VAL_STREAM), tcfg)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_epoch, best_val, best = epoch, val_loss, model.state()
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, train_loss, val_loss)
        if epoch - best_epoch >= tcfg.patience:
            stop = "patience"
            break
    model.load_state(best)
    report = TrainReport(train_losses, val_losses, initial, best_epoch, best_val, best, stop)
    report.model = model
    return report


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: Model, tcfg: TrainConfig | None = None,
                    epoch: int | None = None, metrics: dict | None = None) -> None:
    header = {
        "kind": "checkpoint",
        "model_config": model.cfg.to_dict(),
        "train_config": tcfg.to_dict() if tcfg else None,
        "grid": model.grid.to_dict(),
        "epoch": epoch,
        "metrics": metrics or {},
        "param_names": list(model.params),
        "param_shapes": [list(p.shape) for p in model.params.values()],
    }
    write_container(path, CHECKPOINT_MAGIC, header, model.get_flat())


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Model, dict]:
    """Rebuild the model stored at ``path``.

    Raises ``ConfigMismatchError`` if ``expected`` is given and differs from
    the stored config, or if the stored layout does not fit the config.
    """
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
        grid = SurfaceGrid.from_dict(header["grid"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc
    if expected is not None and expected != cfg:
        raise ConfigMismatchError(f"{path}: stored config {cfg} does not match expected {expected}")
    model = build_model(cfg, grid)
    layout = (list(model.params), [list(p.shape) for p in model.params.values()])
    if layout != (header.get("param_names"), header.get("param_shapes")) or payload.size != model.param_count():
        raise ConfigMismatchError(f"{path}: parameter layout does not match config {cfg}")
    model.set_flat(payload)
    return model, header
