"""Command-line entry points.

Every subcommand resolves its settings as: built-in defaults, then a flat
JSON config file (``--config``), then explicit flags. Unknown config keys are
rejected. The resolved settings are written as ``config.resolved.json``
next to the outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import errors
from .eval import (DEFAULT_FRACTIONS, DEFAULT_LAMBDAS, MASK_MODES, attention_export, draw_eval_masks,
                   evaluate_model, lambda_sweep, regional, sparsity_sweep, write_table)
from .ingest import IngestConfig, build_real_dataset, read_quotes, write_rejections
from .surface import build_input

OUTPUT_ROOT_ENV = "VOLSURF_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
RESOLVED_CONFIG = "config.resolved.json"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("volsurf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- option tables: name -> (type, default, help) ---------------------------------------

def _floats(s):
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def _ints(s):
    if isinstance(s, (list, tuple)):
        return [int(x) for x in s]
    return [int(x) for x in str(s).split(",") if x.strip()]


def _sweep(s):
    """'a:b:step' (inclusive) or a comma list."""
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    s = str(s)
    if ":" in s:
        a, b, step = (float(x) for x in s.split(":"))
        if step <= 0 or b < a:
            raise ValueError(f"bad sweep range {s!r}")
        n = int(round((b - a) / step)) + 1
        return [round(a + i * step, 10) for i in range(n)]
    return _floats(s)


def _bool(s):
    if isinstance(s, bool):
        return s
    return str(s).lower() in ("1", "true", "yes")


_TRAIN_OPTS = {
    "lr": (float, None, "learning rate (default 1e-3, Transformer 1e-4)"),
    "batch_size": (int, 32, "minibatch size"),
    "max_epochs": (int, 500, "epoch budget"),
    "patience": (int, 30, "early-stopping patience in epochs"),
    "lambda_cal": (float, 0.0, "calendar penalty weight"),
    "lambda_but": (float, 0.0, "butterfly penalty weight"),
    "p": (float, 0.3, "training missing fraction"),
    "seed": (int, 0, "training seed"),
    "pos_encoding": (str, "fourier", "Transformer coordinates: fourier or learnable"),
}

COMMANDS = {
    "gen-data": {
        "n": (int, 1000, "number of surfaces"),
        "seed": (int, 456, "dataset seed"),
        "out": (str, None, "output dataset file (default <out_dir>/dataset.bin)"),
        "splits": (_bool, False, "write the train/val/test splits (seeds 42/123/456)"),
        "split_sizes": (_ints, None, "override split sizes, e.g. 500,100,100"),
        "workers": (int, None, "worker processes (default: all cores)"),
        "csv": (_bool, False, "also export a CSV per dataset"),
        "out_dir": (str, None, "output directory"),
    },
    "train": {
        "model": (str, "transformer", "mlp, cnn or transformer"),
        "train": (str, None, "training dataset file"),
        "val": (str, None, "validation dataset file"),
        **_TRAIN_OPTS,
        "out_dir": (str, None, "output directory"),
    },
    "eval": {
        "ckpt": (str, None, "checkpoint to evaluate"),
        "svi": (_bool, False, "evaluate the SVI baseline instead of a checkpoint"),
        "test": (str, None, "test dataset file"),
        "p": (float, 0.3, "missing fraction"),
        "sweep": (_sweep, None, "missing fractions, 'a:b:step' or comma list"),
        "mask_mode": (str, "random", "random or wing+random"),
        "seed": (int, 0, "mask seed"),
        "limit": (int, None, "evaluate only the first N surfaces"),
        "out_dir": (str, None, "output directory"),
    },
    "lambda-sweep": {
        "model": (str, "transformer", "mlp, cnn or transformer"),
        "train": (str, None, "training dataset file"),
        "val": (str, None, "validation dataset file"),
        "test": (str, None, "test dataset file"),
        "lambdas": (_floats, list(DEFAULT_LAMBDAS), "butterfly weights"),
        "seeds": (_ints, [0, 1, 2], "training seeds"),
        **{k: v for k, v in _TRAIN_OPTS.items() if k not in ("lambda_but", "seed")},
        "eval_seed": (int, 0, "test mask seed"),
        "out_dir": (str, None, "output directory"),
    },
    "ingest": {
        "quotes": (str, None, "quote CSV file"),
        "out": (str, None, "output dataset file (default <out_dir>/real.bin)"),
        "report": (str, None, "rejection report CSV (default <out_dir>/rejections.csv)"),
        "rate": (float, 0.0, "continuously compounded rate"),
        "dividend_yield": (float, 0.0, "continuously compounded dividend yield"),
        "tenor_rel_tolerance": (float, 0.30, "relative tenor matching tolerance"),
        "min_tenor_coverage": (float, 0.75, "minimum fraction of tenors present"),
        "min_avg_strike_coverage": (float, 0.70, "minimum average strike coverage"),
        "max_rel_spread": (float, 0.50, "maximum relative bid-ask spread"),
        "out_dir": (str, None, "output directory"),
    },
    "attn": {
        "ckpt": (str, None, "Transformer checkpoint"),
        "data": (str, None, "dataset file"),
        "index": (int, 0, "surface index"),
        "tokens": (_ints, None, "query token indices (0-199, row-major)"),
        "p": (float, 0.3, "missing fraction of the input mask"),
        "seed": (int, 0, "mask seed"),
        "out": (str, None, "output CSV (default <out_dir>/attention.csv)"),
        "out_dir": (str, None, "output directory"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volsurf", description="Implied-volatility surface reconstruction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat JSON file of settings (flags override)")
        for key, (typ, default, help_) in opts.items():
            flag = "--" + key.replace("_", "-")
            if typ is _bool:
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None,
                                help=f"{help_} (default {default})" if default is not None else help_)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    opts = COMMANDS[command]
    cfg = {k: v[1] for k, v in opts.items()}
    if ns.config:
        try:
            with open(ns.config) as fh:
                filed = json.load(fh)
        except OSError as exc:
            raise errors.FormatError(f"cannot read config {ns.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {ns.config} is not valid JSON: {exc}") from exc
        if not isinstance(filed, dict):
            raise UsageError(f"config {ns.config} must be a flat JSON object")
        unknown = sorted(set(filed) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in filed.items():
            try:
                cfg[k] = None if v is None else opts[k][0](v)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {k!r}: {exc}") from exc
    for k in opts:
        v = getattr(ns, k)
        if v is not None:
            cfg[k] = v
    if cfg.get("out_dir") is None:
        cfg["out_dir"] = str(Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / command)
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(cfg: dict) -> Path:
    d = Path(cfg["out_dir"])
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise errors.FormatError(f"cannot create output directory {d}: {exc}") from exc
    return d


def _write_resolved(d: Path, command: str, cfg: dict):
    with open(d / RESOLVED_CONFIG, "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)


def _load(path):
    from .synthgen import load_dataset

    if not Path(path).is_file():
        raise errors.FormatError(f"dataset file not found: {path}")
    return load_dataset(path)


def _train_configs(cfg: dict):
    from .nn.models import ModelConfig
    from .nn.train import TrainConfig

    model = cfg["model"].lower()
    if model not in ("mlp", "cnn", "transformer"):
        raise UsageError(f"unknown model {cfg['model']!r}")
    if cfg["pos_encoding"] not in ("fourier", "learnable"):
        raise UsageError(f"unknown positional encoding {cfg['pos_encoding']!r}")
    mcfg = ModelConfig(kind=model, positional_encoding=cfg["pos_encoding"])
    kw = dict(batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"], patience=min(cfg["patience"], cfg["max_epochs"]),
              lambda_cal=cfg["lambda_cal"], missing_fraction=cfg["p"])
    if "lambda_but" in cfg:
        kw["lambda_but"] = cfg["lambda_but"]
    if "seed" in cfg:
        kw["seed"] = cfg["seed"]
    if cfg["lr"] is not None:
        kw["learning_rate"] = cfg["lr"]
    try:
        tcfg = TrainConfig.for_model(model, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return mcfg, tcfg


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    from .synthgen import DEFAULT_SPLITS, export_csv, generate_dataset, save_dataset

    d = _out_dir(cfg)
    jobs = []
    if cfg["splits"]:
        sizes = cfg["split_sizes"] or [v[0] for v in DEFAULT_SPLITS.values()]
        if len(sizes) != 3:
            raise UsageError("--split-sizes needs three sizes (train,val,test)")
        for (name, (_, seed)), n in zip(DEFAULT_SPLITS.items(), sizes):
            jobs.append((name, n, seed, d / f"{name}.bin"))
    else:
        jobs.append(("", cfg["n"], cfg["seed"], Path(cfg["out"]) if cfg["out"] else d / "dataset.bin"))
    for name, n, seed, path in jobs:
        if n < 1:
            raise UsageError("dataset size must be at least 1")
        ds = generate_dataset(n, seed, split_name=name, workers=cfg["workers"])
        try:
            save_dataset(ds, path)
            if cfg["csv"]:
                export_csv(ds, path.with_suffix(".csv"))
        except OSError as exc:
            raise errors.FormatError(f"cannot write {path}: {exc}") from exc
        log.info("wrote %s (%d surfaces, seed %d)", path, n, seed)
        print(path)
    _write_resolved(d, "gen-data", cfg)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .nn.train import save_checkpoint, train

    _require(cfg, "train", "val")
    mcfg, tcfg = _train_configs(cfg)
    tr, va = _load(cfg["train"]), _load(cfg["val"])
    d = _out_dir(cfg)
    report = train(mcfg, tcfg, tr, va)
    ckpt = d / "checkpoint.bin"
    save_checkpoint(ckpt, report.model, tcfg, report.best_epoch, {"best_val_loss": report.best_val_loss})
    with open(d / "report.json", "w") as fh:
        json.dump({"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(), **report.summary()}, fh, indent=2)
    _write_resolved(d, "train", cfg)
    print(ckpt)
    return EXIT_OK


def _reconstructor(cfg: dict, grid):
    from .nn.train import load_checkpoint
    from .svi import SviBaseline

    if cfg["svi"] and cfg["ckpt"]:
        raise UsageError("give either --ckpt or --svi, not both")
    if cfg["svi"]:
        return SviBaseline(grid), "svi"
    _require(cfg, "ckpt")
    if not Path(cfg["ckpt"]).is_file():
        raise errors.FormatError(f"checkpoint not found: {cfg['ckpt']}")
    model, _ = load_checkpoint(cfg["ckpt"])
    return model, model.cfg.kind


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "test")
    if cfg["mask_mode"] not in MASK_MODES:
        raise UsageError(f"--mask-mode must be one of {MASK_MODES}")
    test = _load(cfg["test"])
    if cfg["limit"]:
        test = test.subset(np.arange(min(cfg["limit"], len(test))))
    model, name = _reconstructor(cfg, test.grid)
    d = _out_dir(cfg)
    fractions = cfg["sweep"] if cfg["sweep"] is not None else [cfg["p"]]
    rows = sparsity_sweep(model, test, fractions, cfg["seed"], cfg["mask_mode"])
    table = [{"model": name, "setting": cfg["mask_mode"], "lambda": None, **r.to_dict()} for r in rows]
    write_table(table, d / "metrics.csv", d / "metrics.json", {"command": "eval"})
    if cfg["sweep"] is None:
        masks = draw_eval_masks(test, cfg["p"], cfg["seed"], cfg["mask_mode"]) * (test.target_mask > 0.5)
        _, _, preds = evaluate_model(model, test, masks=masks)
        reg = regional(preds, test.iv, masks, test.grid, test.target_mask)
        write_table(reg.to_rows(), d / "regional.csv", d / "regional.json", {"model": name})
    _write_resolved(d, "eval", cfg)
    print(d / "metrics.csv")
    return EXIT_OK


def cmd_lambda_sweep(cfg: dict) -> int:
    _require(cfg, "train", "val", "test")
    if not cfg["lambdas"]:
        raise UsageError("--lambdas must list at least one value")
    if not cfg["seeds"]:
        raise UsageError("--seeds must list at least one seed")
    mcfg, tcfg = _train_configs(cfg)
    tr, va, te = _load(cfg["train"]), _load(cfg["val"]), _load(cfg["test"])
    d = _out_dir(cfg)
    rows = lambda_sweep(mcfg, tcfg, cfg["lambdas"], cfg["seeds"], tr, va, te, cfg["p"], cfg["eval_seed"])
    table = [{"model": mcfg.kind, "setting": "lambda-sweep", "p": cfg["p"], **r.to_dict()} for r in rows]
    write_table(table, d / "pareto.csv", d / "pareto.json", {"seeds": cfg["seeds"]})
    _write_resolved(d, "lambda-sweep", cfg)
    print(d / "pareto.csv")
    return EXIT_OK


def cmd_ingest(cfg: dict) -> int:
    from .surface import make_grid
    from .synthgen import save_dataset

    _require(cfg, "quotes")
    if not Path(cfg["quotes"]).is_file():
        raise errors.FormatError(f"quote file not found: {cfg['quotes']}")
    try:
        icfg = IngestConfig(rate=cfg["rate"], dividend_yield=cfg["dividend_yield"],
                            tenor_rel_tolerance=cfg["tenor_rel_tolerance"], min_tenor_coverage=cfg["min_tenor_coverage"],
                            min_avg_strike_coverage=cfg["min_avg_strike_coverage"], max_rel_spread=cfg["max_rel_spread"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    quotes = read_quotes(cfg["quotes"])
    ds, rejections = build_real_dataset(quotes, make_grid(), icfg)
    d = _out_dir(cfg)
    out = Path(cfg["out"]) if cfg["out"] else d / "real.bin"
    report = Path(cfg["report"]) if cfg["report"] else d / "rejections.csv"
    try:
        save_dataset(ds, out)
        write_rejections(rejections, report)
    except OSError as exc:
        raise errors.FormatError(f"cannot write outputs: {exc}") from exc
    _write_resolved(d, "ingest", cfg)
    print(f"{out}: {len(ds)} accepted, {len(rejections)} rejected")
    return EXIT_OK


def cmd_attn(cfg: dict) -> int:
    from .nn.train import load_checkpoint

    _require(cfg, "ckpt", "data", "tokens")
    if not Path(cfg["ckpt"]).is_file():
        raise errors.FormatError(f"checkpoint not found: {cfg['ckpt']}")
    model, _ = load_checkpoint(cfg["ckpt"])
    ds = _load(cfg["data"])
    if not 0 <= cfg["index"] < len(ds):
        raise UsageError(f"surface index {cfg['index']} outside [0, {len(ds)})")
    sub = ds.subset([cfg["index"]])
    mask = draw_eval_masks(sub, cfg["p"], cfg["seed"])[0] * (sub.target_mask[0] > 0.5)
    try:
        weights = attention_export(model, build_input(sub.iv[0], mask), cfg["tokens"])
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    d = _out_dir(cfg)
    rows = []
    for layer in range(weights.shape[0]):
        for head in range(weights.shape[1]):
            for r, tok in enumerate(cfg["tokens"]):
                rows.append({"layer": layer, "head": head, "query_token": tok,
                             **{f"k{j}": float(weights[layer, head, r, j]) for j in range(weights.shape[3])}})
    out = Path(cfg["out"]) if cfg["out"] else d / "attention.csv"
    write_table(rows, out, out.with_suffix(".json"), {"surface_index": cfg["index"], "p": cfg["p"],
                                                      "observed_mask": mask.astype(int).ravel().tolist()})
    _write_resolved(d, "attn", cfg)
    print(out)
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "lambda-sweep": cmd_lambda_sweep,
    "ingest": cmd_ingest,
    "attn": cmd_attn,
}

_NUMERIC = (errors.ConvergenceError, errors.DivergenceError, errors.OptimizerError, errors.GenerationError,
            errors.NumericalOverflowError, errors.SamplingBudgetError, FloatingPointError)
_DATA = (errors.FormatError, errors.ConfigMismatchError, errors.ShapeError, errors.NoMissingPointsError,
         errors.AllMaskedError, errors.DegenerateMaskError, errors.ModelKindError, OSError)


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(name)s: %(message)s")
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
