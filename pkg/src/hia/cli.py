"""``hia`` command line: synth, train, eval, ablate, gop, correlate.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime or
numeric failure.  Set ``HIA_LOG`` (DEBUG, INFO, WARNING, ...) for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import gop
from .data import SynthConfig, load_dataset, save_dataset, synth_generate, correlation_matrix
from .metrics import evaluate, format_table, summarize
from .model import HIAModel, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import NumericError
from .train import TrainConfig, fit, run_seeds

log = logging.getLogger("hia")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

CONFIG_SECTIONS = ("model", "train", "synth")

# ablation name -> ModelConfig overrides
VARIANTS = {
    "full": {},
    "no-iam-phn": {"use_iam_phn": False},
    "no-iam-word": {"use_iam_word": False},
    "no-iam-utt": {"use_iam_utt": False},
    "no-residual": {"use_residual": False},
    "no-hierarchy": {"use_hierarchy": False},
}


class InvalidInput(ValueError):
    """Bad flags, config or input files; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


def load_run_config(path) -> dict:
    """Read a ``{"model": {...}, "train": {...}, "synth": {...}}`` file, rejecting unknown keys."""
    if path is None:
        return {k: {} for k in CONFIG_SECTIONS}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise InvalidInput(f"config {path} must be a JSON object")
    unknown = set(obj) - set(CONFIG_SECTIONS)
    if unknown:
        raise InvalidInput(f"unknown config sections {sorted(unknown)}")
    cfg = {k: obj.get(k, {}) for k in CONFIG_SECTIONS}
    for k, v in cfg.items():
        if not isinstance(v, dict):
            raise InvalidInput(f"config section {k!r} must be an object")
    # validate now so no command starts work on a bad config
    ModelConfig.from_dict(cfg["model"])
    TrainConfig.from_dict(cfg["train"])
    synth_config(cfg["synth"])
    return cfg


def synth_config(d: dict) -> SynthConfig:
    names = set(SynthConfig.__dataclass_fields__)
    unknown = set(d) - names
    if unknown:
        raise InvalidInput(f"unknown synth config keys {sorted(unknown)}")
    d = dict(d)
    if "phones_per_word" in d:
        d["phones_per_word"] = tuple(d["phones_per_word"])
    return SynthConfig(**d).validate()


def model_config(run: dict, args) -> ModelConfig:
    d = dict(run["model"])
    for flag in ("iam_phn", "iam_word", "iam_utt", "residual", "hierarchy"):
        if getattr(args, f"no_{flag}", False):
            d[f"use_{flag}"] = False
    for opt, key in (("conv_layers", "conv_layers"), ("embed_dim", "embed_dim"), ("heads", "n_heads")):
        if getattr(args, opt, None) is not None:
            d[key] = getattr(args, opt)
    return ModelConfig.from_dict(d)


def train_config(run: dict, args) -> TrainConfig:
    d = dict(run["train"])
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def _load_data(path, what: str):
    samples = load_dataset(path)
    if not samples:
        raise InvalidInput(f"{what} set {path} is empty")
    return samples


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    d = dict(run["synth"])
    if args.seed is not None:
        d["seed"] = args.seed
    if args.n is not None:
        d["n_utterances"] = args.n
    samples = synth_generate(synth_config(d))
    save_dataset(samples, args.out)
    log.info("wrote %d utterances to %s", len(samples), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    mcfg = model_config(run, args)
    tcfg = train_config(run, args)
    train_set = _load_data(args.data, "training")
    dev_set = _load_data(args.dev, "dev")
    model = HIAModel(mcfg, seed=tcfg.seed)
    result = fit(model, train_set, dev_set, tcfg)
    save_checkpoint(args.out_ckpt, model, epoch=result.best_epoch, best_metric=result.best_dev_phone_mse,
                    extra={"train": asdict(tcfg), "diverged": result.diverged})
    history = args.history or str(Path(args.out_ckpt).with_suffix(".history.csv"))
    Path(history).write_text(result.history_csv())
    if result.diverged:
        log.error("training diverged; wrote the best checkpoint from epoch %d", result.best_epoch)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.ckpt).is_file():
        raise InvalidInput(f"checkpoint {args.ckpt} not found")
    model, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, _load_data(args.data, "evaluation"))
    _write_json(args.out_report, report.to_dict())
    print(format_table({Path(args.ckpt).stem: report}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    names = args.variants.split(",")
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise InvalidInput(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
    base = model_config(run, args)
    tcfg = train_config(run, args)
    train_set = _load_data(args.data, "training")
    dev_set = _load_data(args.dev, "dev")
    test_set = _load_data(args.test, "test") if args.test else None
    rows, out = {}, {}
    for name in names:
        reports = run_seeds(train_set, dev_set, replace(base, **VARIANTS[name]), tcfg, args.seeds, test_set)
        summary = summarize(reports)
        rows[name] = summary
        out[name] = {"runs": [r.to_dict() for r in reports],
                     "mean": {k: m for k, (m, _) in summary.items()},
                     "std": {k: s for k, (_, s) in summary.items()}}
    _write_json(args.out_report, out)
    table = format_table(rows)
    if args.table:
        Path(args.table).write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gop(args) -> int:
    n = gop.run_file(args.posteriors, args.align, args.out)
    log.info("wrote %d GOP vectors to %s", n, args.out)
    return EXIT_OK


def cmd_correlate(args) -> int:
    samples = load_dataset(args.data)
    names, mat = correlation_matrix(samples)
    matrix = [[None if np.isnan(v) else float(v) for v in row] for row in mat]
    _write_json(args.out, {"fields": list(names), "matrix": matrix, "n": len(samples)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("ablations")
    g.add_argument("--no-iam-phn", action="store_true", help="drop the IAM phoneme head")
    g.add_argument("--no-iam-word", action="store_true", help="drop the IAM word head")
    g.add_argument("--no-iam-utt", action="store_true", help="drop the IAM utterance head")
    g.add_argument("--no-residual", action="store_true", help="do not re-inject encoder features")
    g.add_argument("--no-hierarchy", action="store_true", help="do not pass lower-level scores upward")
    g.add_argument("--conv-layers", type=int, help="convolution layers per level")
    g.add_argument("--embed-dim", type=int, help="model width")
    g.add_argument("--heads", type=int, help="attention heads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hia", description="Multi-granularity pronunciation scoring tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scored corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of utterances (overrides config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and keep the best dev checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--history", help="history CSV path (default: next to the checkpoint)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train several seeds per variant and report mean and std")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test", help="evaluation set (default: the dev set)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", default="full", help=f"comma list from {','.join(VARIANTS)}")
    p.add_argument("--out-report", required=True)
    p.add_argument("--table", help="also write the text table here")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gop", help="extract 84-dim GOP vectors from posteriors and an alignment")
    p.add_argument("--posteriors", required=True)
    p.add_argument("--align", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gop)

    p = sub.add_parser("correlate", help="correlation matrix of per-utterance score aggregates")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    level = logging.getLevelName(os.environ.get("HIA_LOG", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"hia: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, OSError) as exc:
        # GopFormatError, DatasetError and InvalidInput are ValueErrors
        print(f"hia: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"hia: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
