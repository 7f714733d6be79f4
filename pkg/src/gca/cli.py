"""Command-line entry point: generate, train, eval, export-structure."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import autodiff as ad
from . import data
from .experiment import (ConfigError, DataError, ExperimentConfig, evaluate_model, generate_dataset,
                         load_model, read_json, resolve_eval_data, run_experiment)
from .metrics import export_structures
from .trainer import MODES, TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gca")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own; keep usage text on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _domains(text: str) -> list[str]:
    ids = [s.strip() for s in text.split(",") if s.strip()]
    if not ids:
        raise argparse.ArgumentTypeError("expected a comma-separated list of domain ids")
    return ids


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


# flag -> ExperimentConfig field, for train overrides
TRAIN_FLAGS = {
    "data": ("data_dir", str), "source_csv": ("source_csv", str), "target_csv": ("target_csv", str),
    "out": ("out_dir", str), "domain_pair": ("domain_pair", str), "mode": ("mode", str),
    "seed": ("seed", int), "epochs": ("epochs", int), "lr": ("lr", float),
    "batch_size": ("batch_size", int), "max_lag": ("max_lag", int), "window": ("window", int),
    "horizon": ("horizon", int), "target_var": ("target_var", int), "gamma": ("gamma", float),
    "delta": ("delta", float), "lam": ("lam", float),
    "labeled_fraction": ("labeled_target_fraction", float), "prior_p": ("prior_p", float),
    "sigma_dec": ("sigma_dec", float), "n_predict_steps": ("n_predict_steps", int),
    "steps_per_epoch": ("steps_per_epoch", int), "stride": ("stride", int),
    "threshold": ("threshold", float),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gca", description="Granger-causal domain adaptation for time-series forecasting.")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate domains sharing one causal structure")
    g.add_argument("--vars", type=_positive_int, required=True)
    g.add_argument("--lag", type=_positive_int, required=True)
    g.add_argument("--density", type=_fraction, required=True)
    g.add_argument("--length", type=_positive_int, required=True,
                   help="rows per domain after subsampling")
    g.add_argument("--domains", type=_domains, required=True, help="preset ids, e.g. 1,2")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--weight-scale", type=float, default=1.0)
    g.add_argument("--burn-in", type=int, default=200)
    g.add_argument("--perturb", action="store_true", help="perturb weights per domain")
    g.add_argument("--noise-std", type=float, help="override every domain's noise level")
    g.add_argument("--interval", type=_positive_int, help="override every domain's sampling interval")
    g.add_argument("--nonlinearity", type=float, help="override every domain's c")
    g.add_argument("--noise-is-variance", action="store_true", help="read the noise level as a variance")

    t = sub.add_parser("train", help="train a model and write a run directory")
    t.add_argument("--config", help="ExperimentConfig JSON; flags override its values")
    t.add_argument("--data", help="directory written by 'generate'")
    t.add_argument("--source-csv")
    t.add_argument("--target-csv")
    t.add_argument("--out")
    t.add_argument("--domain-pair", help="e.g. 1->2")
    t.add_argument("--mode", choices=MODES)
    for flag, (_, typ) in TRAIN_FLAGS.items():
        if flag in ("data", "source_csv", "target_csv", "out", "domain_pair", "mode"):
            continue
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out windows")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="generated directory or series CSV")
    e.add_argument("--ground-truth")
    e.add_argument("--domain", help="domain id (default: the model's target domain)")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--report", help="report JSON path (default: next to the model)")

    x = sub.add_parser("export-structure", help="write inferred structures as JSON and CSV")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--threshold", type=_fraction, default=0.5)
    x.add_argument("--domain")
    x.add_argument("--split", default="test", choices=("train", "val", "test"))
    return p


def cmd_generate(args) -> int:
    overrides = {"noise_std": args.noise_std, "sample_interval": args.interval,
                 "nonlinearity_c": args.nonlinearity}
    if args.noise_is_variance:
        overrides["noise_is_variance"] = True
    try:
        manifest = generate_dataset(args.out, args.vars, args.lag, args.density, args.length,
                                    args.domains, args.seed, args.weight_scale, args.burn_in,
                                    args.perturb, overrides)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc
    print(f"wrote {len(manifest['domains'])} domains to {args.out}")
    return EXIT_OK


def experiment_config(args) -> ExperimentConfig:
    base = read_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    flagged = {field: getattr(args, flag) for flag, (field, _) in TRAIN_FLAGS.items()
               if getattr(args, flag, None) is not None}
    if flagged.keys() & {"data_dir", "source_csv", "target_csv"}:
        for key in ("data_dir", "source_csv", "target_csv", "synthetic"):
            base.pop(key, None)
    base.update(flagged)
    try:
        return ExperimentConfig.from_dict(base)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    if cfg.out_dir is None:
        raise ConfigError("an output directory is required (--out or out_dir)")
    res = run_experiment(cfg)
    print(f"best_epoch={res.best_epoch}")
    print(f"val_mse={res.history[res.best_epoch]['val_mse']!r}")
    return EXIT_OK


def _ground_truth(path):
    if path is None:
        return None
    try:
        return data.structures_from_dict(read_json(path))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: not a ground-truth structure file ({exc})") from exc


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = resolve_eval_data(model, args.data, args.domain, args.split)
    report = evaluate_model(model, ds, _ground_truth(args.ground_truth))
    for line in report.lines():
        print(line)
    out = Path(args.report) if args.report else Path(args.model).with_name("eval_report.json")
    out.write_text(json.dumps(report.to_dict(), indent=1))
    return EXIT_OK


def cmd_export_structure(args) -> int:
    model = load_model(args.model)
    if not model.params.config.structured:
        raise ConfigError("baseline checkpoints carry no structure to export")
    ds = resolve_eval_data(model, args.data, args.domain, args.split)
    export_structures(model.params, ds, args.out, args.threshold)
    print(f"wrote structures to {args.out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "export-structure": cmd_export_structure}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if not logging.getLogger().handlers and not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, data.UnstableSimulationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, ad.NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
