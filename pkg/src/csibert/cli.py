"""Command-line entry point: ``csibert gen|train|eval|check``.

Option precedence, highest first: command line, ``--config`` file (JSON or
YAML; top-level keys or a section named after the subcommand), the
``CSI_BERT_SEED`` environment variable (seed only), built-in defaults.

Exit codes: 0 success, 1 check failure or diverged training, 2 usage or
configuration error, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import __version__
from .channel_sim import desk_dataset_config, paper_dataset_config
from .checks import results_as_dicts, run_checks
from .dataset_io import generate_to_disk, read_dataset
from .estimators import LinearRegressionBaseline, MaskedCsiTransformer, MLPBaseline
from .exceptions import ConfigError, FormatError, TrainingDivergedError
from .experiments import EXPERIMENTS, emit_report, prepare, run_experiment
from .model import MODEL_PRESETS
from .training import write_loss_csv

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "CSI_BERT_SEED"

DATASET_PRESETS = {"desk": desk_dataset_config, "paper": paper_dataset_config}

DEFAULTS = {
    "gen": {
        "preset": "desk", "out": None, "seed": 0, "cells": None, "ues": None, "subcarriers": None,
        "tx": None, "rx": None, "snr_db": None, "spacing": None, "threads": None,
    },
    "train": {
        "data": None, "model_preset": "desk", "lr": None, "batch": None, "epochs": None,
        "mask": "every:10", "optimizer": "adam", "loss_scope": "all", "plain_head": False,
        "seed": 0, "split_seed": None, "out": None, "threads": None,
    },
    "eval": {"data": None, "ckpt": None, "experiment": "all", "out": None, "seed": None, "threads": None},
    "check": {"json": False, "trials": 3, "seed": 0},
}
REQUIRED = {
    "gen": ("out",),
    "train": ("data", "lr", "batch", "epochs", "out"),
    "eval": ("data", "ckpt", "out"),
    "check": (),
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csibert", description="Masked transformer reconstruction of synthetic MIMO CSI.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, threads=True):
        p.add_argument("--config", help="JSON or YAML file with option values")
        if seed:
            p.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV})")
        if threads:
            p.add_argument("--threads", type=int, help="worker threads (default: available cores)")

    g = sub.add_parser("gen", help="generate a synthetic CSI dataset")
    common(g)
    g.add_argument("--preset", choices=sorted(DATASET_PRESETS))
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--cells", type=int)
    g.add_argument("--ues", type=int, help="UEs per cell")
    g.add_argument("--subcarriers", type=int)
    g.add_argument("--tx", type=int, help="transmit antennas")
    g.add_argument("--rx", type=int, help="receive antennas")
    g.add_argument("--snr-db", type=float)
    g.add_argument("--spacing", type=float, help="subcarrier spacing in Hz")

    t = sub.add_parser("train", help="train the transformer")
    common(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--model-preset", choices=sorted(MODEL_PRESETS))
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--batch", type=int, help="batch size")
    t.add_argument("--epochs", type=int)
    t.add_argument("--mask", help="bernoulli:p, every:k or ratio:gamma")
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--loss-scope", choices=("all", "masked"))
    t.add_argument("--plain-head", action="store_const", const=True)
    t.add_argument("--split-seed", type=int, help="train/validation split seed (default: --seed)")
    t.add_argument("--out", help="output directory")

    e = sub.add_parser("eval", help="run evaluation experiments")
    common(e)
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--ckpt", help="transformer checkpoint")
    e.add_argument("--experiment", help=f"all or one of: {', '.join(EXPERIMENTS)}")
    e.add_argument("--out", help="report directory")

    c = sub.add_parser("check", help="run the fast invariant suite")
    common(c, threads=False)
    c.add_argument("--json", action="store_const", const=True, help="machine-readable output")
    c.add_argument("--trials", type=int, help="randomized trials per gradient check")
    return parser


def load_config_file(path: str, command: str) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of option names to values")
    section = data.get(command, {})
    flat = {k: v for k, v in data.items() if k not in DEFAULTS}
    flat.update(section or {})
    return {k.replace("-", "_"): v for k, v in flat.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge command line, config file, environment and defaults."""
    command = args.command
    defaults = DEFAULTS[command]
    file_values = load_config_file(args.config, command) if getattr(args, "config", None) else {}
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown option(s) in config file for {command}: {', '.join(sorted(unknown))}")
    env_seed = os.environ.get(SEED_ENV)
    out = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_values.get(key)
        if value is None and key == "seed" and env_seed is not None:
            try:
                value = int(env_seed)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
        out[key] = default if value is None else value
    missing = [k for k in REQUIRED[command] if out[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if out.get("threads") is None and "threads" in defaults:
        out["threads"] = os.cpu_count() or 1
    return out


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(opts: dict) -> int:
    overrides = {
        "cells": opts["cells"], "ues_per_cell": opts["ues"], "n_subcarriers": opts["subcarriers"],
        "n_tx": opts["tx"], "n_rx": opts["rx"], "snr_db": opts["snr_db"], "subcarrier_spacing": opts["spacing"],
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    config = DATASET_PRESETS[opts["preset"]](seed=opts["seed"], **overrides)
    path = generate_to_disk(config, opts["out"], threads=opts["threads"])
    print(f"wrote {config.n_matrices} matrices to {path}")
    return EXIT_OK


def transformer_from_options(opts: dict) -> MaskedCsiTransformer:
    preset = MODEL_PRESETS[opts["model_preset"]]()
    return MaskedCsiTransformer(
        d_model=preset.d_model,
        n_layers=preset.n_layers,
        n_heads=preset.n_heads,
        d_ff=preset.d_ff,
        plain_head=bool(opts["plain_head"]),
        learning_rate=float(opts["lr"]),
        batch_size=int(opts["batch"]),
        epochs=int(opts["epochs"]),
        optimizer=opts["optimizer"],
        mask=opts["mask"],
        loss_scope=opts["loss_scope"],
        random_state=int(opts["seed"]),
    )


def cmd_train(opts: dict, argv: list[str]) -> int:
    split_seed = opts["seed"] if opts["split_seed"] is None else opts["split_seed"]
    opts = {**opts, "split_seed": split_seed}
    data = prepare(read_dataset(opts["data"]), split_seed)
    model = transformer_from_options(opts)
    model.fit(data.X_train)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "split_seed": split_seed,
        "dataset_path": str(opts["data"]),
        "dataset_config": data.dataset.config.to_dict(),
        "train_indices": data.train_idx.tolist(),
    }
    ckpt = model.save(out / "model.ckpt", extra=extra)
    write_loss_csv(model.loss_history_, out / "loss_history.csv")
    _write_json(out / "run_manifest.json", {
        "command": ["train", *argv],
        "resolved": opts,
        "seed": opts["seed"],
        "artifacts": {"checkpoint": ckpt.name, "loss_history": "loss_history.csv"},
        "toolkit_version": __version__,
    })
    final = model.loss_history_[-1]["loss"]
    print(f"trained {len(model.loss_history_)} steps, final loss {final:.6g}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(opts: dict, argv: list[str]) -> int:
    names = list(EXPERIMENTS) if opts["experiment"] == "all" else [opts["experiment"]]
    if names[0] not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {names[0]!r}; valid: all, {', '.join(EXPERIMENTS)}")
    model = MaskedCsiTransformer.load(opts["ckpt"])
    split_seed = model.manifest_.get("extra", {}).get("split_seed", model.random_state)
    data = prepare(read_dataset(opts["data"]), split_seed)
    if data.X.shape[2] != model.n_features_in_:
        raise ConfigError(f"dataset feature dimension {data.X.shape[2]} does not match the checkpoint ({model.n_features_in_})")
    shared = {k: model.get_params()[k] for k in ("learning_rate", "batch_size", "epochs", "optimizer", "mask", "loss_scope", "random_state")}

    def run(name):
        baselines = None
        if name == "baselines":
            baselines = {
                "linear_regression": LinearRegressionBaseline(mask=model.mask, random_state=model.random_state),
                "mlp": MLPBaseline(**shared),
            }
        return run_experiment(name, model, data, baselines)

    with ThreadPoolExecutor(max_workers=max(1, int(opts["threads"]))) as pool:
        reports = list(pool.map(run, names))
    out = Path(opts["out"])
    written = []
    for report in reports:
        written += [p.name for p in emit_report(report, out)]
    _write_json(out / "run_manifest.json", {
        "command": ["eval", *argv],
        "resolved": {k: v for k, v in opts.items() if k != "threads"},
        "seed": model.random_state,
        "artifacts": written,
        "toolkit_version": __version__,
    })
    for report in reports:
        for row in report.rows:
            labels = ", ".join(f"{k}={v}" for k, v in row["labels"].items())
            print(f"{report.experiment:15s} {labels:45s} {row['metric_name']}={row['value']:.6g}")
    return EXIT_OK


def cmd_check(opts: dict) -> int:
    results = run_checks(trials=int(opts["trials"]), seed=int(opts["seed"]))
    ok = all(r.passed for r in results)
    if opts["json"]:
        print(json.dumps({"passed": ok, "checks": results_as_dicts(results)}, indent=2))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:30s} {r.detail}")
        failed = [r.name for r in results if not r.passed]
        print("all checks passed" if ok else f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return EXIT_OK if ok else EXIT_CHECK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        opts = resolve(args)
        if args.command == "gen":
            return cmd_gen(opts)
        if args.command == "train":
            return cmd_train(opts, argv[1:])
        if args.command == "eval":
            return cmd_eval(opts, argv[1:])
        return cmd_check(opts)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"csibert: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"csibert: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"csibert: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, ValueError, yaml.YAMLError) as exc:
        print(f"csibert: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())
