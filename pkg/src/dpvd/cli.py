"""Command line: ``dpvd {train,eval,accountant,experiment}``.

Configuration files are flat ``key = value`` text with ``#`` comments. Keys
mirror :class:`~dpvd.trainer.TrainConfig` fields plus ``dataset``,
``data_path`` and ``split_rule``; experiment files add ``cells``,
``epsilons``, ``repeats``, ``sweep``, ``sweep_values`` and ``seed_base``.
Flags given on the command line override the file.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 infeasible privacy budget.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import accountant as acc
from .datasets import BENCHMARKS, DatasetError, load_benchmark
from .experiment import ExperimentSpec, final_means, run_experiment
from .trainer import ConfigError, TrainConfig, config_from_mapping, evaluate, summary_json, train
from .vdnet import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3
DATA_KEYS = ("dataset", "data_path", "split_rule")
EXPERIMENT_KEYS = ("cells", "epsilons", "repeats", "sweep", "sweep_values", "seed_base")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into a dict of strings."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def _check_keys(values: dict, allowed) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _collect(args, allowed) -> dict:
    values = read_config(args.config) if args.config else {}
    values.update(_parse_set(args.set))
    flag_map = {
        "seed": args.seed, "method": args.method, "delta": args.delta, "clip_c": args.clip,
        "epochs": args.epochs, "dataset": args.dataset, "data_path": args.data_path,
        "split_rule": args.split_rule, "sigma": getattr(args, "sigma", None),
    }
    for key, value in flag_map.items():
        if value is not None:
            values[key] = str(value)
    if getattr(args, "no_dropout", False):
        values["mode"] = "svi"
    if getattr(args, "nonprivate", False):
        values["mode"] = "nonprivate"
    _check_keys(values, allowed)
    return values


def _load_data(values: dict):
    name = values.get("dataset", "digits")
    if name not in BENCHMARKS:
        raise ConfigError(f"dataset must be one of {BENCHMARKS}")
    try:
        return load_benchmark(name, values.get("data_path") or None, values.get("split_rule", "interleaved"))
    except FileNotFoundError as err:
        raise ConfigError(str(err)) from None
    except DatasetError as err:
        raise ConfigError(f"bad dataset: {err}") from None


def cmd_train(args) -> int:
    values = _collect(args, TRAIN_KEYS + DATA_KEYS)
    if args.epsilon:
        if len(args.epsilon) != 1:
            raise ConfigError("train takes a single --epsilon")
        values["epsilon"] = str(args.epsilon[0])
    config = config_from_mapping(values)
    train_set, test_set = _load_data(values)
    config.validate(len(train_set))
    net, report = train(train_set, config, test_set)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    (out / "summary.json").write_text(summary_json(report, config) + "\n")
    save_checkpoint(net, out / "model.npz")
    print(f"test_acc={report.final_test_acc:.4f} train_acc={report.final_train_acc:.4f} "
          f"eps_spent={report.eps_spent:.6g} sigma={report.sigma}")
    return EXIT_OK


def cmd_eval(args) -> int:
    values = {k: v for k, v in (("dataset", args.dataset), ("data_path", args.data_path),
                                ("split_rule", args.split_rule)) if v is not None}
    try:
        net = load_checkpoint(args.model)
    except (OSError, KeyError, ValueError) as err:
        raise ConfigError(f"cannot load model {args.model}: {err}") from None
    train_set, test_set = _load_data(values)
    part = test_set if args.split == "test" else train_set
    if part.n_features != net.sizes[0]:
        raise ConfigError(f"model expects {net.sizes[0]} features, data has {part.n_features}")
    print(json.dumps({"split": args.split, "n": len(part), "accuracy": evaluate(net, part)}))
    return EXIT_OK


def sigma_curve(epsilons, delta, nu, iterations, clip_c=2.0) -> list[dict]:
    rows = []
    for eps in epsilons:
        row = {"epsilon": eps}
        for method in acc.METHODS:
            params = acc.PrivacyParams(eps, delta, clip_c, nu, iterations, method)
            try:
                row[f"sigma_{method}"] = acc.solve_sigma(params)
            except acc.InfeasibleBudget:
                row[f"sigma_{method}"] = float("nan")
        rows.append({"epsilon": eps, "sigma_ac": row["sigma_ac"], "sigma_zcdp": row["sigma_zcdp"]})
    return rows


def cmd_accountant(args) -> int:
    if args.iterations is None and args.epochs is None:
        raise ConfigError("give --iterations or --epochs")
    if args.iterations is not None and args.epochs is not None:
        raise ConfigError("give only one of --iterations and --epochs")
    if not 0 < args.nu <= 1:
        raise ConfigError("--nu must lie in (0, 1]")
    t = args.iterations if args.iterations is not None else acc.iterations_for_epochs(args.epochs, args.nu)
    epsilons = args.epsilon or [10.0, 1.0, 0.1]
    try:
        for eps in epsilons:
            acc.PrivacyParams(eps, args.delta, args.clip, args.nu, t)
    except acc.PrivacyError as err:
        raise ConfigError(str(err)) from None
    if args.method:
        params = acc.PrivacyParams(epsilons[0], args.delta, args.clip, args.nu, t, args.method)
        sigma = acc.solve_sigma(params)
        print(json.dumps({"method": args.method, "epsilon": epsilons[0], "sigma": sigma,
                          "noise_std": acc.noise_std_for_update(sigma, args.clip), "iterations": t}))
        return EXIT_OK
    rows = sigma_curve(epsilons, args.delta, args.nu, t, args.clip)
    out = sys.stdout
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        out = open(Path(args.out_dir) / "sigma_curve.csv", "w", newline="")
    try:
        writer = csv.DictWriter(out, fieldnames=("epsilon", "sigma_ac", "sigma_zcdp"))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) for k, v in row.items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def experiment_spec(values: dict) -> ExperimentSpec:
    try:
        base = config_from_mapping({k: v for k, v in values.items() if k in TRAIN_KEYS})
        spec = ExperimentSpec(base=base)
        for key in DATA_KEYS:
            if key in values:
                setattr(spec, key, values[key] or None)
        if "cells" in values:
            spec.cells = tuple(c.strip() for c in values["cells"].split(",") if c.strip())
        if "epsilons" in values:
            spec.epsilons = _floats(values["epsilons"])
        if "delta" in values:
            spec.delta = float(values["delta"])
        if "repeats" in values:
            spec.repeats = int(values["repeats"])
        if "seed_base" in values:
            spec.seed_base = int(values["seed_base"])
        if values.get("sweep"):
            spec.sweep = values["sweep"]
            caster = float if spec.sweep == "clip_c" else int
            spec.sweep_values = tuple(caster(float(v)) if caster is int else caster(v)
                                      for v in values.get("sweep_values", "").split(",") if v.strip())
        spec.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return spec


def cmd_experiment(args) -> int:
    values = _collect(args, TRAIN_KEYS + DATA_KEYS + EXPERIMENT_KEYS)
    if args.epsilon:
        values["epsilons"] = ",".join(str(e) for e in args.epsilon)
    if args.repeats is not None:
        values["repeats"] = str(args.repeats)
    if "seed" in values:
        # each repeat gets its own seed, counting up from here
        values["seed_base"] = values.pop("seed")
    spec = experiment_spec(values)
    data = _load_data(values)
    results = run_experiment(spec, args.out_dir, data=data, workers=args.workers,
                             log=lambda msg: print(msg, flush=True))
    for (cell, eps, value), mean in sorted(final_means(results).items(), key=str):
        print(f"{cell} eps={eps:g}{'' if value is None else f' {spec.sweep}={value}'} mean_test_acc={mean:.4f}")
    failed = [r for r in results if r.status != "ok"]
    if failed:
        print(f"{len(failed)} of {len(results)} runs did not complete; see runs.csv", file=sys.stderr)
        if all(r.status == "infeasible" for r in results):
            return EXIT_BUDGET
        return EXIT_RUNTIME
    return EXIT_OK


def _common(p, data=True, config=True):
    if config:
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--method", choices=acc.METHODS)
        p.add_argument("--delta", type=float)
        p.add_argument("--clip", type=float, help="per-layer clipping norm C")
        p.add_argument("--epochs", type=int)
    if data:
        p.add_argument("--dataset", choices=BENCHMARKS)
        p.add_argument("--data-path", help="DIGITS CSV file or MNIST IDX directory")
        p.add_argument("--split-rule", choices=("interleaved", "head"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpvd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--epsilon", type=float, nargs="+")
    p.add_argument("--sigma", type=float, help="fixed noise multiplier (no budget enforcement)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--no-dropout", action="store_true", help="deterministic network (svi mode)")
    group.add_argument("--nonprivate", action="store_true")
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model")
    _common(p, config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("accountant", help="noise multiplier for a privacy budget")
    p.add_argument("--epsilon", type=float, nargs="+")
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--nu", type=float, required=True, help="sampling ratio S/N")
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=float)
    p.add_argument("--clip", type=float, default=2.0)
    p.add_argument("--method", choices=acc.METHODS, help="single method instead of the curve")
    p.add_argument("--out-dir", help="write sigma_curve.csv here instead of stdout")
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("experiment", help="repeated runs over a grid")
    _common(p)
    p.add_argument("--epsilon", type=float, nargs="+")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, acc.PrivacyError) as err:
        if isinstance(err, acc.InfeasibleBudget):
            print(f"error: {err}", file=sys.stderr)
            return EXIT_BUDGET
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except acc.BudgetExhausted as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BUDGET
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
