"""Command-line front end.

Subcommands:
  gen     write a synthetic embedding dataset
  train   run a scenario (ci / cdc / cdi) into a run directory
  eval    score a checkpoint against a dataset
  sweep   repeat train over several values of one hyperparameter
  report  print the trajectory table of a finished run

Config precedence: built-in defaults < JSON config file < --set overrides.
The fully resolved config is written to the run directory as config.json;
rerunning from that file reproduces the run. Exit codes: 0 success, 1 config
error, 2 data error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import dataclasses
import hashlib
import json
import os
import sys

from .errors import ConfigError, EmptyEvalError, EngineError, FormatError, NoDataError
from .evaluator import accuracy_counts, prototype_similarity_matrix
from .encoder import make_encoder
from .model import load_checkpoint
from .records import read_dataset, stream_from_records, write_dataset
from .scenarios import RunDirWriter, run_cdc, run_cdi, run_ci
from .synth import SynthConfig, gen_synthetic
from .trainer import TrainConfig

_DATA_ERRORS = (FileNotFoundError, IsADirectoryError, FormatError, NoDataError, EmptyEvalError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _defaults():
    return {
        "mode": "ci",
        "eval_mode": "I2C",
        "transfer": True,
        "synth": dataclasses.asdict(SynthConfig()),
        "train": dataclasses.asdict(TrainConfig()),
    }


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_set(config, expr):
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    path, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    keys = path.split(".")
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config section {key!r} in {expr!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = value


def resolve_config(config_path, overrides):
    config = _defaults()
    if config_path:
        with open(config_path) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        for key in loaded:
            if key not in config:
                raise ConfigError(f"unknown top-level config key {key!r}")
        config = _deep_merge(config, loaded)
    for expr in overrides or []:
        _apply_set(config, expr)
    return config


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _dataclass_from(cls, section, what):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")
    return cls(**section)


def _load_stream(path, mode, classes_per_task):
    records, tokens = read_dataset(path)
    return stream_from_records(records, tokens, mode, classes_per_task=classes_per_task)


def _cmd_gen(args):
    config = resolve_config(args.config, args.set)
    synth = _dataclass_from(SynthConfig, config["synth"], "synth")
    stream = gen_synthetic(synth, config["mode"])
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_dataset(stream.all_records(), stream.tokens, args.out)
    n = len(stream.all_records())
    print(f"wrote {n} records / {len(stream.tokens.tokens)} classes to {args.out}")
    return 0


def _cmd_train(args):
    config = resolve_config(args.config, args.set)
    cfg = _dataclass_from(TrainConfig, config["train"], "train")
    cpt = config["synth"]["classes_per_task"]
    scenario = args.scenario

    if scenario == "cdc":
        if len(args.data) != 2:
            raise ConfigError("cdc takes two --data paths: stream_A stream_B")
        stream_a = _load_stream(args.data[0], "ci", cpt)
        stream_b = _load_stream(args.data[1], "ci", cpt)
    else:
        if len(args.data) != 1:
            raise ConfigError(f"{scenario} takes exactly one --data path")
        stream = _load_stream(args.data[0], scenario, cpt)

    sink = RunDirWriter(args.out, config, config_hash(config))
    if scenario == "ci":
        report = run_ci(stream, cfg, sink=sink)
    elif scenario == "cdi":
        report = run_cdi(stream, cfg, sink=sink)
    else:
        report = run_cdc(
            stream_a,
            stream_b,
            cfg,
            eval_mode=config["eval_mode"],
            transfer=config["transfer"],
            sink=sink,
        )
    print(f"run complete: last accuracy {report.last_accuracy:.4f} -> {args.out}")
    if report.ft is not None:
        print(f"forward transfer: {report.ft:+.4f}")
    return 0


def _cmd_eval(args):
    config = resolve_config(args.config, args.set)
    cfg = _dataclass_from(TrainConfig, config["train"], "train")
    banks, enc_seed, ckpt_hash = load_checkpoint(args.checkpoint)
    enc = make_encoder(banks.d, banks.M, enc_seed)
    records, tokens = read_dataset(args.data)
    test = [r for r in records if r.split == "test"]
    if not test:
        raise NoDataError(f"no test records in {args.data}")
    counts = accuracy_counts(
        banks, enc, tokens, test,
        aggregation=cfg.aggregation, selection=cfg.selection, clamp_lambda=cfg.clamp_lambda,
    )
    os.makedirs(args.out, exist_ok=True)
    summary = {m: c / n for m, (c, n) in counts.items()}
    summary["n_test"] = len(test)
    summary["checkpoint_config_hash"] = ckpt_hash
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    sim = prototype_similarity_matrix(banks)
    with open(os.path.join(args.out, "prototype_similarity.csv"), "w") as fh:
        for row in sim:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    for mode in ("aggregated", "vision", "text"):
        print(f"{mode}: {summary[mode]:.4f}")
    return 0


def _sweep_one(payload):
    return _cmd_train(argparse.Namespace(**payload))


def _cmd_sweep(args):
    if args.param not in ("lambda_pp", "M"):
        raise ConfigError(f"sweep supports lambda_pp or M, got {args.param!r}")
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("sweep needs at least one value")
    jobs = []
    for raw in values:
        value = json.loads(raw)
        sub_out = os.path.join(args.out, f"{args.param}_{raw}")
        overrides = list(args.set or []) + [f"train.{args.param}={raw}"]
        jobs.append(
            dict(config=args.config, set=overrides, scenario=args.scenario, data=args.data, out=sub_out)
        )
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            list(pool.map(_sweep_one, jobs))
    else:
        for job in jobs:
            _sweep_one(job)
    print(f"sweep over {args.param} done: {len(jobs)} runs under {args.out}")
    return 0


def _cmd_report(args):
    path = os.path.join(args.run, "trajectory.csv")
    with open(path) as fh:
        lines = [line.strip().split(",") for line in fh if line.strip()]
    header, rows = lines[0], lines[1:]
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i]) for i in range(len(header))]
    def fmt(cells):
        return "  ".join(c.ljust(widths[i]) for i, c in enumerate(cells))
    print(fmt(header))
    for r in rows:
        cells = [f"{float(c):.4f}" if i >= 3 else c for i, c in enumerate(r)]
        print(fmt(cells))
    return 0


def build_parser():
    parser = _Parser(prog="protoprompt", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--set", action="append", help="override, e.g. --set synth.seed=3")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="run a scenario")
    p.add_argument("--scenario", required=True, choices=["ci", "cdc", "cdi"])
    p.add_argument("--data", required=True, nargs="+", help="dataset path(s); cdc takes two")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--set", action="append", help="override, e.g. --set train.epochs=5")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    p.add_argument("--param", required=True, help="lambda_pp or M")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--scenario", required=True, choices=["ci", "cdc", "cdi"])
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="parent directory for the sub-runs")
    p.add_argument("--set", action="append")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="print the trajectory table of a run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
