"""Command-line entry point: ``covad run <config.toml>`` or ``covad <kind> [options]``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import List, Optional

from .errors import InvalidArgument
from .experiments import KINDS, ExperimentConfig, config_from_dict, load_config, run_experiment, tomllib


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trials", type=int, help="trials per grid point")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--workers", type=int, help="worker processes")


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covad", description="Covariance-based activity detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a TOML file")
    run.add_argument("config", help="path to the experiment TOML file")
    _add_overrides(run)

    for kind in KINDS:
        p = sub.add_parser(kind.replace("_", "-"), help=f"run a {kind} experiment from flags")
        p.add_argument("--config", help="start from this TOML file instead of the defaults")
        p.add_argument("--l", type=_int_list, help="comma-separated slot lengths")
        p.add_argument("--ktot", type=int)
        p.add_argument("--ka", type=_int_list, help="comma-separated active-user counts")
        p.add_argument("--m", type=_int_list, help="comma-separated antenna counts")
        p.add_argument("--snr-db", type=_float_list, help="low,high per-user snr range in dB")
        p.add_argument("--ebn0-db", type=_float_list, help="comma-separated Eb/N0 values in dB")
        p.add_argument("--algorithms", type=lambda s: [a for a in s.split(",") if a])
        _add_overrides(p)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    top = {}
    for name, attr in (("trials", "trials"), ("seed", "master_seed"), ("out", "output"), ("workers", "workers")):
        val = getattr(args, name, None)
        if val is not None:
            top[attr] = val
    model = {}
    for name, attr in (("l", "l"), ("ktot", "ktot"), ("ka", "ka"), ("m", "m"), ("snr_db", "snr_db"), ("ebn0_db", "ebn0_db")):
        val = getattr(args, name, None)
        if val is not None:
            model[attr] = val
    cfg = replace(cfg, **top)
    if model:
        cfg = replace(cfg, model=replace(cfg.model, **model))
    algos = getattr(args, "algorithms", None)
    if algos:
        cfg = replace(cfg, algorithms=[a.lower() for a in algos])
    return cfg.validate()


def _read_config(path) -> ExperimentConfig:
    try:
        return load_config(path)
    except OSError as exc:
        raise InvalidArgument(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InvalidArgument(f"{path}: {exc}") from exc


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _read_config(args.config)
        else:
            kind = args.command.replace("-", "_")
            cfg = _read_config(args.config) if args.config else config_from_dict({"kind": kind})
            if cfg.kind != kind:
                raise InvalidArgument(f"config kind {cfg.kind!r} does not match subcommand {kind!r}")
        cfg = _apply_overrides(cfg, args)
        summary = run_experiment(cfg, progress=lambda msg: print(msg, file=sys.stderr))
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot write results: {exc}", file=sys.stderr)
        return 1
    print(summary.text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
