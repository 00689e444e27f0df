"""Command-line runner: ``fracpmp list | run | validate``.

Configuration files hold one ``key = value`` per line; ``#`` starts a comment.
Values resolve in the order global defaults, experiment defaults, file, flags.

Exit status: 0 PASS, 1 FAIL or runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, DivergenceError, FracPMPError, InvalidArgument
from .experiments import REGISTRY, ExperimentConfig, get_experiment, list_experiments, resolve, write_tables

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

ALIASES = {"hurst": "H", "grid_n": "n", "path_count": "paths", "output": "out"}
FIELD_TYPES = {"experiment": str, "H": float, "T": float, "n": int, "paths": int, "seed": int, "workers": int, "regime": str, "system": str, "out": str}
KEY_ORDER = ["experiment", "H", "T", "n", "paths", "seed", "workers", "regime", "system", "out"]


def _convert(key: str, raw: str, line: int, column: int):
    typ = FIELD_TYPES.get(key, float)  # tolerances are floats
    if typ is str:
        return raw
    try:
        return typ(raw)
    except ValueError:
        kind = "an integer" if typ is int else "a number"
        raise ConfigError(f"value {raw!r} for {key!r} is not {kind}", line, column) from None


def parse_config_text(text: str) -> tuple:
    """Parse config text into ``(values, tolerances)``.

    Unknown keys, missing ``=``, empty values and duplicates raise
    :class:`ConfigError` carrying the 1-based line and column.
    """
    values, tols, seen = {}, {}, {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        body = raw_line.split("#", 1)[0]
        if not body.strip():
            continue
        col0 = len(body) - len(body.lstrip()) + 1
        if "=" not in body:
            raise ConfigError("expected 'key = value'", lineno, col0)
        key_part, val_part = body.split("=", 1)
        key = key_part.strip()
        val = val_part.strip()
        val_col = len(key_part) + 2 + (len(val_part) - len(val_part.lstrip()))
        if not key:
            raise ConfigError("missing key before '='", lineno, col0)
        if not val:
            raise ConfigError(f"missing value for {key!r}", lineno, val_col)
        if key.startswith("tol."):
            name = key[4:]
            if not name:
                raise ConfigError("empty tolerance name", lineno, col0)
            target, store = name, tols
            val = _convert("tol", val, lineno, val_col)
        else:
            target = ALIASES.get(key, key)
            if target not in FIELD_TYPES:
                raise ConfigError(f"unknown key {key!r}; known keys: {', '.join(KEY_ORDER + sorted(ALIASES))}, tol.<name>", lineno, col0)
            store = values
            val = _convert(target, val, lineno, val_col)
        ident = ("tol", target) if store is tols else target
        if ident in seen:
            raise ConfigError(f"duplicate key {key!r} (first given on line {seen[ident]})", lineno, col0)
        seen[ident] = lineno
        store[target] = val
    return values, tols


def read_config(path) -> tuple:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


def format_config(cfg: ExperimentConfig) -> str:
    """Re-runnable ``key = value`` text for a resolved config."""
    lines = [f"{k} = {_value_text(getattr(cfg, k))}" for k in KEY_ORDER]
    lines += [f"tol.{k} = {_value_text(v)}" for k, v in sorted(cfg.tolerances.items())]
    return "\n".join(lines) + "\n"


def _value_text(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def build_config(args) -> ExperimentConfig:
    """Resolve a config from ``--config`` and flag overrides."""
    values, tols = ({}, {}) if args.config is None else read_config(args.config)
    flags = {"experiment": args.experiment, "out": args.out, "seed": args.seed, "paths": args.paths, "n": args.grid_n, "H": args.hurst, "workers": args.workers}
    values.update({k: v for k, v in flags.items() if v is not None})
    name = values.pop("experiment", None)
    if name is None:
        raise ConfigError("no experiment given (use --experiment or 'experiment = NAME')")
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; valid names: {', '.join(REGISTRY)}")
    try:
        return resolve(name, values, tols)
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None


def _versions() -> list:
    return [f"# fracpmp {__version__}", f"# numpy {np.__version__}", f"# scipy {scipy.__version__}", f"# python {platform.python_version()}"]


def write_manifest(cfg: ExperimentConfig, directory) -> str:
    fn = os.path.join(directory, "manifest.txt")
    with open(fn, "w") as fh:
        fh.write("# resolved configuration; rerun with: fracpmp run --config manifest.txt\n")
        fh.write("\n".join(_versions()) + "\n")
        fh.write(format_config(cfg))
    return fn


def run_experiment(cfg: ExperimentConfig, stream=None) -> int:
    """Run, write manifest, CSVs and verdict into ``cfg.out``; return the exit status."""
    stream = sys.stdout if stream is None else stream
    os.makedirs(cfg.out, exist_ok=True)
    write_manifest(cfg, cfg.out)
    verdict_fn = os.path.join(cfg.out, "verdict.txt")
    t0 = time.perf_counter()
    try:
        result = get_experiment(cfg.experiment).run(cfg)
    except (FracPMPError, FloatingPointError, np.linalg.LinAlgError, MemoryError) as exc:
        where = ""
        if isinstance(exc, DivergenceError):
            where = f" (path {exc.path}, step {exc.step})"
        msg = f"ERROR {cfg.experiment}: {type(exc).__name__}: {exc}{where}"
        with open(verdict_fn, "w") as fh:
            fh.write(msg + "\n")
        print(msg, file=stream)
        return EXIT_FAIL
    elapsed = time.perf_counter() - t0
    write_tables(result, cfg.out)
    status = "PASS" if result.passed else "FAIL"
    lines = [f"{status} {cfg.experiment}"] + [c.line() for c in result.checks] + [f"# elapsed_s {elapsed:.1f}"]
    with open(verdict_fn, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines), file=stream)
    return EXIT_PASS if result.passed else EXIT_FAIL


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracpmp", description="Maximum-principle experiments for fBm-driven control systems.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list registered experiments")
    for name, helptext in (("run", "run an experiment"), ("validate", "print the resolved configuration")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--experiment", help="experiment name (see 'fracpmp list')")
        s.add_argument("--config", help="key = value configuration file")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--paths", type=int)
        s.add_argument("--grid-n", type=int, dest="grid_n")
        s.add_argument("--hurst", type=float)
        s.add_argument("--workers", type=int)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name, desc in list_experiments():
            print(f"{name:22s} {desc}")
        return EXIT_PASS
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        sys.stdout.write(format_config(cfg))
        return EXIT_PASS
    return run_experiment(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
