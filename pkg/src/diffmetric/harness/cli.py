"""``diffmetric`` command line: ``run``, ``diagnose`` and ``gen-data``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DiffmetricError
from .config import SyntheticSpec, parse_config, tomllib
from .data import generate_synthetic, write_dataset
from .experiment import (
    build_model,
    emit_outputs,
    output_plan,
    point_diagnostics,
    resolve_dataset,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out) if args.out else cfg.base_dir / cfg.output.dir
    if args.dry_run:
        dataset = resolve_dataset(cfg)
        model = build_model(cfg, dataset)
        print(f"config ok: {model.architecture} model, N={model.n_samples}, d={model.dim}")
        for spec in cfg.dynamics:
            seeds = f" seeds={cfg.seeds}" if spec.method == "sgd" else ""
            print(f"  {spec.method}: eta={spec.eta} steps={spec.steps}{seeds}")
        print("would write:")
        for f in output_plan(cfg, out):
            print(f"  {f}")
        return EXIT_OK
    result = run_experiment(cfg)
    written = emit_outputs(result, out)
    print(f"wrote {len(written)} files to {out}")
    for pair in result.report["pairs"]:
        print(f"  {pair['a']} vs {pair['b']}: sup={pair['sup']:.3e} l2={pair['l2']:.3e}")
    return EXIT_OK


def _load_weights(path) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read weights {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(data, dict):
        data = data.get("x")
    try:
        x = np.array(data, dtype=float)
    except (TypeError, ValueError):
        x = None
    if x is None or x.ndim != 1:
        raise ConfigError(f"{path}: expected a JSON array of weights or an object with key 'x'")
    return x


def _cmd_diagnose(args) -> int:
    cfg = parse_config(args.config)
    model = build_model(cfg, resolve_dataset(cfg))
    x = _load_weights(args.at)
    if x.shape != (model.dim,):
        raise ConfigError(f"{args.at}: expected {model.dim} weights, got {x.size}")
    diag, D = point_diagnostics(model, x, cfg)
    print(json.dumps({"D": D.tolist(), **diag}, indent=2))
    return EXIT_OK


def parse_generator_spec(spec: str) -> SyntheticSpec:
    """A TOML file with generator keys, or an inline ``kind=linear,n=8,m=2`` list."""
    from pydantic import ValidationError

    path = Path(spec)
    if path.is_file():
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        data = data.get("synthetic", data)
    else:
        data = {}
        for item in filter(None, spec.split(",")):
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"generator spec item {item!r} is not key=value (and {spec!r} is not a file)")
            data[key.strip()] = val.strip()
    try:
        return SyntheticSpec.model_validate(data)
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid generator spec: {msgs}") from None


def _cmd_gen_data(args) -> int:
    spec = parse_generator_spec(args.spec)
    path = write_dataset(generate_synthetic(spec, args.seed), args.out)
    print(f"wrote {spec.n} samples ({spec.kind}, m={spec.m}) to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffmetric", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every configured (method, seed) pair and write the report")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: output.dir from the config)")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("diagnose", help="print D, lambda_max, epsilon, rank and geometry diagnostics at a point")
    p.add_argument("config")
    p.add_argument("--at", required=True, metavar="WEIGHTS_JSON")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    p.add_argument("spec", help="generator TOML file or inline key=value list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DiffmetricError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
