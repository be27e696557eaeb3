"""Command line entry point: ``ttbsde run|reference|diagnose-variance|inspect``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .diagnostics import VarianceSetup, variance_sweep
from .solver import LossKind

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_REFERENCE = 0, 2, 3, 4


def _threads(args) -> int:
    env = os.environ.get("TTBSDE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ex.ConfigError(f"TTBSDE_THREADS must be an integer, got {env!r}") from None
    return max(1, args.threads)


def _apply_overrides(cfg: ex.ExperimentConfig, args) -> ex.ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "runs", None) is not None:
        if args.runs < 1:
            raise ex.ConfigError("--runs must be positive")
        cfg = replace(cfg, runs=args.runs)
    if getattr(args, "loss", None):
        cfg = replace(cfg, losses=[LossKind.parse(k) for k in args.loss])
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(ex.load_config(args.config), args)
    out = Path(args.out or cfg.output)
    try:
        reference = ex.resolve_reference(cfg)
    except ex.ReferenceOracleError as exc:
        print(f"reference oracle failed: {exc}", file=sys.stderr)
        return EXIT_REFERENCE
    result = ex.run_experiment(cfg, _threads(args), out / "solutions" if args.save_solutions else None,
                               reference=reference, resolve=False)
    ex.emit_report(result, out, with_times=args.with_times)
    sys.stdout.write((out / "report.md").read_text())
    for f in result.failures:
        print(f"run failed: {f.kind.value} run {f.index} (seed {f.seed}): {f.error}", file=sys.stderr)
    return EXIT_RUN if result.failures else EXIT_OK


def cmd_reference(args) -> int:
    target = args.problem
    try:
        cfg = ex.load_config(target)
        block = cfg.problem
    except ex.ConfigError:
        block = {"id": target}
        if args.d is not None:
            block["d"] = args.d
        try:
            ex.build_problem(block)
        except (ex.ConfigError, KeyError, ValueError) as exc:
            print(f"unknown problem {target!r}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    seed = 12345 if args.seed is None else args.seed
    try:
        ref = ex.compute_reference(block, args.samples, seed)
    except ex.ReferenceOracleError as exc:
        print(f"reference oracle failed: {exc}", file=sys.stderr)
        return EXIT_REFERENCE
    if ref is None:
        print(f"no reference oracle for problem {block['id']!r}", file=sys.stderr)
        return EXIT_REFERENCE
    out = {"problem": block, "reference": ref}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _variance_setup(doc: dict, seed: int | None) -> VarianceSetup:
    known = set(VarianceSetup.__dataclass_fields__)
    params = {k: v for k, v in doc.get("setup", {}).items() if k in known}
    unknown = set(doc.get("setup", {})) - known
    if unknown:
        raise ex.ConfigError(f"unknown variance setup keys {sorted(unknown)}")
    if seed is not None:
        params["seed"] = seed
    return VarianceSetup(**params)


def cmd_diagnose(args) -> int:
    path = Path(args.config)
    try:
        doc = json.loads(path.read_text()) if path.exists() else {}
        if not path.exists() and args.config != "default":
            raise ex.ConfigError(f"config {args.config!r} not found (use 'default' for built-in settings)")
        setup = _variance_setup(doc, args.seed)
        rows = variance_sweep(setup, tuple(doc.get("dts", (0.1, 0.01, 0.001))))
    except (json.JSONDecodeError, ex.ConfigError, KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["dt", "loss_kind", "mean", "variance", "residual_variance", "oracle"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "variance.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_inspect(args) -> int:
    d = Path(args.solution_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read solution directory {d}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"problem: {manifest['problem']}  kind: {manifest['kind']}  seed: {manifest['seed']}")
    print(f"grid: N={manifest['grid']['N']} T={manifest['grid']['T']}  config: {manifest['config_hash']}")
    print("step  ranks        sweeps  outer  final_loss    c_g")
    for s in manifest["steps"]:
        print(f"{s['n']:>4}  {str(tuple(s['ranks'])):<12} {s['sweeps']:>6}  {s['outer_iterations']:>5}"
              f"  {s['final_loss']:.4e}  {s['c_extra']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttbsde", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="base seed")
        sp.add_argument("--out", default=None, help="output location")
        sp.add_argument("--threads", type=int, default=1, help="concurrent runs (TTBSDE_THREADS overrides)")

    run = sub.add_parser("run", help="run an experiment config or preset")
    run.add_argument("config")
    common(run)
    run.add_argument("--runs", type=int, default=None)
    run.add_argument("--loss", action="append", default=None,
                     help="restrict to a loss kind (repeatable)")
    run.add_argument("--with-times", action="store_true", help="write wall times into the CSV")
    run.add_argument("--save-solutions", action="store_true")
    run.set_defaults(func=cmd_run)

    ref = sub.add_parser("reference", help="compute a reference value")
    ref.add_argument("problem", help="preset/config name or problem id")
    common(ref)
    ref.add_argument("--samples", type=int, default=None, help="Monte Carlo sample count")
    ref.add_argument("--d", type=int, default=None, help="dimension when a bare problem id is given")
    ref.set_defaults(func=cmd_reference)

    var = sub.add_parser("diagnose-variance", help="loss residual statistics at the exact solution")
    var.add_argument("config")
    common(var)
    var.set_defaults(func=cmd_diagnose)

    ins = sub.add_parser("inspect", help="summarize a saved solution directory")
    ins.add_argument("solution_dir")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.ReferenceOracleError as exc:
        print(f"reference oracle failed: {exc}", file=sys.stderr)
        return EXIT_REFERENCE


if __name__ == "__main__":
    sys.exit(main())
