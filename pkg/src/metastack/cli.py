"""Command-line front end.

Exit codes: 0 success, 1 validation failure, 2 configuration or input error,
3 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .architectures import InfeasibleAmplitudeError, WiredTopology, mfsim_response, mfsim_synthesize
from .config import ConfigError, default_config, load_config, validate_config

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
STUDIES = {"capacity": "attenuation_ratio", "ber": "tx_power_dbm"}


class InputError(ValueError):
    pass


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metastack", description="Stacked metasurface simulation experiments.")
    p.add_argument("--version", action="version", version=f"metastack {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", type=Path, required=config_required, help="TOML experiment file")
        sp.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        sp.add_argument("--seed", type=_u64, default=None, help="replace seeds.master_seed")
        sp.add_argument("--workers", type=_positive, default=1, help="worker processes (results do not depend on it)")

    run = sub.add_parser("run", help="run the experiment described by a config file")
    common(run, True)

    sweep = sub.add_parser("sweep", help="run a built-in study with its default settings")
    sweep.add_argument("study", choices=sorted(STUDIES))
    common(sweep, False)
    sweep.add_argument("--realizations", type=_positive, default=None,
                       help="override the realization count (quick looks)")

    syn = sub.add_parser("synthesize", help="MF-SIM phases realising per-atom target gains")
    syn.add_argument("targets", type=Path,
                     help="text file, one complex gain per line ('re im' or a Python complex literal)")
    syn.add_argument("--out", type=Path, default=Path("results"))

    val = sub.add_parser("validate", help="run the built-in invariant suite")
    val.add_argument("--only", nargs="+", default=None, metavar="CHECK", help="subset of checks to run")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _execute(cfg, args) -> int:
    from .experiments import run_experiment, write_result
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    t = time.perf_counter()
    result = run_experiment(cfg, workers=args.workers)
    csv_path, meta_path = write_result(result, cfg, args.out, seed_override=args.seed)
    print(f"wrote {csv_path} and {meta_path} ({time.perf_counter() - t:.1f} s)")
    return EXIT_OK


def cmd_run(args) -> int:
    return _execute(load_config(args.config), args)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config) if args.config else default_config(STUDIES[args.study])
    if cfg.sweep.parameter != STUDIES[args.study]:
        raise ConfigError("sweep.parameter", f"config describes a {cfg.sweep.parameter} sweep, "
                                             f"not the {args.study} study")
    if args.realizations:
        cfg = cfg.with_realizations(args.realizations)
        validate_config(cfg)
    return _execute(cfg, args)


def read_targets(path: Path) -> np.ndarray:
    """Parse one complex gain per line; blank lines and ``#`` comments are skipped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    vals = []
    for n, line in enumerate(lines, 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.replace(",", " ").split()
        try:
            v = complex(float(parts[0]), float(parts[1])) if len(parts) == 2 else complex(s.replace(" ", ""))
        except ValueError:
            raise InputError(f"{path}:{n}: cannot parse {s!r} as a complex gain") from None
        if not np.isfinite(v):
            raise InputError(f"{path}:{n}: gain must be finite")
        vals.append(v)
    if not vals:
        raise InputError(f"{path}: no target gains found")
    return np.array(vals)


def cmd_synthesize(args) -> int:
    t = read_targets(args.targets)
    try:
        theta, phi = mfsim_synthesize(t)
    except InfeasibleAmplitudeError as exc:
        print(f"error: infeasible amplitude (|t| > 1) at indices {exc.indices}", file=sys.stderr)
        return EXIT_CONFIG
    resid = float(np.abs(mfsim_response(theta, phi, WiredTopology.adjacent(t.size), 0.0) - t).max())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mfsim_phases.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "theta_a", "theta_b", "phi"])
        th = theta.phases.reshape(-1, 2)
        for i in range(t.size):
            w.writerow([i, repr(float(th[i, 0])), repr(float(th[i, 1])), repr(float(phi.phases[i]))])
    print(f"wrote {path}")
    print(f"round-trip max residual: {resid:.3e}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validate import CHECKS, run_checks
    names = args.only
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise InputError(f"unknown checks {unknown}; available: {list(CHECKS)}")
    results = run_checks(names)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}  [{r.seconds:.1f} s]")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_VALIDATION
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "synthesize": cmd_synthesize, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
