"""Command-line pipeline driver.

Subcommands: run, cell, homogenize, macro, reconstruct, compare-fem,
gradcheck, oracle, quadcheck. Exit codes: 0 ok, 2 config error,
3 training failure, 4 reference-solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_REFSOLVER = 4


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tenshom",
                                 description="tensor-network homogenization pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None, help="cap worker threads")
        p.add_argument("--deterministic", action="store_true",
                       help="deterministic reductions and zeroed wall-clock fields")
        p.add_argument("--out", default=None,
                       help="output directory (or env TENSHOM_OUT; config fallback)")

    for name, doc in (
        ("run", "full pipeline: cell -> homogenize -> macro -> reconstruct -> compare"),
        ("cell", "run through corrector training only"),
        ("homogenize", "run through homogenized-coefficient extraction"),
        ("macro", "run through the macro solve"),
        ("reconstruct", "run through reconstruction and profile export"),
        ("compare-fem", "run through the FEM comparison and error tables"),
    ):
        p = sub.add_parser(name, help=doc)
        add_common(p)

    g = sub.add_parser("gradcheck", help="finite-difference check of both loss gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--models", type=int, default=50)
    g.add_argument("--probes", type=int, default=20)

    o = sub.add_parser("oracle", help="analytic vs quadrature homogenized coefficient")
    o.add_argument("--problem", default="ex_1D")

    sub.add_parser("quadcheck", help="quadrature exactness and weight-sum identities")
    return ap


def _apply_thread_cap(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        for c in cfg.cell:
            c.seed = args.seed
        if cfg.macro is not None:
            cfg.macro.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    out = args.out or os.environ.get("TENSHOM_OUT")
    if out:
        cfg.out_dir = out
    if args.threads is not None:
        cfg.threads = args.threads
    _apply_thread_cap(cfg.threads if cfg.threads else (1 if cfg.deterministic else None))
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "quadcheck":
        from .checks import quadcheck

        rep = quadcheck()
        print(f"degree-31 monomial deviation: {rep.monomial_dev:.3e}")
        print(f"weight-sum deviation:         {rep.weight_sum_dev:.3e}")
        print(f"node symmetry deviation:      {rep.symmetry_dev:.3e}")
        ok = rep.monomial_dev <= 1e-14 and rep.weight_sum_dev <= 1e-13
        print("quadcheck:", "ok" if ok else "FAILED")
        return EXIT_OK if ok else 1

    if args.command == "gradcheck":
        from .checks import gradcheck

        worst = gradcheck(seed=args.seed, n_models=args.models, n_probe=args.probes)
        print(f"max relative gradient deviation: {worst:.3e}")
        ok = worst <= 1e-5
        print("gradcheck:", "ok" if ok else "FAILED")
        return EXIT_OK if ok else 1

    if args.command == "oracle":
        from .checks import oracle_check
        from .errors import ConfigError

        try:
            rep = oracle_check(args.problem)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"problem {rep.problem}: max |quadrature - analytic| = {rep.max_dev:.3e}")
        ok = rep.max_dev <= 1e-12
        print("oracle:", "ok" if ok else "FAILED")
        return EXIT_OK if ok else 1

    from .errors import ConfigError, RefSolveError, TrainingError

    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from . import pipeline as pl

    try:
        state = pl.make_state(cfg)
        pl.stage_homogenize(state)
        if args.command in ("cell", "homogenize"):
            pl.emit_report(state)
            print(json.dumps(state.summary["stages"], indent=2, default=float))
            return EXIT_OK
        pl.stage_macro(state)
        if args.command == "macro":
            pl.emit_report(state)
            return EXIT_OK
        pl.stage_reconstruct(state)
        if args.command == "reconstruct":
            pl.emit_report(state)
            return EXIT_OK
        pl.stage_compare(state)
        pl.emit_report(state)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except RefSolveError as exc:
        print(f"reference solver failure: {exc}", file=sys.stderr)
        return EXIT_REFSOLVER

    with open(os.path.join(cfg.out_dir, "report.txt")) as fh:
        print(fh.read(), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
