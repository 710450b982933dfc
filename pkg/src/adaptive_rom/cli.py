"""Command-line entry point: ``adaptive-rom <command> [--config c.toml] [--out dir]``.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

COMMANDS = ("mesh-gen", "fom-run", "gen-data", "train", "rom-run", "compare", "ablate", "bench")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

logger = logging.getLogger("adaptive_rom")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration (defaults when omitted)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: config value)")
    common.add_argument("--no-timing", action="store_true", help="leave wall-clock cells empty (byte-stable CSV)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adaptive-rom", description="Adaptive reduced-order deformable simulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("mesh-gen", parents=[common], help="write the configured mesh")
    sub.add_parser("fom-run", parents=[common], help="full-order rollouts of the evaluation scenarios")
    sub.add_parser("gen-data", parents=[common], help="full-order training corpus")
    p = sub.add_parser("train", parents=[common], help="train the autoencoder on the corpus")
    p.add_argument("--snapshots", type=Path, help="snapshot file (default: <out>/snapshots.snap)")
    for name in ("rom-run", "compare", "ablate", "bench"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--model", type=Path, help="model file (default: <out>/model.crom)")
        p.add_argument("--snapshots", type=Path, help="corpus for the PCA baseline (default: <out>/snapshots.snap)")
        if name == "compare":
            p.add_argument("--qualitative", action="store_true", help="also write free-rollout trajectories")
        if name == "ablate":
            p.add_argument("--axis", choices=("r", "m", "lambda"))
            p.add_argument("--values", type=float, nargs="+")
    return parser


def _set_threads(k: int | None) -> None:
    if k is not None:
        if k < 1:
            raise ValueError("--threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(k)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    # heavy imports after the thread count is fixed
    from . import commands
    from .config import ConfigError
    from .fom import SolverError
    from .neural import TrainingError
    from .rom import ReducedSolveError

    try:
        run = commands.load_run(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return commands.dispatch(args, run)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ReducedSolveError, TrainingError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
