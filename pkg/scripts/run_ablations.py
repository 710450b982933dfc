"""Ablation sweeps over r, m and lambda on the evaluation scenarios.

    python3 scripts/run_ablations.py --out out/desk [--axes m lambda] [--no-timing]

Expects ``snapshots.snap`` and ``model.crom`` in ``--out`` (see run_desk.py);
the r sweep trains one extra model per value that is missing.
"""

import argparse
import sys
from pathlib import Path

from adaptive_rom import cli

ROOT = Path(__file__).resolve().parent.parent
VALUES = {
    "r": [4, 8, 16, 24],
    "m": [1, 5, 10, 20, 40],
    "lambda": [0.0, 0.1, 0.2, 0.3, 0.5, 1.0],
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.toml")
    ap.add_argument("--out", type=Path, default=Path("out/desk"))
    ap.add_argument("--axes", nargs="+", choices=sorted(VALUES), default=["m", "lambda"])
    ap.add_argument("--no-timing", action="store_true")
    args = ap.parse_args(argv)
    for axis in args.axes:
        argv_ = ["ablate", "--config", str(args.config), "--out", str(args.out), "--axis", axis, "--values"]
        argv_ += [str(v) for v in VALUES[axis]]
        if args.no_timing:
            argv_.append("--no-timing")
        code = cli.main(argv_)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
