"""Full desk-scale pipeline: corpus, training, comparison table and timing bench.

    python3 scripts/run_desk.py --out out/desk [--config configs/desk.toml] [--no-timing]

Steps whose outputs already exist in ``--out`` are skipped (delete them to rerun).
"""

import argparse
import sys
import time
from pathlib import Path

from adaptive_rom import cli

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.toml")
    ap.add_argument("--out", type=Path, default=Path("out/desk"))
    ap.add_argument("--no-timing", action="store_true")
    ap.add_argument("--skip-bench", action="store_true")
    args = ap.parse_args(argv)

    common = ["--config", str(args.config), "--out", str(args.out)] + (["--no-timing"] if args.no_timing else [])
    plan = [("gen-data", "snapshots.snap"), ("train", "model.crom"), ("compare", None)]
    if not args.skip_bench:
        plan.append(("bench", None))
    for cmd, product in plan:
        if product and (args.out / product).exists():
            print(f"[skip] {cmd}: {args.out / product} exists")
            continue
        t0 = time.perf_counter()
        code = cli.main([cmd, *common])
        print(f"[{cmd}] exit {code} in {time.perf_counter() - t0:.1f} s")
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
