"""Best-case PCA error on the evaluation scenarios for a given training corpus.

Projects each FOM state of the evaluation scenarios orthogonally onto the
corpus PCA subspace (free DOFs only) and reports the accumulated relative
projection error. No ROM solve can beat this number with that basis, so it
shows whether a corpus leaves room for an adaptive basis to win.

    python3 scripts/pca_bounds.py --snapshots out/desk/snapshots.snap [--r 16]
"""

import argparse
from pathlib import Path

import numpy as np

from adaptive_rom.config import RunConfig, load_config
from adaptive_rom.fom import run_scenario_fom
from adaptive_rom.scenarios import Scenario
from adaptive_rom.storage import load_snapshots
from adaptive_rom.subspace import pca_basis, thin_qr


def projection_error(scenario, basis, mean) -> float:
    traj, _, _ = run_scenario_fom(scenario)
    num = den = 0.0
    for t in range(1, len(traj)):
        free = scenario.context(t, traj[t - 1]).free_mask
        Q = thin_qr(basis.matrix * free[:, None])[0]
        x = (traj[t].u - mean) * free
        num += np.linalg.norm(x - Q @ (Q.T @ x))
        den += np.linalg.norm(traj[t].u)
    return 100.0 * num / den


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--snapshots", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--r", type=int, default=16)
    args = ap.parse_args(argv)
    run = load_config(args.config) if args.config else RunConfig()
    snaps = load_snapshots(args.snapshots)
    basis, mean = pca_basis(snaps.columns, args.r)
    print(f"corpus: {snaps.count} snapshots, r={args.r}")
    for cfg in run.scenarios:
        print(f"{cfg.name:>14s}  projection bound {projection_error(Scenario(cfg), basis, mean):.4f} %")


if __name__ == "__main__":
    main()
