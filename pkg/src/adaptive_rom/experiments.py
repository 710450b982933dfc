"""Training-data generation, comparison tables, ablation sweeps and benchmarks."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, neural
from .fom import SolverError, fom_step, run_scenario_fom
from .metrics import (
    STEP_FAILURES,
    realigned_rollout,
    relative_error,
    time_steps,
    timing_stats,
    write_error_csv,
)
from .rom import FomStepper, RomConfig, make_stepper, rollout
from .scenarios import Scenario
from .storage import SnapshotSet, save_snapshots
from .subspace import pca_basis

logger = logging.getLogger(__name__)

COMPARE_COLUMNS = ["object", "scenario", "mode", "r", "m", "lambda", "err_pct", "ms_per_step"]


def generate_data(scenarios, out=None, *, every: int = 1):
    """Run the full-order model on each scenario and collect every ``every``-th state.

    Returns ``(SnapshotSet, failures)``; a failing scenario contributes the
    states before the failure and an entry in ``failures``.
    """
    if every < 1:
        raise ValueError("snapshot stride must be >= 1")
    snaps, failures = None, []
    for cfg in scenarios:
        sc = Scenario(cfg)
        if snaps is None:
            snaps = SnapshotSet.empty(sc.mesh.n)
        state = sc.initial_state()
        cols, prov = [state.u], [(cfg.name, 0)]
        for t in range(1, sc.T + 1):
            try:
                state = fom_step(sc.context(t, state))
            except SolverError as exc:
                failures.append({"scenario": cfg.name, "step": t, "error": str(exc)})
                logger.warning("scenario %s failed at step %d: %s", cfg.name, t, exc)
                break
            if t % every == 0:
                cols.append(state.u)
                prov.append((cfg.name, t))
        snaps = snaps.extend(SnapshotSet(sc.mesh.n, np.column_stack(cols), prov))
    if snaps is None:
        snaps = SnapshotSet.empty(0)
    if out is not None:
        save_snapshots(out, snaps)
    return snaps, failures


class PcaCache:
    """PCA bases of one corpus, computed once per r."""

    def __init__(self, snapshots: np.ndarray):
        self.snapshots = snapshots
        self._bases: dict = {}

    def __call__(self, r: int):
        if r not in self._bases:
            self._bases[r] = pca_basis(self.snapshots, r)
        return self._bases[r]


def _fmt(x, spec):
    return "" if x is None else format(x, spec)


def _cell_name(scenario: str, cfg: RomConfig) -> str:
    return f"{scenario}_{cfg.mode}_r{cfg.r}_m{cfg.m}_l{cfg.lam:g}"


def evaluate_cell(scenario, fom_traj, cfg: RomConfig, *, model=None, pca=None, warmup=5):
    """Realigned error and step timing of one ROM configuration."""
    try:
        stepper = make_stepper(cfg, model=model, pca=pca(cfg.r) if pca is not None and cfg.mode == "pca_baseline" else None)
    except STEP_FAILURES as exc:
        return None, [], f"{type(exc).__name__}: {exc}"
    timings: list = []
    acc = realigned_rollout(fom_traj, stepper, scenario.context, timings=timings)
    return acc, timings, acc.failure


def compare_row(object_name, scenario_name, cfg, acc, timings, failure, warmup=5, report_timing=True):
    err = None if acc is None or acc.failed or acc.denominator <= 0 else relative_error(acc)
    ms = None
    if report_timing and timings:
        ms = timing_stats(timings, min(warmup, len(timings) - 1)).mean_ms
    return {
        "object": object_name,
        "scenario": scenario_name,
        "mode": cfg.mode,
        "r": str(cfg.r),
        "m": "" if cfg.mode != "adaptive_grassmann" else str(cfg.m),
        "lambda": "" if cfg.mode != "adaptive_grassmann" else format(cfg.lam, "g"),
        "err_pct": f"failed@{acc.failed_at if acc is not None and acc.failed else 0}" if err is None else _fmt(err, ".10g"),
        "ms_per_step": _fmt(ms, ".3f"),
        "failure": failure,
    }


def run_compare(
    scenario: Scenario,
    rom_cfgs,
    model,
    out=None,
    *,
    pca: PcaCache | None = None,
    object_name: str = "bar",
    fom_traj=None,
    warmup: int = 5,
    report_timing: bool = True,
    qualitative: bool = False,
):
    """Realigned error and mean step time per configuration on one scenario.

    Returns ``(rows, fom_traj)``; per-cell error CSVs go to ``out`` when given.
    """
    if fom_traj is None:
        fom_traj, fom_timings, _ = run_scenario_fom(scenario)
    rows = []
    for cfg in rom_cfgs:
        acc, timings, failure = evaluate_cell(scenario, fom_traj, cfg, model=model, pca=pca, warmup=warmup)
        rows.append(compare_row(object_name, scenario.name, cfg, acc, timings, failure, warmup, report_timing))
        if out is not None and acc is not None:
            write_error_csv(Path(out) / f"err_{_cell_name(scenario.name, cfg)}.csv", acc)
        if qualitative and out is not None:
            pca_pair = pca(cfg.r) if pca is not None and cfg.mode == "pca_baseline" else None
            try:
                traj, _ = rollout(make_stepper(cfg, model=model, pca=pca_pair), scenario)
                cols = np.column_stack([s.u for s in traj])
                save_snapshots(Path(out) / f"traj_{_cell_name(scenario.name, cfg)}.snap", SnapshotSet(scenario.mesh.n, cols, [(scenario.name, t) for t in range(len(traj))]))
            except STEP_FAILURES as exc:
                logger.warning("free rollout of %s failed: %s", cfg.mode, exc)
    return rows, fom_traj


def run_ablation(axis, values, base_cfg: RomConfig, scenario, models, out=None, *, pca=None, fom_traj=None, object_name="bar", report_timing=True):
    """Sweep one of r, m, lambda; ``models`` is a model or a dict keyed by r."""
    if axis not in ("r", "m", "lambda"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    if not values:
        raise ValueError("ablation needs at least one value")
    if fom_traj is None:
        fom_traj, _, _ = run_scenario_fom(scenario)
    field = {"r": "r", "m": "m", "lambda": "lam"}[axis]
    rows = []
    for v in values:
        cfg = dataclasses.replace(base_cfg, **{field: int(v) if axis != "lambda" else float(v)})
        model = models.get(cfg.r) if isinstance(models, dict) else models
        if model is None and cfg.mode != "pca_baseline":
            acc, timings, failure = None, [], f"no model for r={cfg.r}"
        else:
            acc, timings, failure = evaluate_cell(scenario, fom_traj, cfg, model=model, pca=pca)
        row = compare_row(object_name, scenario.name, cfg, acc, timings, failure, report_timing=report_timing)
        row["axis"], row["value"] = axis, format(v, "g")
        rows.append(row)
        if out is not None and acc is not None:
            write_error_csv(Path(out) / f"err_{_cell_name(scenario.name, cfg)}.csv", acc)
    return rows, fom_traj


def bench(scenario: Scenario, steppers: dict, *, warmup: int = 5):
    """Free-rollout step timing per stepper; ratio columns relative to ``pca_baseline``."""
    rows = []
    for name, stepper in steppers.items():
        try:
            stats, _ = time_steps(stepper, scenario, warmup=warmup)
        except STEP_FAILURES as exc:
            logger.warning("bench %s failed: %s", name, exc)
            stats = None
        rows.append({"scenario": scenario.name, "stepper": name, "stats": stats})
    ref = next((r["stats"] for r in rows if r["stepper"] == "pca_baseline" and r["stats"]), None)
    out = []
    for r in rows:
        s = r["stats"]
        out.append({
            "scenario": r["scenario"],
            "stepper": r["stepper"],
            "mean_ms": _fmt(s and s.mean_ms, ".3f"),
            "median_ms": _fmt(s and s.median_ms, ".3f"),
            "p95_ms": _fmt(s and s.p95_ms, ".3f"),
            "ratio_vs_pca": _fmt(s and ref and s.mean_ms / ref.mean_ms, ".3f"),
        })  # fmt: skip
    return out


def fom_stepper() -> FomStepper:
    return FomStepper()


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def format_table(rows, columns) -> str:
    widths = [max(len(c), *(len(str(r.get(c, ""))) for r in rows)) if rows else len(c) for c in columns]
    line = lambda vals: "  ".join(str(v).rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(columns), line(["-" * w for w in widths])] + [line([r.get(c, "") for c in columns]) for r in rows]) + "\n"


def versions() -> dict:
    return {
        "adaptive_rom": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out_dir, command: str, run, *, outputs=(), failures=(), extra=None) -> Path:
    manifest = {
        "command": command,
        "seed": run.seed,
        "threads": run.threads,
        "config": run.raw,
        "versions": versions(),
        "outputs": sorted(str(o) for o in outputs),
        "failures": list(failures),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def train_model(snapshots: SnapshotSet, mesh, run):
    """Build and train a model for ``run.model`` / ``run.train``."""
    model = neural.CromModel.create(
        mesh,
        run.model.r,
        snapshots=snapshots.columns,
        encoder_hidden=tuple(run.model.encoder_hidden),
        decoder_hidden=tuple(run.model.decoder_hidden),
        seed=run.seed,
    )
    t0 = time.perf_counter()
    model, history = neural.train(model, snapshots.columns, mesh, run.train)
    logger.info("trained r=%d in %.1f s, final loss %.4e", run.model.r, time.perf_counter() - t0, history[-1])
    return model, history
