"""Implementations of the CLI subcommands; each writes into ``args.out``."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import neural
from .config import ConfigError, RunConfig, load_config
from .fom import run_scenario_fom
from .geometry import save_mesh
from .metrics import write_timing_csv
from .rom import make_stepper, rollout
from .scenarios import Scenario
from .storage import SnapshotSet, load_snapshots, save_snapshots

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["scenario", "stepper", "mean_ms", "median_ms", "p95_ms", "ratio_vs_pca"]


def load_run(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        run = run.with_seed(args.seed)
    else:
        run = run.with_seed(run.seed)
    if args.threads is not None:
        run.threads = args.threads
    return run


def dispatch(args, run: RunConfig) -> int:
    handler = {
        "mesh-gen": cmd_mesh_gen,
        "fom-run": cmd_fom_run,
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "rom-run": cmd_rom_run,
        "compare": cmd_compare,
        "ablate": cmd_ablate,
        "bench": cmd_bench,
    }[args.command]
    return handler(args, run)


def _traj_set(name, traj) -> SnapshotSet:
    n = traj[0].u.size // 3
    return SnapshotSet(n, np.column_stack([s.u for s in traj]), [(name, t) for t in range(len(traj))])


def _snapshots(args) -> SnapshotSet:
    path = args.snapshots or args.out / "snapshots.snap"
    if not Path(path).exists():
        raise FileNotFoundError(f"snapshot file {path} not found (run gen-data first)")
    return load_snapshots(path)


def _model(args, r=None):
    path = args.model or args.out / ("model.crom" if r is None else f"model_r{r}.crom")
    if not Path(path).exists():
        raise FileNotFoundError(f"model file {path} not found (run train first)")
    return neural.load_model(path)


def _timing_cells(args, rows, keys):
    if args.no_timing:
        for row in rows:
            for k in keys:
                row[k] = ""
    return rows


def cmd_mesh_gen(args, run) -> int:
    mesh = run.scenarios[0].build_mesh()
    path = args.out / "mesh.txt"
    save_mesh(mesh, path)
    ex.write_manifest(args.out, "mesh-gen", run, outputs=[path], extra={"nodes": mesh.n, "tets": mesh.n_tets})
    return 0


def cmd_fom_run(args, run) -> int:
    outputs = []
    for cfg in run.scenarios:
        sc = Scenario(cfg)
        traj, timings, stats = run_scenario_fom(sc)
        path = args.out / f"fom_{sc.name}.snap"
        save_snapshots(path, _traj_set(sc.name, traj))
        with open(args.out / f"fom_{sc.name}_newton.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "iterations", "line_search_steps", "converged", "residual"])
            for t, s in enumerate(stats, start=1):
                w.writerow([t, s.iterations, s.line_search_steps, int(s.converged), repr(s.residual)])
        outputs += [path, args.out / f"fom_{sc.name}_newton.csv"]
        if not args.no_timing:
            write_timing_csv(args.out / f"fom_{sc.name}_timing.csv", timings)
            outputs.append(args.out / f"fom_{sc.name}_timing.csv")
    ex.write_manifest(args.out, "fom-run", run, outputs=outputs)
    return 0


def cmd_gen_data(args, run) -> int:
    path = args.out / "snapshots.snap"
    snaps, failures = ex.generate_data(run.data.scenarios, path, every=run.data.every)
    ex.write_manifest(args.out, "gen-data", run, outputs=[path], failures=failures, extra={"count": snaps.count, "n": snaps.n})
    print(f"wrote {snaps.count} snapshots of {snaps.n} nodes to {path}")
    return 3 if failures else 0


def cmd_train(args, run) -> int:
    snaps = _snapshots(args)
    mesh = run.data.scenarios[0].build_mesh() if run.data.scenarios else run.scenarios[0].build_mesh()
    model, history = ex.train_model(snaps, mesh, run)
    path = args.out / "model.crom"
    neural.save_model(model, path)
    lrs = run.train.schedule()
    with open(args.out / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss"])
        for e, (lr, loss) in enumerate(zip(lrs, history)):
            w.writerow([e, repr(float(lr)), repr(float(loss))])
    ex.write_manifest(args.out, "train", run, outputs=[path, args.out / "train_loss.csv"], extra={"final_loss": history[-1]})
    print(f"trained r={model.r} model, final loss {history[-1]:.4e} -> {path}")
    return 0


def _rom_inputs(args, run, cfg):
    if cfg.mode == "pca_baseline":
        return None, ex.PcaCache(_snapshots(args).columns)
    return _model(args), None


def cmd_rom_run(args, run) -> int:
    cfg = run.rom
    model, pca = _rom_inputs(args, run, cfg)
    outputs = []
    for scfg in run.scenarios:
        sc = Scenario(scfg)
        stepper = make_stepper(cfg, model=model, pca=pca(cfg.r) if pca else None)
        traj, timings = rollout(stepper, sc)
        path = args.out / f"rom_{sc.name}_{cfg.mode}.snap"
        save_snapshots(path, _traj_set(sc.name, traj))
        outputs.append(path)
        if not args.no_timing:
            write_timing_csv(args.out / f"rom_{sc.name}_{cfg.mode}_timing.csv", timings)
    ex.write_manifest(args.out, "rom-run", run, outputs=outputs)
    return 0


def _compare_cfgs(run):
    return [run.rom_variant(mode=m) for m in run.compare.modes]


def cmd_compare(args, run) -> int:
    cfgs = _compare_cfgs(run)
    needs_model = any(c.mode != "pca_baseline" for c in cfgs)
    model = _model(args) if needs_model else None
    pca = ex.PcaCache(_snapshots(args).columns) if any(c.mode == "pca_baseline" for c in cfgs) else None
    rows = []
    for scfg in run.scenarios:
        r, _ = ex.run_compare(
            Scenario(scfg), cfgs, model, args.out, pca=pca, object_name=run.object,
            warmup=run.bench.warmup, report_timing=not args.no_timing, qualitative=args.qualitative,
        )  # fmt: skip
        rows += r
    _timing_cells(args, rows, ["ms_per_step"])
    ex.write_rows(args.out / "compare.csv", rows, ex.COMPARE_COLUMNS)
    table = ex.format_table(rows, ex.COMPARE_COLUMNS)
    (args.out / "compare.txt").write_text(table)
    print(table, end="")
    failures = [{"scenario": r["scenario"], "mode": r["mode"], "error": r["failure"]} for r in rows if r["failure"]]
    ex.write_manifest(args.out, "compare", run, outputs=[args.out / "compare.csv"], failures=failures)
    return 0


def cmd_ablate(args, run) -> int:
    axis = args.axis or run.ablation.axis
    values = args.values or list(run.ablation.values)
    base = run.rom if run.rom.mode != "pca_baseline" else run.rom_variant(mode="adaptive_grassmann")
    if axis == "r":
        models = {}
        for v in values:
            r = int(v)
            path = args.out / f"model_r{r}.crom"
            if path.exists():
                models[r] = neural.load_model(path)
            else:
                snaps = _snapshots(args)
                mesh = run.scenarios[0].build_mesh()
                sub = dataclasses.replace(run, model=dataclasses.replace(run.model, r=r))
                models[r], _ = ex.train_model(snaps, mesh, sub)
                neural.save_model(models[r], path)
    else:
        models = _model(args)
    pca = ex.PcaCache(_snapshots(args).columns) if base.mode == "pca_baseline" else None
    rows = []
    for scfg in run.scenarios:
        r, _ = ex.run_ablation(axis, values, base, Scenario(scfg), models, args.out, pca=pca, object_name=run.object, report_timing=not args.no_timing)
        rows += r
    _timing_cells(args, rows, ["ms_per_step"])
    cols = ["object", "scenario", "axis", "value", "mode", "r", "m", "lambda", "err_pct", "ms_per_step"]
    ex.write_rows(args.out / f"ablation_{axis}.csv", rows, cols)
    # table shape: one row per scenario, one column per value
    with open(args.out / f"ablation_{axis}_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, *[format(v, "g") for v in values]])
        for scfg in run.scenarios:
            w.writerow([scfg.name, *[r["err_pct"] for r in rows if r["scenario"] == scfg.name]])
    print(ex.format_table(rows, cols), end="")
    failures = [{"scenario": r["scenario"], "value": r["value"], "error": r["failure"]} for r in rows if r["failure"]]
    ex.write_manifest(args.out, "ablate", run, outputs=[args.out / f"ablation_{axis}.csv"], failures=failures)
    return 0


def cmd_bench(args, run) -> int:
    model = _model(args)
    pca = ex.PcaCache(_snapshots(args).columns)
    rows = []
    for scfg in run.scenarios:
        sc = Scenario(scfg)
        steppers = {"fom": ex.fom_stepper(), "pca_baseline": make_stepper(run.rom_variant(mode="pca_baseline"), pca=pca(run.rom.r))}
        for mode in ("adaptive_plain", "adaptive_grassmann"):
            steppers[mode] = make_stepper(run.rom_variant(mode=mode), model=model)
        rows += ex.bench(sc, steppers, warmup=run.bench.warmup)
    _timing_cells(args, rows, ["mean_ms", "median_ms", "p95_ms", "ratio_vs_pca"])
    ex.write_rows(args.out / "bench.csv", rows, BENCH_COLUMNS)
    print(ex.format_table(rows, BENCH_COLUMNS), end="")
    ex.write_manifest(args.out, "bench", run, outputs=[args.out / "bench.csv"])
    return 0
