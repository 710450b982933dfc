"""Online error with per-step realignment, and per-step timing statistics."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fom import SolverError
from .subspace import RankError

logger = logging.getLogger(__name__)

# failures that end a rollout early instead of aborting a whole sweep
STEP_FAILURES = (SolverError, RankError, RuntimeError, ValueError, np.linalg.LinAlgError, FloatingPointError)


class UndefinedError(ValueError):
    """Relative error requested with a zero denominator."""


@dataclass
class ErrorAccumulator:
    numerator: float = 0.0
    denominator: float = 0.0
    steps: int = 0
    per_step: list = field(default_factory=list)
    failed_at: int | None = None
    failure: str | None = None

    def add(self, u_rom: np.ndarray, u_ref: np.ndarray) -> None:
        num = float(np.linalg.norm(u_rom - u_ref))
        den = float(np.linalg.norm(u_ref))
        self.numerator += num
        self.denominator += den
        self.steps += 1
        self.per_step.append((num, den))

    @property
    def failed(self) -> bool:
        return self.failed_at is not None


def relative_error(acc: ErrorAccumulator) -> float:
    """Total relative error in percent."""
    if acc.denominator <= 0.0:
        raise UndefinedError("relative error undefined: reference displacements are all zero")
    return 100.0 * acc.numerator / acc.denominator


def realigned_rollout(fom_traj, stepper, context_fn, *, timings: list | None = None) -> ErrorAccumulator:
    """Step ``stepper`` from each reference state and compare with the next one.

    ``context_fn(t, prev_state)`` builds the energy context of step ``t``.
    After each step the stepper is realigned onto the reference state (both u
    and v come from the reference via ``context_fn``; ``stepper.realign``
    lets windowed steppers record the reference pair). Wall time of each
    ``stepper.step`` call is appended to ``timings`` when given.
    """
    if len(fom_traj) < 2:
        raise ValueError("reference trajectory needs at least one step")
    acc = ErrorAccumulator()
    for t in range(1, len(fom_traj)):
        ctx = context_fn(t, fom_traj[t - 1])
        try:
            t0 = time.perf_counter()
            state = stepper.step(ctx)
            dt = time.perf_counter() - t0
            if not np.all(np.isfinite(state.u)):
                raise FloatingPointError("non-finite displacement")
        except STEP_FAILURES as exc:
            logger.warning("stepper %s failed at step %d: %s", getattr(stepper, "name", "?"), t, exc)
            acc.failed_at, acc.failure = t, f"{type(exc).__name__}: {exc}"
            break
        if timings is not None:
            timings.append(dt)
        acc.add(state.u, fom_traj[t].u)
        stepper.realign(fom_traj[t])
    return acc


@dataclass
class TimingStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    samples: int


def timing_stats(timings_s, warmup: int = 5) -> TimingStats:
    t = np.asarray(timings_s, dtype=float)[warmup:] * 1e3
    if t.size == 0:
        raise ValueError(f"need more than {warmup} timed steps, got {len(timings_s)}")
    return TimingStats(float(t.mean()), float(np.median(t)), float(np.percentile(t, 95)), int(t.size))


def time_steps(stepper, scenario, *, warmup: int = 5, fom_traj=None) -> tuple[TimingStats, list]:
    """Per-step wall time of ``stepper`` over ``scenario``.

    Free rollout by default; with ``fom_traj`` every step starts from the
    reference state instead. Only the step calls are timed.
    """
    if scenario.T <= warmup:
        raise ValueError(f"scenario has {scenario.T} steps, not more than the {warmup} warm-up steps")
    timings: list = []
    if fom_traj is None:
        state = scenario.initial_state()
        for t in range(1, scenario.T + 1):
            ctx = scenario.context(t, state)
            t0 = time.perf_counter()
            state = stepper.step(ctx)
            timings.append(time.perf_counter() - t0)
    else:
        acc = realigned_rollout(fom_traj, stepper, scenario.context, timings=timings)
        if acc.failed:
            raise RuntimeError(f"stepper failed at step {acc.failed_at}: {acc.failure}")
    return timing_stats(timings, warmup), timings


def write_error_csv(path, acc: ErrorAccumulator) -> None:
    num = den = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "err_num", "err_den", "cum_rel_err_pct"])
        for t, (a, b) in enumerate(acc.per_step, start=1):
            num += a
            den += b
            w.writerow([t, repr(a), repr(b), repr(100.0 * num / den) if den > 0 else "nan"])


def write_timing_csv(path, timings_s) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_ms"])
        for t, dt in enumerate(timings_s, start=1):
            w.writerow([t, f"{dt * 1e3:.6f}"])
