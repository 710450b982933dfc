"""Full-order reference solver: Newton on the incremental potential."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import energy as en
from .geometry import SimState


class SolverError(RuntimeError):
    """Linear solve failed inside a Newton iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (newton iteration {iteration})")
        self.iteration = iteration


@dataclass
class NewtonStats:
    iterations: int = 0
    line_search_steps: int = 0
    converged: bool = False
    stalled: bool = False
    residual: float = math.inf


def default_tolerance(ctx: en.EnergyContext) -> float:
    return 1e-6 * ctx.material.youngs_modulus * ctx.h**2


def line_search(energy, x, direction, e0, slope, *, shrink=0.5, armijo=1e-4, max_halvings=30):
    """Backtracking on ``energy(x + a * direction)``.

    ``energy`` returns ``inf`` for infeasible points; those trial steps are
    halved first. The Armijo test allows a relative round-off slack of 1e-12. Returns ``(alpha, value, halvings)``; ``alpha == 0`` when no
    feasible non-increasing step was found.
    """
    alpha = 1.0
    fallback = (0.0, e0)
    # energy differences below this are round-off; without it the final Newton
    # step of a converged solve would be halved to nothing
    noise = 1e-12 * abs(e0)
    for k in range(max_halvings + 1):
        e = energy(x + alpha * direction)
        if math.isfinite(e):
            if e <= e0 + armijo * alpha * slope + noise:
                return alpha, e, k
            if e <= e0:
                fallback = (alpha, e)  # keeps the smallest non-increasing step
        alpha *= shrink
    return fallback[0], fallback[1], max_halvings


def newton_minimize(ctx: en.EnergyContext, u0: np.ndarray, *, tol=None, max_iter=50):
    """Minimize the incremental potential over all free DOFs starting at ``u0``."""
    tol = default_tolerance(ctx) if tol is None else tol
    u_pred = en.predictor(ctx)
    u = en.apply_boundary(ctx, u0)
    E = lambda x: en.incremental_potential(ctx, x, u_pred)
    e = E(u)
    stats = NewtonStats()
    for k in range(max_iter + 1):
        g = en.energy_gradient(ctx, u, u_pred)
        stats.residual = float(np.max(np.abs(g))) if g.size else 0.0
        if stats.residual < tol:
            stats.converged = True
            break
        if k == max_iter:
            break
        H = en.energy_hessian(ctx, u)
        try:
            du = spla.spsolve(H.tocsc(), -g)
        except RuntimeError as exc:
            raise SolverError(f"sparse solve failed: {exc}", k) from exc
        if not np.all(np.isfinite(du)):
            raise SolverError("singular Newton system", k)
        stats.iterations += 1
        alpha, e_new, halvings = line_search(E, u, du, e, float(g @ du))
        stats.line_search_steps += halvings
        if alpha == 0.0:
            stats.stalled = True
            break
        u = u + alpha * du
        e = e_new
    return u, stats


def fom_step(ctx: en.EnergyContext, state: SimState | None = None, *, tol=None, max_iter=50, return_stats=False):
    """One implicit step; ``ctx`` carries the Dirichlet data of the new step."""
    if state is not None:
        ctx = ctx.with_state(state)
    state = ctx.prev_state
    u_start = en.predictor(ctx)
    if math.isinf(en.barrier_energy(ctx, u_start)):
        u_start = en.apply_boundary(ctx, state.u)
    u, stats = newton_minimize(ctx, u_start, tol=tol, max_iter=max_iter)
    nxt = SimState(u, (u - state.u) / state.time_step_h, state.step + 1, state.time_step_h)
    return (nxt, stats) if return_stats else nxt


def run_scenario_fom(scenario, *, tol=None, max_iter=50):
    """Roll out the full-order model over ``scenario.T`` steps.

    Returns ``(trajectory, timings_seconds, stats)`` where the trajectory holds
    ``T + 1`` states including the initial one.
    """
    state = scenario.initial_state()
    traj = [state]
    timings, all_stats = [], []
    for t in range(1, scenario.T + 1):
        ctx = scenario.context(t, state)
        t0 = time.perf_counter()
        state, stats = fom_step(ctx, tol=tol, max_iter=max_iter, return_stats=True)
        timings.append(time.perf_counter() - t0)
        traj.append(state)
        all_stats.append(stats)
    return traj, timings, all_stats
