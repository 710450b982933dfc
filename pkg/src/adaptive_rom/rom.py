"""Reduced-order steppers: PCA baseline and the adaptive Jacobian-basis ROM.

Every stepper advances one implicit step given an :class:`EnergyContext`
(previous state + Dirichlet data of the new step) and exposes ``realign`` so
the error protocol can reset it onto a reference trajectory.

Fixed DOFs: basis rows at fixed DOFs are zeroed and the prescribed values are
written into the base point, ``u = u_base + U q`` with
``u_base = apply_boundary(ctx, u_prev)`` (adaptive modes) or
``apply_boundary(ctx, mean)`` (PCA).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import energy as en
from . import neural
from .fom import default_tolerance, fom_step, line_search
from .geometry import SimState
from .subspace import (
    Basis,
    HistoryWindow,
    RankError,
    complete_basis,
    grassmann_interpolate,
    history_basis,
    numerical_span,
    thin_qr,
)

logger = logging.getLogger(__name__)

MODES = ("pca_baseline", "adaptive_plain", "adaptive_grassmann")


@dataclass
class RomConfig:
    r: int = 16
    m: int = 20
    lam: float = 0.2
    newton_max_iter: int = 20
    newton_tol: float | None = None
    regularization: float = 1e-8
    mode: str = "adaptive_grassmann"
    seed: int = 0
    jacobian_dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ROM mode {self.mode!r}")
        if self.r < 1 or self.m < 1 or not 0.0 <= self.lam <= 1.0 or not self.regularization > 0:
            raise ValueError("need r >= 1, m >= 1, lam in [0, 1], regularization > 0")
        if self.jacobian_dtype not in ("float32", "float64"):
            raise ValueError("jacobian_dtype must be float32 or float64")


@dataclass
class ReducedSolveStats:
    iterations: int = 0
    line_search_steps: int = 0
    projected_steps: int = 0
    tikhonov_bumps: int = 0
    converged: bool = False
    stalled: bool = False
    residual: float = math.inf
    condition_number: float = 1.0


class ReducedSolveError(RuntimeError):
    pass


def _cholesky_solve(H, rhs):
    try:
        return sla.cho_solve(sla.cho_factor(H), rhs)
    except (np.linalg.LinAlgError, ValueError):
        return None


def _reduced_newton_direction(ctx, u, Q, B, g, stats):
    """Solve H dy = -g with the exact reduced Hessian.

    Fallbacks when H is not positive definite: the element-wise PSD-projected
    Hessian, then Tikhonov bumps tau = 1e-8 tr(H)/r escalated x10 up to 5 times.
    """
    H = en.reduced_hessian(ctx, u, Q, project=False, B=B)
    dy = _cholesky_solve(H, -g)
    if dy is not None:
        return dy
    stats.projected_steps += 1
    H = en.reduced_hessian(ctx, u, Q, project=True, B=B)
    r = H.shape[0]
    tau = 1e-8 * max(np.trace(H), np.finfo(float).tiny) / r
    for attempt in range(6):
        dy = _cholesky_solve(H if attempt == 0 else H + tau * np.eye(r), -g)
        if dy is not None:
            return dy
        if attempt:
            tau *= 10.0
        stats.tikhonov_bumps += 1
    raise ReducedSolveError("reduced Hessian not positive definite after 5 Tikhonov escalations")


def rom_newton_solve(ctx, u_base, basis, *, tol=None, max_iter=20, u_start=None):
    """Minimize E(u_base + basis q) over q.

    The iteration runs in orthonormal coordinates of span(basis), so the
    iterates depend only on the span. Convergence: 2-norm of the projected
    gradient below ``tol``. Starts at q = 0 unless ``u_start`` is given, in
    which case its orthogonal projection onto the affine subspace is used.
    Returns ``(q, stats)`` with q in the coordinates of ``basis``.
    """
    tol = default_tolerance(ctx) if tol is None else tol
    if isinstance(basis, Basis) and basis.orthonormal:
        Q, R = basis.matrix, np.eye(basis.r)
    else:
        basis = np.asarray(basis.matrix if isinstance(basis, Basis) else basis)
        Q, R = thin_qr(basis)
        Q[~basis.any(axis=1)] = 0.0  # keep prescribed DOFs exact despite QR round-off
    stats = ReducedSolveStats()
    stats.condition_number = float(np.linalg.cond(R))
    u_pred = en.predictor(ctx)
    B = en.strain_basis(ctx, Q)
    E = lambda y: en.incremental_potential(ctx, u_base + Q @ y, u_pred)

    y = np.zeros(Q.shape[1])
    if u_start is not None:
        y_start = Q.T @ (u_start - u_base)
        if math.isfinite(E(y_start)):
            y = y_start
    e = E(y)
    if not math.isfinite(e):
        stats.stalled = True
        return sla.solve_triangular(R, y), stats

    for k in range(max_iter + 1):
        u = u_base + Q @ y
        g = en.reduced_gradient(ctx, u, Q, B, u_pred)
        stats.residual = float(np.linalg.norm(g))
        if stats.residual < tol:
            stats.converged = True
            break
        if k == max_iter:
            break
        dy = _reduced_newton_direction(ctx, u, Q, B, g, stats)
        stats.iterations += 1
        alpha, e_new, halvings = line_search(E, y, dy, e, float(g @ dy))
        stats.line_search_steps += halvings
        if alpha == 0.0:
            stats.stalled = True
            break
        y = y + alpha * dy
        e = e_new
    return sla.solve_triangular(R, y), stats


def _zero_fixed_rows(ctx, mat):
    mat = np.array(mat, dtype=float)
    mat[ctx.fixed_dofs] = 0.0
    return mat


def _free_part(ctx, a: np.ndarray) -> Basis:
    """Orthonormal basis of ``a`` with prescribed rows removed.

    Directions that only moved prescribed DOFs vanish here; the remaining
    dependent columns are dropped instead of making the solve singular.
    """
    U = _zero_fixed_rows(ctx, a)
    Q, R = np.linalg.qr(U)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-10 * d.max():
        Q = numerical_span(U)
    Q[ctx.fixed_dofs] = 0.0
    return Basis(Q, orthonormal=True)


def pca_step(ctx, basis: Basis, mean: np.ndarray, state: SimState | None = None, *, tol=None, max_iter=20):
    """Absolute-coordinate PCA ROM step ``u = mean + U q`` warm-started at the projection of ``u_prev``."""
    if state is not None:
        ctx = ctx.with_state(state)
    prev = ctx.prev_state
    U = _free_part(ctx, basis.matrix)
    u_base = en.apply_boundary(ctx, mean)
    q, stats = rom_newton_solve(ctx, u_base, U, tol=tol, max_iter=max_iter, u_start=prev.u)
    u = u_base + U.matrix @ q
    return SimState(u, (u - prev.u) / prev.time_step_h, prev.step + 1, prev.time_step_h), stats


@dataclass
class RomState:
    sim: SimState
    window: HistoryWindow
    last_basis: Basis | None = None
    flagged: bool = False
    stats: ReducedSolveStats | None = None


def _free_nodes(ctx):
    return np.flatnonzero(ctx.free_mask.reshape(-1, 3).any(axis=1))


def adaptive_basis(ctx, model: neural.CromModel, window: HistoryWindow, cfg: RomConfig, rng=None):
    """Orthonormal basis for the next step and whether the rank fallback was needed.

    Jacobian of the decoder at the encoded current state (rows only for nodes
    with free DOFs; the rest are zero); in Grassmann mode it is blended with
    the history basis. A history basis of rank k < r (short window, repeated
    states) is completed with directions of the Jacobian before interpolation.
    Returns ``(Basis, p, flagged)``.
    """
    u_prev = ctx.prev_state.u
    p = neural.encode(model, u_prev)
    nodes = _free_nodes(ctx)
    rows = (3 * nodes[:, None] + np.arange(3)).ravel()
    J = np.zeros((ctx.mesh.n_dofs, model.r))
    J[rows] = neural.latent_jacobian(model, p, ctx.mesh, cfg.jacobian_dtype, nodes=nodes)
    J = _zero_fixed_rows(ctx, J)
    flagged = False
    try:
        U = thin_qr(J)[0]
    except RankError:
        flagged = True
        rng = rng or np.random.default_rng(cfg.seed)
        U = complete_basis(numerical_span(J), J, cfg.r, rng)
        U = thin_qr(_zero_fixed_rows(ctx, U))[0]
    if cfg.mode == "adaptive_grassmann" and len(window) > 0:
        phi = _zero_fixed_rows(ctx, history_basis(window, cfg.regularization))
        q_phi = numerical_span(phi)
        if q_phi.shape[1] < cfg.r:
            q_phi = complete_basis(q_phi, U, cfg.r, rng or np.random.default_rng(cfg.seed))
        U = grassmann_interpolate(Basis(q_phi, True), Basis(U, True), cfg.lam).matrix
    # QR round-off leaves ~1e-17 entries on the zero rows; prescribed DOFs stay exact
    return Basis(_zero_fixed_rows(ctx, U), orthonormal=True), p, flagged


def adaptive_step(ctx, model, state: RomState, cfg: RomConfig, *, record: bool = True) -> RomState:
    """One step of the adaptive ROM (plain or Grassmann, per ``cfg.mode``)."""
    ctx = ctx.with_state(state.sim)
    prev = state.sim
    U, _, flagged = adaptive_basis(ctx, model, state.window, cfg)
    u_base = en.apply_boundary(ctx, prev.u)
    q, stats = rom_newton_solve(ctx, u_base, U, tol=cfg.newton_tol, max_iter=cfg.newton_max_iter)
    u = u_base + U.matrix @ q
    sim = SimState(u, (u - prev.u) / prev.time_step_h, prev.step + 1, prev.time_step_h)
    if record:
        state.window.push(neural.encode(model, u), u)
    return RomState(sim, state.window, U, flagged, stats)


# ----------------------------------------------------------------- steppers


class FomStepper:
    name = "fom"

    def __init__(self, tol=None, max_iter=50):
        self.tol, self.max_iter = tol, max_iter

    def step(self, ctx) -> SimState:
        return fom_step(ctx, tol=self.tol, max_iter=self.max_iter)

    def realign(self, state: SimState) -> None:
        pass


class PcaStepper:
    name = "pca_baseline"

    def __init__(self, basis: Basis, mean: np.ndarray, cfg: RomConfig | None = None):
        self.basis, self.mean = basis, mean
        self.cfg = cfg or RomConfig(mode="pca_baseline")
        self.last_stats = None

    def step(self, ctx) -> SimState:
        state, self.last_stats = pca_step(
            ctx, self.basis, self.mean, tol=self.cfg.newton_tol, max_iter=self.cfg.newton_max_iter
        )
        return state

    def realign(self, state: SimState) -> None:
        pass


class AdaptiveStepper:
    """Adaptive ROM with its own history window.

    In free rollouts the window records the ROM's own states; under
    ``realign`` it records the reference states instead.
    """

    def __init__(self, model: neural.CromModel, cfg: RomConfig):
        if cfg.mode == "pca_baseline":
            raise ValueError("AdaptiveStepper needs an adaptive mode")
        if cfg.r != model.r:
            raise ValueError(f"config r={cfg.r} does not match model r={model.r}")
        self.model, self.cfg = model, cfg
        self.name = cfg.mode
        self.window = HistoryWindow(cfg.m)
        self.realigned = False
        self.flagged_steps = 0
        self.last = None

    def step(self, ctx) -> SimState:
        rs = RomState(ctx.prev_state, self.window)
        self.last = adaptive_step(ctx, self.model, rs, self.cfg, record=not self.realigned)
        self.flagged_steps += int(self.last.flagged)
        return self.last.sim

    def realign(self, state: SimState) -> None:
        self.realigned = True
        self.window.push(neural.encode(self.model, state.u), state.u)


def make_stepper(cfg: RomConfig, *, model=None, pca=None):
    if cfg.mode == "pca_baseline":
        if pca is None:
            raise ValueError("pca_baseline needs (basis, mean)")
        basis, mean = pca
        if basis.r != cfg.r:
            basis = Basis(basis.matrix[:, : cfg.r], orthonormal=True)
        return PcaStepper(basis, mean, cfg)
    if model is None:
        raise ValueError(f"{cfg.mode} needs a trained model")
    return AdaptiveStepper(model, cfg)


def rollout(stepper, scenario, steps: int | None = None):
    """Free (non-realigned) rollout; returns ``(trajectory, timings_seconds)``."""
    state = scenario.initial_state()
    traj, timings = [state], []
    for t in range(1, (scenario.T if steps is None else steps) + 1):
        ctx = scenario.context(t, state)
        t0 = time.perf_counter()
        state = stepper.step(ctx)
        timings.append(time.perf_counter() - t0)
        traj.append(state)
    return traj, timings
