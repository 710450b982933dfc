"""Incremental potential of one backward-Euler step and its derivatives.

E(u) = 1/(2 h^2) (u - u_pred)^T M (u - u_pred) + elastic(u) + barrier(u)

with a stable Neo-Hookean elastic density, a lumped mass matrix and an
IPC-style log barrier against a horizontal floor. The vertical axis is y.
Fixed (Dirichlet) DOFs are handled by identity-row substitution: callers pass
``u`` with prescribed values already written in, gradients vanish there and
the Hessian carries identity rows/columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import SimState, TetMesh

VERTICAL = 1

_EPS = np.zeros((3, 3, 3))
_EPS[0, 1, 2] = _EPS[1, 2, 0] = _EPS[2, 0, 1] = 1.0
_EPS[0, 2, 1] = _EPS[2, 1, 0] = _EPS[1, 0, 2] = -1.0


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 1e5
    poissons_ratio: float = 0.45
    density: float = 1000.0

    def __post_init__(self):
        if not 0.0 < self.poissons_ratio < 0.5:
            raise ValueError("poissons_ratio must lie in (0, 0.5)")
        if not (self.youngs_modulus > 0 and self.density > 0):
            raise ValueError("youngs_modulus and density must be positive")

    @property
    def lame_mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poissons_ratio))

    @property
    def lame_lambda(self) -> float:
        nu = self.poissons_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


class _MeshOperators:
    """Per-mesh constants shared by every energy evaluation."""

    def __init__(self, mesh: TetMesh):
        B = mesh.rest_inverse
        # dF/dx_a = e_i (x) C[a] : row a of C maps node a to F's columns
        self.C = np.concatenate([-B.sum(axis=1, keepdims=True), B], axis=1)  # (m, 4, 3)
        self.dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        self.rows = np.repeat(self.dofs, 12, axis=1).ravel()
        self.cols = np.tile(self.dofs, (1, 12)).ravel()
        # D[e, (a, i), (i, j)] = C[e, a, j]: maps dP/dF (9x9) to node space (12x12)
        D = np.einsum("ik,eaj->eaikj", np.eye(3), self.C).reshape(-1, 12, 9)
        self.D = D * np.sqrt(mesh.rest_volume)[:, None, None]
        lumped = np.zeros(mesh.n)
        np.add.at(lumped, mesh.tets.ravel(), np.repeat(mesh.rest_volume / 4.0, 4))
        self.node_volume = lumped


@dataclass(frozen=True)
class EnergyContext:
    """Everything needed to evaluate one step's incremental potential.

    ``fixed_dofs``/``fixed_values`` hold the Dirichlet data for the step being
    solved (prescribed displacement at the end of the step).
    """

    mesh: TetMesh
    material: Material
    mass: np.ndarray
    gravity: np.ndarray
    prev_state: SimState
    floor_height: float | None = None
    barrier_stiffness: float = 0.0
    barrier_distance: float = 0.0
    fixed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    elastic: bool = True
    ops: _MeshOperators | None = None

    @classmethod
    def create(
        cls,
        mesh: TetMesh,
        material: Material | None = None,
        *,
        h: float = 0.01,
        gravity=(0.0, -9.8, 0.0),
        floor_height: float | None = None,
        barrier_stiffness: float | None = None,
        barrier_distance: float | None = None,
        boundary_conditions: dict | None = None,
        prev_state: SimState | None = None,
        elastic: bool = True,
    ) -> "EnergyContext":
        material = material or Material()
        ops = _MeshOperators(mesh)
        mass = np.repeat(material.density * ops.node_volume, 3)
        if floor_height is not None:
            if barrier_distance is None:
                barrier_distance = 1e-3 * mesh.bbox_diagonal()
            if barrier_stiffness is None:
                barrier_stiffness = 1e3 * material.youngs_modulus * barrier_distance
            if not barrier_distance > 0:
                raise ValueError("barrier_distance must be positive when a floor is set")
        ctx = cls(
            mesh=mesh,
            material=material,
            mass=mass,
            gravity=np.asarray(gravity, dtype=float),
            prev_state=prev_state or SimState.rest(mesh, h),
            floor_height=floor_height,
            barrier_stiffness=float(barrier_stiffness or 0.0),
            barrier_distance=float(barrier_distance or 0.0),
            elastic=elastic,
            ops=ops,
        )
        return ctx.with_boundary(boundary_conditions or {})

    @property
    def h(self) -> float:
        return self.prev_state.time_step_h

    def with_state(self, state: SimState) -> "EnergyContext":
        return replace(self, prev_state=state)

    def with_boundary(self, boundary_conditions: dict) -> "EnergyContext":
        """Return a copy whose Dirichlet set is ``{node: displacement}``."""
        nodes = np.array(sorted(boundary_conditions), dtype=np.int64)
        if nodes.size:
            values = np.array([boundary_conditions[i] for i in nodes.tolist()], dtype=float).reshape(-1, 3)
        else:
            values = np.zeros((0, 3))
        dofs = (3 * nodes[:, None] + np.arange(3)).ravel()
        return replace(self, fixed_dofs=dofs, fixed_values=values.ravel())

    @cached_property
    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.mesh.n_dofs, dtype=bool)
        mask[self.fixed_dofs] = False
        return mask


def apply_boundary(ctx: EnergyContext, u: np.ndarray) -> np.ndarray:
    """Copy of ``u`` with the prescribed values written into fixed DOFs."""
    u = np.array(u, dtype=float)
    u[ctx.fixed_dofs] = ctx.fixed_values
    return u


def predictor(ctx: EnergyContext) -> np.ndarray:
    """Backward-Euler predictor u_prev + h v_prev + h^2 M^-1 f_gravity."""
    s = ctx.prev_state
    h = s.time_step_h
    g = np.tile(ctx.gravity, ctx.mesh.n)  # M^-1 (M g) for lumped M
    return apply_boundary(ctx, s.u + h * s.v + h * h * g)


# ---------------------------------------------------------------- elasticity


def deformation_gradients(ctx: EnergyContext, u: np.ndarray) -> np.ndarray:
    mesh = ctx.mesh
    x = mesh.nodes + u.reshape(-1, 3)
    xe = x[mesh.tets]
    Ds = np.stack([xe[:, 1] - xe[:, 0], xe[:, 2] - xe[:, 0], xe[:, 3] - xe[:, 0]], axis=2)
    return Ds @ mesh.rest_inverse


def _cofactor(F):
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=-1)


def neo_hookean_density(F: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Stable Neo-Hookean energy density, finite for inverted F."""
    J = np.linalg.det(F)
    return 0.5 * mu * (np.sum(F * F, axis=(-2, -1)) - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2


def neo_hookean_stress(F, mu, lam):
    """First Piola-Kirchhoff stress dPsi/dF."""
    J = np.linalg.det(F)[..., None, None]
    return mu * F + (lam * (J - 1.0) - mu) * _cofactor(F)


# d2J/dF_ij dF_kl = eps_ikm eps_jln F_mn, as a (mn) -> (ijkl) linear map
_HESS_J_MAP = np.einsum("ikm,jln->mnijkl", _EPS, _EPS).reshape(9, 81)
_DIAG9 = np.arange(9)


def neo_hookean_stress_derivative(F, mu, lam):
    """dP/dF as a (..., 3, 3, 3, 3) tensor A[i, j, k, l] = d2Psi / dF_ij dF_kl."""
    F = np.asarray(F)
    lead = F.shape[:-2]
    J = np.linalg.det(F).reshape(-1, 1, 1)
    cof = _cofactor(F).reshape(-1, 9)
    hess_J = (F.reshape(-1, 9) @ _HESS_J_MAP).reshape(-1, 9, 9)
    A = lam * cof[:, :, None] * cof[:, None, :] + (lam * (J - 1.0) - mu) * hess_J
    A[:, _DIAG9, _DIAG9] += mu
    return A.reshape(*lead, 3, 3, 3, 3)


def elastic_energy(ctx: EnergyContext, u: np.ndarray) -> float:
    if not ctx.elastic:
        return 0.0
    m = ctx.material
    psi = neo_hookean_density(deformation_gradients(ctx, u), m.lame_mu, m.lame_lambda)
    return float(np.dot(ctx.mesh.rest_volume, psi))


def elastic_gradient(ctx: EnergyContext, u: np.ndarray) -> np.ndarray:
    grad = np.zeros(ctx.mesh.n_dofs)
    if not ctx.elastic:
        return grad
    m = ctx.material
    P = neo_hookean_stress(deformation_gradients(ctx, u), m.lame_mu, m.lame_lambda)
    ge = np.einsum("eij,eaj->eai", P, ctx.ops.C) * ctx.mesh.rest_volume[:, None, None]
    np.add.at(grad, ctx.ops.dofs.ravel(), ge.ravel())
    return grad


_PAIRS = [(1, 2), (2, 0), (0, 1)]
_SCALE_IDX = np.array([0, 4, 8])
_PAIR_ROW = np.array([3 * i + j for i, j in _PAIRS])
_PAIR_COL = np.array([3 * j + i for i, j in _PAIRS])


def _clamp_2x2(a, b, d):
    """PSD part of symmetric [[a, b], [b, d]] blocks, elementwise over arrays."""
    mean = 0.5 * (a + d)
    rad = np.sqrt(0.25 * (a - d) ** 2 + b * b)
    hi, lo = mean + rad, mean - rad
    safe = np.where(rad > 0, 2.0 * rad, 1.0)
    # spectral projectors (B - lo I) / (hi - lo) and (hi I - B) / (hi - lo)
    wp, wm = np.maximum(hi, 0.0) / safe, np.maximum(lo, 0.0) / safe
    ca = wp * (a - lo) + wm * (hi - a)
    cb = (wp - wm) * b
    cd = wp * (d - lo) + wm * (hi - d)
    flat = rad == 0
    iso = np.maximum(mean, 0.0)
    return np.where(flat, iso, ca), np.where(flat, 0.0, cb), np.where(flat, iso, cd)


def project_stress_derivative(F: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Clamp the isotropic 9x9 dP/dF to its PSD part.

    In the frame kron(U, V) of the SVD F = U S V^T the tensor splits into a 3x3
    scaling block and three 2x2 twist/flip blocks, so only tiny eigenproblems
    are solved.
    """
    U, _, Vt = np.linalg.svd(F)
    Q = np.einsum("eia,ejb->eijab", U, Vt.transpose(0, 2, 1)).reshape(-1, 9, 9)
    B = Q.transpose(0, 2, 1) @ A @ Q
    Bp = np.zeros_like(B)

    blk = B[:, _SCALE_IDX[:, None], _SCALE_IDX]
    w, V = np.linalg.eigh(blk)
    Bp[:, _SCALE_IDX[:, None], _SCALE_IDX] = (V * np.maximum(w, 0.0)[:, None, :]) @ V.transpose(0, 2, 1)

    a, b, d = _clamp_2x2(B[:, _PAIR_ROW, _PAIR_ROW], B[:, _PAIR_ROW, _PAIR_COL], B[:, _PAIR_COL, _PAIR_COL])
    Bp[:, _PAIR_ROW, _PAIR_ROW] = a
    Bp[:, _PAIR_ROW, _PAIR_COL] = b
    Bp[:, _PAIR_COL, _PAIR_ROW] = b
    Bp[:, _PAIR_COL, _PAIR_COL] = d
    return Q @ Bp @ Q.transpose(0, 2, 1)


def element_hessians(ctx: EnergyContext, u: np.ndarray, project: bool = True) -> np.ndarray:
    """Per-element 12x12 elastic Hessians vol * D^T (dP/dF) D.

    With ``project`` the material tensor dP/dF is made PSD first; D has full
    column rank, so the element blocks are then PSD as well.
    """
    m = ctx.material
    F = deformation_gradients(ctx, u)
    A = neo_hookean_stress_derivative(F, m.lame_mu, m.lame_lambda).reshape(-1, 9, 9)
    if project:
        A = project_stress_derivative(F, A)
    D = ctx.ops.D
    K = D @ A @ D.transpose(0, 2, 1)
    return 0.5 * (K + K.transpose(0, 2, 1))


# ------------------------------------------------------------------- barrier


def _gaps(ctx, u):
    y = ctx.mesh.nodes[:, VERTICAL] + u[VERTICAL::3]
    return y - ctx.floor_height


def barrier_energy(ctx: EnergyContext, u: np.ndarray) -> float:
    """Floor log barrier; ``math.inf`` marks an infeasible (penetrating) state."""
    if ctx.floor_height is None:
        return 0.0
    d = _gaps(ctx, u)
    if (d <= 0).any():
        return math.inf
    dh = ctx.barrier_distance
    a = d[d < dh]
    return float(-ctx.barrier_stiffness * np.sum((a - dh) ** 2 * np.log(a / dh)))


def _barrier_derivatives(ctx, u):
    """Per-node first and second derivatives of the barrier w.r.t. the gap."""
    d = _gaps(ctx, u)
    dh, k = ctx.barrier_distance, ctx.barrier_stiffness
    active = (d < dh) & (d > 0)
    g1 = np.zeros_like(d)
    g2 = np.zeros_like(d)
    a = d[active]
    g1[active] = -k * (2.0 * (a - dh) * np.log(a / dh) + (a - dh) ** 2 / a)
    g2[active] = -k * (2.0 * np.log(a / dh) + 4.0 * (a - dh) / a - (a - dh) ** 2 / a**2)
    return g1, g2


# ------------------------------------------------------------------ totals


def inertia_energy(ctx: EnergyContext, u: np.ndarray, u_pred: np.ndarray | None = None) -> float:
    if u_pred is None:
        u_pred = predictor(ctx)
    du = u - u_pred
    return float(0.5 * np.dot(du * ctx.mass, du) / ctx.h**2)


def incremental_potential(ctx: EnergyContext, u: np.ndarray, u_pred: np.ndarray | None = None) -> float:
    barrier = barrier_energy(ctx, u)
    if math.isinf(barrier):
        return math.inf
    return inertia_energy(ctx, u, u_pred) + elastic_energy(ctx, u) + barrier


def energy_gradient(ctx: EnergyContext, u: np.ndarray, u_pred: np.ndarray | None = None) -> np.ndarray:
    if u_pred is None:
        u_pred = predictor(ctx)
    grad = ctx.mass * (u - u_pred) / ctx.h**2 + elastic_gradient(ctx, u)
    if ctx.floor_height is not None:
        grad[VERTICAL::3] += _barrier_derivatives(ctx, u)[0]
    grad[ctx.fixed_dofs] = 0.0
    return grad


def _diagonal_terms(ctx, u):
    diag = ctx.mass / ctx.h**2
    if ctx.floor_height is not None:
        diag = diag.copy()
        diag[VERTICAL::3] += _barrier_derivatives(ctx, u)[1]
    return diag


def energy_hessian(ctx: EnergyContext, u: np.ndarray, project: bool = True) -> sp.csr_matrix:
    """Sparse Hessian; the elastic part is PSD-projected per element unless ``project=False``."""
    N = ctx.mesh.n_dofs
    diag = _diagonal_terms(ctx, u)
    rows, cols = ctx.ops.rows, ctx.ops.cols
    if ctx.elastic:
        data = element_hessians(ctx, u, project).ravel()
        keep = ctx.free_mask[rows] & ctx.free_mask[cols]
        rows, cols, data = rows[keep], cols[keep], data[keep]
    else:
        rows = cols = data = np.zeros(0)
    diag = np.where(ctx.free_mask, diag, 1.0)
    idx = np.arange(N)
    H = sp.coo_matrix(
        (np.concatenate([data, diag]), (np.concatenate([rows, idx]), np.concatenate([cols, idx]))),
        shape=(N, N),
    )
    return H.tocsr()


def strain_basis(ctx: EnergyContext, basis: np.ndarray) -> np.ndarray:
    """Per-element maps (m, 9, r) from reduced coordinates to sqrt(vol)-weighted dF."""
    Ue = basis[ctx.ops.dofs]  # (m, 12, r)
    return ctx.ops.D.transpose(0, 2, 1) @ Ue


def reduced_gradient(ctx: EnergyContext, u, basis, B=None, u_pred=None) -> np.ndarray:
    """``basis^T grad E`` without forming the full elastic gradient."""
    if u_pred is None:
        u_pred = predictor(ctx)
    g = ctx.mass * (u - u_pred) / ctx.h**2
    if ctx.floor_height is not None:
        g[VERTICAL::3] += _barrier_derivatives(ctx, u)[0]
    g[ctx.fixed_dofs] = 0.0
    gr = basis.T @ g
    if ctx.elastic:
        B = strain_basis(ctx, basis) if B is None else B
        m = ctx.material
        P = neo_hookean_stress(deformation_gradients(ctx, u), m.lame_mu, m.lame_lambda)
        w = (np.sqrt(ctx.mesh.rest_volume)[:, None] * P.reshape(-1, 9)).ravel()
        gr += w @ B.reshape(-1, B.shape[-1])
    return gr


def reduced_hessian(ctx: EnergyContext, u: np.ndarray, basis: np.ndarray, project: bool = True, B=None) -> np.ndarray:
    """``basis^T H basis`` accumulated element by element, no global assembly.

    ``basis`` must have zero rows at fixed DOFs (then it equals the product
    with :func:`energy_hessian`). ``B`` is :func:`strain_basis` of ``basis``
    when precomputed.
    """
    diag = _diagonal_terms(ctx, u)
    Hr = basis.T @ (diag[:, None] * basis)
    if ctx.elastic:
        B = strain_basis(ctx, basis) if B is None else B
        m = ctx.material
        F = deformation_gradients(ctx, u)
        A = neo_hookean_stress_derivative(F, m.lame_mu, m.lame_lambda).reshape(-1, 9, 9)
        if project:
            A = project_stress_derivative(F, A)
        r = B.shape[-1]
        Hr += B.reshape(-1, r).T @ (A @ B).reshape(-1, r)
    return 0.5 * (Hr + Hr.T)
