import numpy as np
import pytest

from adaptive_rom import energy as en
from adaptive_rom import neural, rom
from adaptive_rom.fom import fom_step
from adaptive_rom.geometry import SimState
from adaptive_rom.rom import (
    AdaptiveStepper,
    ReducedSolveError,
    RomConfig,
    RomState,
    adaptive_basis,
    adaptive_step,
    make_stepper,
    pca_step,
    rollout,
    rom_newton_solve,
)
from adaptive_rom.subspace import Basis, HistoryWindow, pca_basis, principal_angles

from .conftest import make_context, random_state, small_scenario, toy_model


def test_config_validation():
    with pytest.raises(ValueError):
        RomConfig(mode="nope")
    with pytest.raises(ValueError):
        RomConfig(lam=1.5)
    with pytest.raises(ValueError):
        RomConfig(m=0)
    with pytest.raises(ValueError):
        RomConfig(jacobian_dtype="float16")


def test_quadratic_energy_matches_dense_oracle(small_mesh, rng):
    # inertia only: E(q) = 1/(2h^2) (u_base + U q - u_pred)^T M (...)
    ctx = make_context(small_mesh, elastic=False, state=random_state(small_mesh, rng))
    U = rng.standard_normal((small_mesh.n_dofs, 5))
    u_base = 0.01 * rng.standard_normal(small_mesh.n_dofs)
    q, stats = rom_newton_solve(ctx, u_base, U, tol=1e-12)
    M = np.diag(ctx.mass)
    oracle = np.linalg.solve(U.T @ M @ U, U.T @ M @ (en.predictor(ctx) - u_base))
    assert np.linalg.norm(q - oracle) <= 1e-8 * np.linalg.norm(oracle)
    assert stats.iterations == 1 and stats.converged and stats.projected_steps == 0


def test_solution_depends_only_on_span(bar_mesh, rng):
    ctx = make_context(bar_mesh, bc={0: np.zeros(3)}, state=random_state(bar_mesh, rng, 0.005))
    U = rom._zero_fixed_rows(ctx, rng.standard_normal((bar_mesh.n_dofs, 6)))
    A = rng.standard_normal((6, 6)) + 3 * np.eye(6)
    u_base = en.apply_boundary(ctx, ctx.prev_state.u)
    q1, _ = rom_newton_solve(ctx, u_base, U)
    q2, _ = rom_newton_solve(ctx, u_base, U @ A)
    np.testing.assert_allclose(U @ q1, U @ A @ q2, atol=1e-12)


def test_converged_start_needs_no_iteration(small_mesh):
    ctx = make_context(small_mesh, gravity=(0.0, 0.0, 0.0))
    q, stats = rom_newton_solve(ctx, np.zeros(small_mesh.n_dofs), np.eye(small_mesh.n_dofs)[:, :4])
    assert stats.iterations == 0 and stats.converged
    assert np.all(q == 0.0)


def test_full_basis_reproduces_fom(bar_mesh, rng):
    bc = {i: np.array([0.0, 0.01, 0.0]) for i in range(4)}
    ctx = make_context(bar_mesh, bc=bc, state=random_state(bar_mesh, rng, 0.005))
    free = np.flatnonzero(ctx.free_mask)
    U = np.eye(bar_mesh.n_dofs)[:, free]
    u_base = en.apply_boundary(ctx, ctx.prev_state.u)
    q, stats = rom_newton_solve(ctx, u_base, U, tol=1e-9, max_iter=50)
    ref = fom_step(ctx, tol=1e-9).u
    assert stats.converged
    np.testing.assert_allclose(u_base + U @ q, ref, atol=1e-10)


def test_indefinite_hessian_falls_back_to_projection(monkeypatch, small_mesh, rng):
    ctx = make_context(small_mesh, state=random_state(small_mesh, rng))
    calls = {"n": 0}
    real = rom._cholesky_solve

    def flaky(H, rhs):
        calls["n"] += 1
        return None if calls["n"] == 1 else real(H, rhs)

    monkeypatch.setattr(rom, "_cholesky_solve", flaky)
    U = rng.standard_normal((small_mesh.n_dofs, 4))
    _, stats = rom_newton_solve(ctx, ctx.prev_state.u, U)
    assert stats.projected_steps == 1 and stats.tikhonov_bumps == 0 and stats.converged


def test_tikhonov_exhaustion_raises(monkeypatch, small_mesh, rng):
    ctx = make_context(small_mesh, state=random_state(small_mesh, rng))
    monkeypatch.setattr(rom, "_cholesky_solve", lambda H, rhs: None)
    with pytest.raises(ReducedSolveError):
        rom_newton_solve(ctx, ctx.prev_state.u, rng.standard_normal((small_mesh.n_dofs, 3)))


def test_tikhonov_rescues_singular_hessian(monkeypatch, small_mesh, rng):
    ctx = make_context(small_mesh, elastic=False, state=random_state(small_mesh, rng))
    stats = rom.ReducedSolveStats()
    Q = np.linalg.qr(rng.standard_normal((small_mesh.n_dofs, 3)))[0]
    monkeypatch.setattr(en, "reduced_hessian", lambda *a, **k: np.diag([1.0, 1.0, 0.0]))
    g = np.ones(3)
    dy = rom._reduced_newton_direction(ctx, ctx.prev_state.u, Q, None, g, stats)
    assert stats.projected_steps == 1 and stats.tikhonov_bumps >= 1
    assert np.all(np.isfinite(dy)) and g @ dy < 0


def test_pca_step_stationary(small_mesh, rng):
    ctx = make_context(small_mesh, gravity=(0.0, 0.0, 0.0))
    basis = Basis(np.linalg.qr(rng.standard_normal((small_mesh.n_dofs, 4)))[0], True)
    nxt, stats = pca_step(ctx, basis, np.zeros(small_mesh.n_dofs))
    assert stats.iterations == 0 and nxt.step == 1
    np.testing.assert_array_equal(nxt.u, 0.0)


def test_pca_step_drops_directions_on_prescribed_dofs(small_mesh, rng):
    ctx = make_context(small_mesh, bc={0: np.zeros(3)})
    A = rng.standard_normal((small_mesh.n_dofs, 3))
    only_fixed = np.zeros(small_mesh.n_dofs)
    only_fixed[ctx.fixed_dofs] = 1.0
    basis = Basis(np.column_stack([A, only_fixed, A[:, 0] + only_fixed]))
    nxt, stats = pca_step(ctx, basis, np.zeros(small_mesh.n_dofs))
    assert stats.converged and np.all(nxt.u[ctx.fixed_dofs] == 0.0)
    U = rom._free_part(ctx, basis.matrix)
    assert U.r == 3 and principal_angles(U.matrix, rom._zero_fixed_rows(ctx, A)).max() < 1e-10


def test_pca_reproduces_trajectory_in_its_span():
    sc = small_scenario("bending", T=10)
    from adaptive_rom.fom import run_scenario_fom

    traj, _, _ = run_scenario_fom(sc, tol=1e-10)
    S = np.column_stack([s.u for s in traj])
    basis, mean = pca_basis(S, 10)  # full rank of the 11 centered snapshots
    stepper = make_stepper(RomConfig(mode="pca_baseline", r=10, newton_tol=1e-10), pca=(basis, mean))
    for t in range(1, 11):
        u = stepper.step(sc.context(t, traj[t - 1])).u
        assert np.linalg.norm(u - traj[t].u) <= 1e-6 * np.linalg.norm(traj[t].u)


def test_zero_decoder_is_flagged_and_completed(small_mesh):
    model = toy_model(small_mesh, r=3)
    for layer in model.decoder.layers:
        layer.weight[:] = 0.0
    ctx = make_context(small_mesh, bc={0: np.zeros(3)})
    cfg = RomConfig(r=3, mode="adaptive_plain")
    basis, p, flagged = adaptive_basis(ctx, model, HistoryWindow(4), cfg)
    U = basis.matrix
    assert flagged and U.shape == (small_mesh.n_dofs, 3)
    assert np.abs(U.T @ U - np.eye(3)).max() < 1e-12
    assert np.all(U[ctx.fixed_dofs] == 0.0)
    state = adaptive_step(ctx, model, RomState(ctx.prev_state, HistoryWindow(4)), cfg)
    assert state.flagged and np.all(np.isfinite(state.sim.u))


def test_basis_rows_zero_at_fixed_dofs(small_mesh):
    model = toy_model(small_mesh, r=3)
    ctx = make_context(small_mesh, bc={0: np.zeros(3), 1: np.zeros(3)})
    basis, p, flagged = adaptive_basis(ctx, model, HistoryWindow(4), RomConfig(r=3, mode="adaptive_plain", jacobian_dtype="float64"))
    assert not flagged and basis.orthonormal
    assert np.all(basis.matrix[ctx.fixed_dofs] == 0.0)
    J = rom._zero_fixed_rows(ctx, neural.latent_jacobian(model, p, small_mesh))
    assert principal_angles(basis.matrix, J).max() < 1e-10


def test_empty_window_grassmann_equals_plain(small_mesh):
    model = toy_model(small_mesh, r=3)
    ctx = make_context(small_mesh, bc={0: np.zeros(3)})
    a = adaptive_basis(ctx, model, HistoryWindow(4), RomConfig(r=3, mode="adaptive_plain", lam=0.0))[0]
    b = adaptive_basis(ctx, model, HistoryWindow(4), RomConfig(r=3, mode="adaptive_grassmann", lam=0.0))[0]
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_lambda_endpoints_select_spans(small_mesh, rng):
    model = toy_model(small_mesh, r=3)
    ctx = make_context(small_mesh, bc={0: np.zeros(3)})
    window = HistoryWindow(6)
    for _ in range(6):
        u = rom._zero_fixed_rows(ctx, 0.01 * rng.standard_normal(small_mesh.n_dofs))
        window.push(rng.standard_normal(3), u)
    plain = adaptive_basis(ctx, model, window, RomConfig(r=3, mode="adaptive_plain"))[0].matrix
    one = adaptive_basis(ctx, model, window, RomConfig(r=3, lam=1.0))[0].matrix
    zero = adaptive_basis(ctx, model, window, RomConfig(r=3, lam=0.0))[0].matrix
    phi = rom._zero_fixed_rows(ctx, rom.history_basis(window, 1e-8))
    assert principal_angles(one, plain).max() < 1e-8
    assert principal_angles(zero, phi).max() < 1e-8


def _rollouts(cfgs, model, sc):
    return [rollout(make_stepper(c, model=model), sc)[0] for c in cfgs]


def test_lambda_one_matches_plain_rollout():
    sc = small_scenario("bending", T=10)
    model = toy_model(sc.mesh, r=3)
    a, b = _rollouts([RomConfig(r=3, lam=1.0, m=5), RomConfig(r=3, mode="adaptive_plain")], model, sc)
    assert max(np.abs(x.u - y.u).max() for x, y in zip(a, b)) < 1e-8


def test_free_rollout_window_discipline():
    sc = small_scenario("bending", T=6)
    model = toy_model(sc.mesh, r=3)
    stepper = make_stepper(RomConfig(r=3, m=4), model=model)
    traj, timings = rollout(stepper, sc)
    assert len(traj) == 7 and len(timings) == 6
    P, D = stepper.window.matrices()
    assert P.shape == (3, 4)
    np.testing.assert_array_equal(D[:, -1], traj[-1].u)
    np.testing.assert_array_equal(D[:, 0], traj[3].u)


def test_realign_records_reference_states():
    sc = small_scenario("bending", T=4)
    model = toy_model(sc.mesh, r=3)
    stepper = make_stepper(RomConfig(r=3, m=3), model=model)
    ref = SimState(np.full(sc.mesh.n_dofs, 1e-3), np.zeros(sc.mesh.n_dofs), 1, sc.h)
    stepper.step(sc.context(1, sc.initial_state()))
    stepper.realign(ref)
    stepper.step(sc.context(2, ref))
    # own state of step 1 was recorded, then only the reference
    D = stepper.window.matrices()[1]
    assert D.shape[1] == 2
    np.testing.assert_array_equal(D[:, 1], ref.u)


def test_incremental_steps_start_from_previous_state():
    sc = small_scenario("bending", T=3)
    model = toy_model(sc.mesh, r=3)
    stepper = AdaptiveStepper(model, RomConfig(r=3, mode="adaptive_plain"))
    s1 = stepper.step(sc.context(1, sc.initial_state()))
    ctx = sc.context(2, s1)
    U = stepper.last.last_basis.matrix
    s2 = stepper.step(ctx)
    # the new state lies in u_prev (with the step's boundary values) + span of that step's basis
    delta = s2.u - en.apply_boundary(ctx, s1.u)
    U2 = stepper.last.last_basis.matrix
    resid = delta - U2 @ np.linalg.lstsq(U2, delta, rcond=None)[0]
    assert np.linalg.norm(resid) <= 1e-10 * max(np.linalg.norm(delta), 1e-300)
    assert U.shape == U2.shape


def test_make_stepper_errors(small_mesh):
    with pytest.raises(ValueError):
        make_stepper(RomConfig(mode="pca_baseline"))
    with pytest.raises(ValueError):
        make_stepper(RomConfig())
    with pytest.raises(ValueError):
        make_stepper(RomConfig(r=4), model=toy_model(small_mesh, r=3))


def test_make_stepper_truncates_pca(rng):
    basis = Basis(np.linalg.qr(rng.standard_normal((12, 6)))[0], True)
    stepper = make_stepper(RomConfig(mode="pca_baseline", r=4), pca=(basis, np.zeros(12)))
    assert stepper.basis.r == 4
