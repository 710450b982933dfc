import numpy as np
import pytest

from adaptive_rom import neural
from adaptive_rom.energy import EnergyContext, Material
from adaptive_rom.geometry import SimState, make_bar_mesh
from adaptive_rom.scenarios import Scenario, ScenarioConfig

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_mesh():
    return make_bar_mesh(3, 2, 2, 0.1)


@pytest.fixture(scope="session")
def bar_mesh():
    return make_bar_mesh(4, 3, 3, 0.1)


@pytest.fixture
def material():
    return Material()


def make_context(mesh, *, h=0.01, gravity=(0.0, -9.8, 0.0), bc=None, state=None, **kw):
    ctx = EnergyContext.create(mesh, Material(), h=h, gravity=gravity, **kw)
    if bc is not None:
        ctx = ctx.with_boundary(bc)
    if state is not None:
        ctx = ctx.with_state(state)
    return ctx


def random_state(mesh, rng, scale=0.02, h=0.01):
    return SimState(scale * rng.standard_normal(mesh.n_dofs), scale * rng.standard_normal(mesh.n_dofs), 0, h)


def small_scenario(kind="bending", T=12, **kw):
    return Scenario(ScenarioConfig.default(kind, T, bar_cells=(3, 1, 1), **kw))


def toy_model(mesh, r=3, hidden=(8,), dec_hidden=(8, 8), seed=0, snapshots=None):
    return neural.CromModel.create(
        mesh, r, snapshots=snapshots, encoder_hidden=hidden, decoder_hidden=dec_hidden, seed=seed
    )
