import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptive_rom import cli
from adaptive_rom import experiments as ex
from adaptive_rom.config import ConfigError, RunConfig, load_config, parse_config
from adaptive_rom.fom import run_scenario_fom
from adaptive_rom.rom import RomConfig
from adaptive_rom.scenarios import Scenario, ScenarioConfig, select_face
from adaptive_rom.storage import (
    FormatError,
    SnapshotSet,
    load_matrix,
    load_snapshots,
    save_matrix,
    save_snapshots,
)

from .conftest import small_scenario, toy_model

TINY = """
seed = 3
[mesh]
cells = [2, 1, 1]
dx = 0.1
[[data.scenarios]]
kind = "compression"
T = 10
[[data.scenarios]]
kind = "bending"
direction = "+z"
T = 10
[[scenarios]]
kind = "bending"
T = 10
[model]
r = 4
encoder_hidden = [16]
decoder_hidden = [16, 16]
[train]
epochs_per_phase = 2
batch_size = 8
[rom]
r = 4
m = 3
[ablation]
axis = "m"
values = [1, 3]
[bench]
warmup = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


# ------------------------------------------------------------------ config


def test_defaults_cover_desk_protocol():
    run = RunConfig()
    assert [s.name for s in run.scenarios] == ["compression", "bending"]
    assert all(s.T == 200 and s.h == 0.01 for s in run.scenarios)
    assert len(run.data.scenarios) == 10 and len({s.name for s in run.data.scenarios}) == 10
    assert (run.rom.r, run.rom.m, run.rom.lam) == (16, 20, 0.2)


def test_parse_config_maps_sections(tiny_config):
    run = load_config(tiny_config)
    assert run.seed == 3 and run.rom.m == 3 and run.model.decoder_hidden == (16, 16)
    assert [s.name for s in run.data.scenarios] == ["compression", "bending_+z"]
    assert run.scenarios[0].bar_cells == (2, 1, 1)
    assert parse_config({"rom": {"lambda": 0.7}}).rom.lam == 0.7


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"rom": {"r": 4, "colour": "red"}},
        {"rom": {"mode": "nope"}},
        {"rom": {"lambda": 2.0}},
        {"seed": -1},
        {"scenarios": [{"kind": "bending", "speed": 3}]},
        {"scenarios": [{"kind": "bending", "direction": "sideways"}]},
        {"ablation": {"axis": "h"}},
        {"train": "fast"},
    ],
)
def test_bad_configs_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_seed_propagates():
    run = RunConfig().with_seed(9)
    assert run.train.seed == 9 and run.rom.seed == 9


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[rom]\nr = 'x' = 3\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-data", "--config", str(tmp_path / "missing.toml")]) == 2
    assert cli.main(["gen-data", "--threads", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "empty")]) == 2  # no snapshots yet
    assert "error" in capsys.readouterr().err


# --------------------------------------------------------------- scenarios


def test_scenario_keyframes_peak_and_release():
    sc = Scenario(ScenarioConfig.default("compression", 10, bar_cells=(2, 1, 1)))
    top = select_face(sc.mesh, "y_max")
    for t, frac in ((0, 0.0), (5, 1.0), (10, 0.0), (2, 0.4)):
        bv = sc.boundary_values(t)
        np.testing.assert_allclose(bv[int(top[0])], [0.0, -0.3 * 0.1 * frac, 0.0], atol=1e-15)
    assert all(np.all(sc.boundary_values(7)[int(i)] == 0.0) for i in select_face(sc.mesh, "y_min"))


def test_twist_moves_face_rigidly():
    sc = Scenario(ScenarioConfig.default("twisting", 10, bar_cells=(2, 2, 2)))
    face = select_face(sc.mesh, "x_max")
    X = sc.mesh.nodes[face]
    bv = sc.boundary_values(5)
    Y = X + np.array([bv[int(i)] for i in face])
    d0 = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d1 = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-14)
    np.testing.assert_allclose(Y[:, 0], X[:, 0], atol=1e-15)  # rotation about the bar axis


def test_unknown_scenario_rejected():
    with pytest.raises(ValueError):
        ScenarioConfig.default("shearing")


# ----------------------------------------------------------------- storage


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 6), st.data())
def test_snapshot_round_trip(tmp_path_factory, n, count, data):
    cols = data.draw(arrays(np.float64, (3 * n, count), elements=st.floats(allow_nan=False, width=64)))
    snaps = SnapshotSet(n, cols, [("s", t) for t in range(count)])
    path = tmp_path_factory.mktemp("snap") / "a.snap"
    save_snapshots(path, snaps)
    back = load_snapshots(path)
    assert back.n == n and back.count == count and back.provenance == snaps.provenance
    np.testing.assert_array_equal(back.columns, cols)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(allow_nan=False, width=64)))
def test_matrix_round_trip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("mat") / "a.mat"
    save_matrix(path, a)
    np.testing.assert_array_equal(load_matrix(path), a)


def test_truncated_files_rejected(tmp_path):
    save_matrix(tmp_path / "m", np.ones((2, 3)))
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "m").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_matrix(tmp_path / "m")
    (tmp_path / "s").write_bytes(b"matrix 1 1\n" + bytes(8))
    with pytest.raises(FormatError):
        load_snapshots(tmp_path / "s")


def test_snapshot_set_select_and_extend():
    a = SnapshotSet(1, np.arange(6.0).reshape(3, 2), [("x", 0), ("y", 0)])
    b = a.extend(SnapshotSet(1, np.ones((3, 1)), [("x", 1)]))
    assert b.count == 3
    np.testing.assert_array_equal(b.select("x"), [[0, 1], [2, 1], [4, 1]])
    with pytest.raises(ValueError):
        a.extend(SnapshotSet.empty(2))


# ------------------------------------------------------------- experiments


def test_gen_data_counts_initial_state():
    cfg = small_scenario("bending", T=10).config
    snaps, failures = ex.generate_data([cfg])
    assert snaps.count == 11 and not failures
    assert snaps.provenance[0] == ("bending", 0) and snaps.provenance[-1] == ("bending", 10)
    assert ex.generate_data([cfg], every=5)[0].count == 3


def test_gen_data_empty_list():
    snaps, failures = ex.generate_data([])
    assert snaps.count == 0 and failures == []


@pytest.fixture(scope="module")
def compare_setup():
    sc = small_scenario("bending", T=10)
    traj, _, _ = run_scenario_fom(sc)
    model = toy_model(sc.mesh, r=3)
    pca = ex.PcaCache(np.column_stack([s.u for s in traj]))
    return sc, traj, model, pca


def test_compare_rows(compare_setup, tmp_path):
    sc, traj, model, pca = compare_setup
    cfgs = [RomConfig(r=3, m=4, mode=m) for m in ("pca_baseline", "adaptive_plain", "adaptive_grassmann")]
    rows, _ = ex.run_compare(sc, cfgs, model, tmp_path, pca=pca, fom_traj=traj, warmup=2)
    assert [r["mode"] for r in rows] == [c.mode for c in cfgs]
    assert len({(r["scenario"], r["mode"]) for r in rows}) == 3
    assert rows[0]["m"] == "" and rows[2]["m"] == "4" and rows[2]["lambda"] == "0.2"
    assert all(float(r["err_pct"]) >= 0 and float(r["ms_per_step"]) > 0 for r in rows)
    ex.write_rows(tmp_path / "c.csv", rows, ex.COMPARE_COLUMNS)
    header = next(csv.reader(open(tmp_path / "c.csv")))
    assert header == ex.COMPARE_COLUMNS
    assert len(list(tmp_path.glob("err_*.csv"))) == 3


def test_ablation_agrees_with_compare(compare_setup):
    sc, traj, model, _ = compare_setup
    base = RomConfig(r=3, m=4)
    rows, _ = ex.run_ablation("lambda", [0.2, 1.0], base, sc, model, fom_traj=traj, report_timing=False)
    single, _ = ex.run_compare(sc, [base], model, fom_traj=traj, report_timing=False)
    assert rows[0]["err_pct"] == single[0]["err_pct"]
    plain, _ = ex.run_compare(sc, [RomConfig(r=3, mode="adaptive_plain")], model, fom_traj=traj, report_timing=False)
    assert float(rows[1]["err_pct"]) == pytest.approx(float(plain[0]["err_pct"]), rel=1e-6)
    with pytest.raises(ValueError):
        ex.run_ablation("h", [1], base, sc, model, fom_traj=traj)


def test_window_sizes_sweep_is_finite(compare_setup):
    sc, traj, model, _ = compare_setup
    rows, _ = ex.run_ablation("m", [1, 2, 5, 20], RomConfig(r=3), sc, model, fom_traj=traj, report_timing=False)
    assert all(np.isfinite(float(r["err_pct"])) for r in rows)


def test_missing_model_is_a_failed_cell(compare_setup):
    sc, traj, model, _ = compare_setup
    rows, _ = ex.run_ablation("r", [3, 5], RomConfig(r=3), sc, {3: model}, fom_traj=traj, report_timing=False)
    assert rows[1]["err_pct"].startswith("failed") and "no model" in rows[1]["failure"]


def test_bench_rows(compare_setup):
    sc, traj, model, pca = compare_setup
    steppers = {"pca_baseline": ex.make_stepper(RomConfig(r=3, mode="pca_baseline"), pca=pca(3)), "fom": ex.fom_stepper()}
    rows = ex.bench(sc, steppers, warmup=2)
    assert rows[0]["ratio_vs_pca"] == "1.000" and float(rows[1]["mean_ms"]) > 0


# --------------------------------------------------------------------- CLI


COMMANDS = ["mesh-gen", "fom-run", "gen-data", "train", "rom-run", "compare", "ablate", "bench"]


def _run_all(config, out):
    for cmd in COMMANDS:
        assert cli.main([cmd, "--config", str(config), "--out", str(out), "--no-timing"]) == 0, cmd


def test_cli_pipeline_writes_outputs(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    _run_all(tiny_config, out)
    for name in ("mesh.txt", "snapshots.snap", "model.crom", "compare.csv", "ablation_m.csv", "bench.csv", "train_loss.csv"):
        assert (out / name).exists(), name
    assert load_snapshots(out / "snapshots.snap").count == 22
    manifest = json.loads((out / "manifest_compare.json").read_text())
    assert manifest["seed"] == 3 and manifest["failures"] == []
    rows = list(csv.DictReader(open(out / "compare.csv")))
    assert [r["mode"] for r in rows] == ["pca_baseline", "adaptive_plain", "adaptive_grassmann"]
    assert all(r["ms_per_step"] == "" for r in rows)
    table = list(csv.reader(open(out / "ablation_m_table.csv")))
    assert table[0] == ["m", "1", "3"] and table[1][0] == "bending"


def test_cli_seed_changes_training(tiny_config, tmp_path):
    for seed in ("1", "2"):
        out = tmp_path / seed
        for cmd in ("gen-data", "train"):
            assert cli.main([cmd, "--config", str(tiny_config), "--out", str(out), "--seed", seed]) == 0
    assert (tmp_path / "1" / "train_loss.csv").read_bytes() != (tmp_path / "2" / "train_loss.csv").read_bytes()
