from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_rom.geometry import MeshError, SimState, TetMesh, load_mesh, make_bar_mesh, save_mesh

UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)


def test_bar_counts_and_volume():
    mesh = make_bar_mesh(7, 4, 4, 0.1)
    assert mesh.n == 112 and mesh.n_tets == 6 * 6 * 3 * 3
    assert np.all(mesh.rest_volume > 0)
    assert mesh.rest_volume.sum() == pytest.approx(0.6 * 0.3 * 0.3, rel=1e-12)


def test_bar_node_order_is_x_fastest():
    mesh = make_bar_mesh(3, 2, 2, 0.5)
    np.testing.assert_array_equal(mesh.nodes[:4], [[0, 0, 0], [0.5, 0, 0], [1.0, 0, 0], [0, 0.5, 0]])


def test_kuhn_split_is_conforming():
    mesh = make_bar_mesh(4, 3, 3, 1.0)
    faces = Counter()
    for t in mesh.tets:
        for drop in range(4):
            faces[tuple(sorted(np.delete(t, drop)))] += 1
    counts = Counter(faces.values())
    assert set(counts) == {1, 2}
    # boundary triangles: two per boundary quad
    quads = 2 * (3 * 2 + 3 * 2 + 2 * 2)
    assert counts[1] == 2 * quads


def test_rest_inverse_maps_edges_to_identity(small_mesh):
    D = small_mesh.rest_shape()
    np.testing.assert_allclose(D @ small_mesh.rest_inverse, np.broadcast_to(np.eye(3), D.shape), atol=1e-12)


def test_inverted_tet_is_reoriented():
    mesh = TetMesh.from_arrays(UNIT_TET, [[0, 2, 1, 3]])
    assert mesh.rest_volume[0] == pytest.approx(1 / 6)
    assert np.linalg.det(mesh.rest_shape()[0]) > 0


@pytest.mark.parametrize(
    "tets",
    [[[0, 1, 2, 2]], [[0, 1, 2, 9]], [[-1, 1, 2, 3]]],
)
def test_bad_connectivity_rejected(tets):
    with pytest.raises(MeshError):
        TetMesh.from_arrays(UNIT_TET, tets)


def test_degenerate_tet_rejected():
    nodes = np.vstack([UNIT_TET, [[1.0, 1.0, 0.0]]])
    with pytest.raises(MeshError, match="degenerate"):
        TetMesh.from_arrays(nodes, [[0, 1, 3, 2], [0, 1, 2, 4]])  # second one is flat


def test_mesh_arrays_are_read_only(small_mesh):
    with pytest.raises(ValueError):
        small_mesh.nodes[0, 0] = 1.0


def test_save_load_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    mesh = make_bar_mesh(3, 3, 2, 0.1)
    jittered = TetMesh.from_arrays(mesh.nodes + 1e-3 * rng.standard_normal(mesh.nodes.shape), mesh.tets)
    save_mesh(jittered, tmp_path / "m.txt")
    back = load_mesh(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.nodes, jittered.nodes)
    np.testing.assert_array_equal(back.tets, jittered.tets)


@pytest.mark.parametrize(
    "text",
    ["", "nodes 2\n0 0 0\n", "points 4\n", "nodes 4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\ntets 1\n0 1 2\n", "nodes x\n"],
)
def test_malformed_files_rejected(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(path)


def test_missing_file_is_mesh_error(tmp_path):
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "nope.txt")


def test_sim_state_validation():
    with pytest.raises(ValueError):
        SimState(np.zeros(3), np.zeros(6))
    with pytest.raises(ValueError):
        SimState(np.zeros(3), np.zeros(3), time_step_h=0.0)
    s = SimState(np.ones(3), np.zeros(3))
    c = s.copy()
    c.u[0] = 5.0
    assert s.u[0] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=9, max_size=9), st.floats(0.5, 2.0))
def test_volumes_scale_with_affine_determinant(entries, scale):
    A = scale * np.eye(3) + 0.3 * np.array(entries).reshape(3, 3)
    det = np.linalg.det(A)
    if abs(det) < 1e-2:
        return
    mesh = make_bar_mesh(3, 2, 2, 0.1)
    moved = TetMesh.from_arrays(mesh.nodes @ A.T, mesh.tets)
    np.testing.assert_allclose(moved.rest_volume, abs(det) * mesh.rest_volume, rtol=1e-9)
