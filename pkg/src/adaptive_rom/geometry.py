"""Tetrahedral meshes, the plain-text mesh format and simulation state."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Malformed mesh file or degenerate element."""


@dataclass(frozen=True)
class TetMesh:
    """Rest geometry of a tetrahedral mesh.

    ``rest_inverse[e]`` is the inverse of the rest shape matrix
    ``[x1 - x0, x2 - x0, x3 - x0]`` and ``rest_volume[e]`` its (positive)
    volume. Build through :func:`TetMesh.from_arrays`, which reorients
    inverted elements.
    """

    nodes: np.ndarray
    tets: np.ndarray
    rest_inverse: np.ndarray
    rest_volume: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_dofs(self) -> int:
        return 3 * self.nodes.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @classmethod
    def from_arrays(cls, nodes, tets) -> "TetMesh":
        nodes = np.ascontiguousarray(nodes, dtype=float)
        tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshError(f"nodes must be (n, 3), got {nodes.shape}")
        n = nodes.shape[0]
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            raise MeshError(f"tet index out of range [0, {n})")
        for e, t in enumerate(tets):
            if len(set(t.tolist())) != 4:
                raise MeshError(f"tet {e} repeats a node: {t.tolist()}")

        vol = _signed_volumes(nodes, tets)
        bbox = nodes.max(axis=0) - nodes.min(axis=0) if n else np.zeros(3)
        bbox_volume = float(np.prod(bbox))
        degenerate = np.abs(vol) < 1e-14 * bbox_volume
        if bbox_volume == 0.0 or degenerate.any():
            bad = int(np.argmax(degenerate)) if degenerate.any() else 0
            raise MeshError(f"degenerate tet {bad} (volume {vol[bad] if vol.size else 0.0:g})")

        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
        shapes = _shape_matrices(nodes, tets)
        inv = np.linalg.inv(shapes)
        tets.setflags(write=False)
        nodes.setflags(write=False)
        inv.setflags(write=False)
        vol = np.abs(vol)
        vol.setflags(write=False)
        return cls(nodes, tets, inv, vol)

    def rest_shape(self) -> np.ndarray:
        return _shape_matrices(self.nodes, self.tets)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))


@dataclass
class SimState:
    """Full-order kinematic state: displacement, velocity and step counter."""

    u: np.ndarray
    v: np.ndarray
    step: int = 0
    time_step_h: float = 0.01

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape or self.u.ndim != 1:
            raise ValueError("u and v must be equal-length vectors")
        if not self.time_step_h > 0:
            raise ValueError("time_step_h must be positive")

    @classmethod
    def rest(cls, mesh: TetMesh, h: float) -> "SimState":
        return cls(np.zeros(mesh.n_dofs), np.zeros(mesh.n_dofs), 0, h)

    def copy(self) -> "SimState":
        return SimState(self.u.copy(), self.v.copy(), self.step, self.time_step_h)


def _shape_matrices(nodes, tets):
    x = nodes[tets]  # (m, 4, 3)
    return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)


def _signed_volumes(nodes, tets):
    if len(tets) == 0:
        return np.zeros(0)
    return np.linalg.det(_shape_matrices(nodes, tets)) / 6.0


def load_mesh(path) -> TetMesh:
    """Read the ``nodes``/``tets`` text format."""
    try:
        lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise MeshError(str(exc)) from exc
    try:
        if lines[0][0] != "nodes":
            raise MeshError("expected 'nodes <n>' header")
        n = int(lines[0][1])
        nodes = np.array([[float(v) for v in ln] for ln in lines[1 : 1 + n]])
        if nodes.shape != (n, 3):
            raise MeshError(f"expected {n} node lines of 3 floats")
        hdr = lines[1 + n]
        if hdr[0] != "tets":
            raise MeshError("expected 'tets <m>' header")
        m = int(hdr[1])
        tets = np.array([[int(v) for v in ln] for ln in lines[2 + n : 2 + n + m]], dtype=np.int64)
        if tets.reshape(-1, 4).shape != (m, 4) or len(lines) != 2 + n + m:
            raise MeshError(f"expected {m} tet lines of 4 ints")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot parse {path}: {exc}") from exc
    return TetMesh.from_arrays(nodes, tets.reshape(-1, 4))


def save_mesh(mesh: TetMesh, path) -> None:
    out = [f"nodes {mesh.n}"]
    out += [" ".join(f"{c:.17g}" for c in x) for x in mesh.nodes]
    out.append(f"tets {mesh.n_tets}")
    out += [" ".join(str(int(i)) for i in t) for t in mesh.tets]
    Path(path).write_text("\n".join(out) + "\n")


# Kuhn split of the unit cube: six tets sharing the main diagonal 0-7.
# Corner index bits: 1 -> +x, 2 -> +y, 4 -> +z.
_KUHN = [
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
]


def make_bar_mesh(nx: int, ny: int, nz: int, dx: float) -> TetMesh:
    """Axis-aligned bar of ``nx * ny * nz`` nodes, x-fastest node ordering."""
    if min(nx, ny, nz) < 2 or not dx > 0:
        raise ValueError("need nx, ny, nz >= 2 and dx > 0")
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    nodes = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1) * float(dx)

    def idx(a, b, c):
        return a + nx * (b + ny * c)

    tets = []
    for c in range(nz - 1):
        for b in range(ny - 1):
            for a in range(nx - 1):
                corner = [idx(a + (q & 1), b + ((q >> 1) & 1), c + ((q >> 2) & 1)) for q in range(8)]
                tets.extend([corner[p] for p in t] for t in _KUHN)
    return TetMesh.from_arrays(nodes, np.array(tets))
