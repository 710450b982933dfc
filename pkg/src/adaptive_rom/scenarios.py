"""Scripted desk-scale scenarios with piecewise-linear boundary programs.

Keyframe times are fractions of the scenario length ``T``. A boundary group
selects the nodes on one face of the rest bounding box and moves them rigidly:
rotation about the face centroid followed by a translation. A group whose
keyframes are all zero simply clamps its face.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyContext, Material
from .geometry import SimState, TetMesh, load_mesh, make_bar_mesh

KINDS = ("compression", "bending", "stretching", "twisting", "drop")
# cookbook variants per kind, default first
VARIANTS = {
    "compression": ("y", "x", "z"),
    "bending": ("-y", "+y", "-z", "+z"),
    "stretching": ("x",),
    "twisting": ("+", "-"),
    "drop": ("",),
}
FACES = ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")


@dataclass
class Keyframe:
    at: float
    translate: tuple = (0.0, 0.0, 0.0)
    rotate_deg: float = 0.0


@dataclass
class BoundaryGroup:
    select: str
    axis: tuple = (1.0, 0.0, 0.0)
    keyframes: list = field(default_factory=lambda: [Keyframe(0.0), Keyframe(1.0)])

    def __post_init__(self):
        if self.select not in FACES:
            raise ValueError(f"unknown face selector {self.select!r}; expected one of {FACES}")
        self.keyframes = [k if isinstance(k, Keyframe) else Keyframe(**k) for k in self.keyframes]
        ats = [k.at for k in self.keyframes]
        if not ats or ats[0] > 0.0 or ats[-1] < 1.0 or any(b <= a for a, b in zip(ats, ats[1:])):
            raise ValueError("keyframes must be increasing and cover [0, 1]")

    def pose(self, s: float):
        ats = [k.at for k in self.keyframes]
        trans = np.array([np.interp(s, ats, [k.translate[i] for k in self.keyframes]) for i in range(3)])
        angle = np.deg2rad(np.interp(s, ats, [k.rotate_deg for k in self.keyframes]))
        return trans, angle


@dataclass
class ScenarioConfig:
    name: str = "compression"
    kind: str = "compression"
    mesh_file: str | None = None
    bar_cells: tuple = (6, 3, 3)
    bar_dx: float = 0.1
    youngs_modulus: float = 1e5
    poissons_ratio: float = 0.45
    density: float = 1000.0
    gravity: tuple = (0.0, -9.8, 0.0)
    h: float = 0.01
    T: int = 300
    floor_height: float | None = None
    barrier_stiffness: float | None = None
    barrier_distance: float | None = None
    initial_velocity: tuple = (0.0, 0.0, 0.0)
    boundary: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not self.h > 0 or self.T < 0:
            raise ValueError("need h > 0 and T >= 0")
        self.boundary = [b if isinstance(b, BoundaryGroup) else BoundaryGroup(**b) for b in self.boundary]

    @classmethod
    def default(cls, kind: str, T: int = 300, direction: str | None = None, **overrides) -> "ScenarioConfig":
        """Cookbook motions for the default bar (load to a peak at T/2, release by T).

        ``direction`` picks the variant: the pressed axis for compression
        (x, y, z), the tip direction for bending (-y, +y, -z, +z) and the
        sense of twisting (+, -). Non-default variants get a suffixed name.
        """
        cells = overrides.get("bar_cells", (6, 3, 3))
        dx = overrides.get("bar_dx", 0.1)
        extent = [c * dx for c in cells]
        length = extent[0]
        peak = lambda **kw: [Keyframe(0.0), Keyframe(0.5, **kw), Keyframe(1.0)]
        clamp = lambda face: BoundaryGroup(face)
        if kind not in VARIANTS:
            raise ValueError(f"unknown scenario kind {kind!r}")
        variant = VARIANTS[kind][0] if direction is None else direction
        if variant not in VARIANTS[kind]:
            raise ValueError(f"{kind} direction must be one of {VARIANTS[kind]}, got {direction!r}")
        if kind == "compression":
            a = "xyz".index(variant)
            shift = [0.0, 0.0, 0.0]
            shift[a] = -0.3 * extent[a]
            boundary = [clamp(f"{variant}_min"), BoundaryGroup(f"{variant}_max", keyframes=peak(translate=tuple(shift)))]
        elif kind == "bending":
            shift = [0.0, 0.0, 0.0]
            shift["xyz".index(variant[1])] = (0.25 if variant[0] == "+" else -0.25) * length
            boundary = [clamp("x_min"), BoundaryGroup("x_max", keyframes=peak(translate=tuple(shift)))]
        elif kind == "stretching":
            boundary = [clamp("x_min"), BoundaryGroup("x_max", keyframes=peak(translate=(0.3 * length, 0.0, 0.0)))]
        elif kind == "twisting":
            angle = 90.0 if variant == "+" else -90.0
            boundary = [clamp("x_min"), BoundaryGroup("x_max", axis=(1.0, 0.0, 0.0), keyframes=peak(rotate_deg=angle))]
        else:
            boundary = []
            overrides.setdefault("floor_height", -0.5 * extent[1])
            overrides.setdefault("initial_velocity", (0.3, 0.0, 0.0))
        overrides.setdefault("name", kind if variant == VARIANTS[kind][0] else f"{kind}_{variant}")
        return cls(kind=kind, T=T, boundary=boundary, **overrides)

    @property
    def material(self) -> Material:
        return Material(self.youngs_modulus, self.poissons_ratio, self.density)

    def build_mesh(self) -> TetMesh:
        if self.mesh_file:
            return load_mesh(self.mesh_file)
        nx, ny, nz = (c + 1 for c in self.bar_cells)
        return make_bar_mesh(nx, ny, nz, self.bar_dx)


def select_face(mesh: TetMesh, face: str) -> np.ndarray:
    axis = "xyz".index(face[0])
    lo, hi = mesh.bounding_box()
    target = lo[axis] if face.endswith("min") else hi[axis]
    tol = 1e-9 * max(mesh.bbox_diagonal(), 1.0)
    return np.flatnonzero(np.abs(mesh.nodes[:, axis] - target) <= tol)


def _rotation(axis, angle):
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


class Scenario:
    """A built scenario: mesh, base energy context and boundary program."""

    def __init__(self, config: ScenarioConfig, mesh: TetMesh | None = None):
        self.config = config
        self.mesh = mesh if mesh is not None else config.build_mesh()
        self.T = config.T
        self.h = config.h
        self._groups = [(g, select_face(self.mesh, g.select)) for g in config.boundary]
        self.base_context = EnergyContext.create(
            self.mesh,
            config.material,
            h=config.h,
            gravity=config.gravity,
            floor_height=config.floor_height,
            barrier_stiffness=config.barrier_stiffness,
            barrier_distance=config.barrier_distance,
        )
        self._bc_cache: dict[int, EnergyContext] = {}

    @property
    def name(self) -> str:
        return self.config.name

    def boundary_values(self, t: int) -> dict:
        s = t / self.T if self.T else 0.0
        out = {}
        for group, nodes in self._groups:
            trans, angle = group.pose(s)
            X = self.mesh.nodes[nodes]
            centroid = X.mean(axis=0)
            R = _rotation(group.axis, angle)
            disp = (X - centroid) @ R.T + centroid + trans - X
            out.update({int(i): d for i, d in zip(nodes, disp)})
        return out

    def context(self, t: int, prev_state: SimState) -> EnergyContext:
        """Energy context for the step that ends at time index ``t``."""
        ctx = self._bc_cache.get(t)
        if ctx is None:
            ctx = self.base_context.with_boundary(self.boundary_values(t))
            if len(self._bc_cache) < 4096:
                self._bc_cache[t] = ctx
        return ctx.with_state(prev_state)

    def fixed_dofs(self) -> np.ndarray:
        return self.context(0, self.initial_state()).fixed_dofs

    def initial_state(self) -> SimState:
        n = self.mesh.n
        v = np.tile(np.asarray(self.config.initial_velocity, dtype=float), n)
        state = SimState(np.zeros(3 * n), v, 0, self.h)
        state.v[self.base_context.with_boundary(self.boundary_values(0)).fixed_dofs] = 0.0
        return state
