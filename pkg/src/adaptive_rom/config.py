"""Run configuration: one TOML file per run, unknown keys rejected.

Schema (every table and key optional)::

    object = "bar"            # label used in reports
    seed = 0
    threads = 1

    [mesh]                    # file = "mesh.txt" or a generated bar
    cells = [6, 3, 3]
    dx = 0.1

    [material]
    youngs_modulus = 1e5
    poissons_ratio = 0.45
    density = 1000.0

    [data]                    # training corpus for gen-data
    every = 1
    [[data.scenarios]]
    kind = "compression"
    direction = "y"           # compression x|y|z, bending -y|+y|-z|+z, twisting +|-
    T = 250

    [[scenarios]]             # evaluation scenarios (fom-run, rom-run, compare, ablate, bench)
    kind = "bending"
    T = 200
    h = 0.01
    # name, gravity, floor_height, barrier_stiffness, barrier_distance,
    # initial_velocity, boundary = [{select, axis, keyframes = [{at, translate, rotate_deg}]}]

    [model]
    r = 16
    encoder_hidden = [128, 128]
    decoder_hidden = [128, 128, 128, 128, 128, 128, 128, 128]

    [train]                   # TrainConfig fields
    [rom]                     # RomConfig fields; "lambda" is accepted for lam
    [compare]
    modes = ["pca_baseline", "adaptive_plain", "adaptive_grassmann"]
    [ablation]
    axis = "lambda"
    values = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    [bench]
    warmup = 5
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .energy import Material
from .neural import TrainConfig
from .rom import MODES, RomConfig
from .scenarios import BoundaryGroup, ScenarioConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class MeshSpec:
    file: str | None = None
    cells: tuple = (6, 3, 3)
    dx: float = 0.1


@dataclass
class ModelSpec:
    r: int = 16
    encoder_hidden: tuple = (128, 128)
    decoder_hidden: tuple = (128,) * 8


@dataclass
class DataSpec:
    every: int = 1
    scenarios: list = field(default_factory=list)


@dataclass
class CompareSpec:
    modes: tuple = MODES


@dataclass
class AblationSpec:
    axis: str = "lambda"
    values: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

    def __post_init__(self):
        if self.axis not in ("r", "m", "lambda"):
            raise ValueError(f"ablation axis must be r, m or lambda, got {self.axis!r}")
        if not self.values:
            raise ValueError("ablation values must be nonempty")


@dataclass
class BenchSpec:
    warmup: int = 5


# every cookbook motion: one global PCA basis has to share its modes among all
# of them, as with a large mixed training corpus
DEFAULT_TRAIN_SET = (
    ("compression", "y"), ("compression", "x"), ("compression", "z"),
    ("bending", "-y"), ("bending", "+y"), ("bending", "+z"),
    ("stretching", "x"), ("twisting", "+"), ("twisting", "-"), ("drop", ""),
)  # fmt: skip
DEFAULT_EVAL = (("compression", 200), ("bending", 200))


@dataclass
class RunConfig:
    object: str = "bar"
    seed: int = 0
    threads: int = 1
    mesh: MeshSpec = field(default_factory=MeshSpec)
    material: Material = field(default_factory=Material)
    data: DataSpec = field(default_factory=DataSpec)
    scenarios: list = field(default_factory=list)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    rom: RomConfig = field(default_factory=RomConfig)
    compare: CompareSpec = field(default_factory=CompareSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.data.scenarios:
            self.data.scenarios = [self.scenario(kind=k, direction=d, T=250) for k, d in DEFAULT_TRAIN_SET]
        if not self.scenarios:
            self.scenarios = [self.scenario(kind=k, T=T) for k, T in DEFAULT_EVAL]

    def scenario(self, **table) -> ScenarioConfig:
        """Scenario with this run's mesh and material; cookbook boundary unless given."""
        kind = table.pop("kind", "compression")
        T = table.pop("T", 300)
        direction = table.pop("direction", None)
        shared = dict(
            mesh_file=self.mesh.file,
            bar_cells=tuple(self.mesh.cells),
            bar_dx=self.mesh.dx,
            youngs_modulus=self.material.youngs_modulus,
            poissons_ratio=self.material.poissons_ratio,
            density=self.material.density,
        )
        boundary = table.pop("boundary", None)
        cfg = ScenarioConfig.default(kind, T, direction, **shared, **table)
        if boundary is not None:
            cfg.boundary = [BoundaryGroup(**b) for b in boundary]
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        out = dataclasses.replace(self, seed=seed)
        out.train = dataclasses.replace(self.train, seed=seed)
        out.rom = dataclasses.replace(self.rom, seed=seed)
        return out

    def rom_variant(self, **overrides) -> RomConfig:
        return dataclasses.replace(self.rom, **overrides)


def _build(cls, table, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        default = known[key].default
        kwargs[key] = tuple(value) if isinstance(value, list) and isinstance(default, tuple) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


_SCENARIO_KEYS = {
    "name", "kind", "direction", "T", "h", "gravity", "floor_height", "barrier_stiffness",
    "barrier_distance", "initial_velocity", "boundary", "seed",
}  # fmt: skip


def _scenario_tables(run: RunConfig, tables, where):
    if not isinstance(tables, list):
        raise ConfigError(f"[[{where}]] must be an array of tables")
    out = []
    for i, t in enumerate(tables):
        unknown = sorted(set(t) - _SCENARIO_KEYS)
        if unknown:
            raise ConfigError(f"unknown key(s) in [[{where}]] #{i}: {', '.join(unknown)}")
        t = {k: tuple(v) if k in ("gravity", "initial_velocity") else v for k, v in t.items()}
        try:
            out.append(run.scenario(**t))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[[{where}]] #{i}: {exc}") from None
    return out


def parse_config(doc: dict) -> RunConfig:
    doc = dict(doc)
    top = {k: doc.pop(k) for k in ("object", "seed", "threads") if k in doc}
    sections = {
        "mesh": MeshSpec,
        "material": Material,
        "model": ModelSpec,
        "train": TrainConfig,
        "rom": RomConfig,
        "compare": CompareSpec,
        "ablation": AblationSpec,
        "bench": BenchSpec,
    }
    data = doc.pop("data", {})
    if not isinstance(data, dict):
        raise ConfigError("[data] must be a table")
    data = dict(data)
    eval_tables = doc.pop("scenarios", [])
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in sections.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            table = dict(doc[name])
            if name == "rom" and "lambda" in table:
                table["lam"] = table.pop("lambda")
            kwargs[name] = _build(cls, table, name)
    train_tables = data.pop("scenarios", [])
    kwargs["data"] = _build(DataSpec, data, "data")
    try:
        run = RunConfig(**top, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(run.seed, int) or run.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if train_tables:
        run.data.scenarios = _scenario_tables(run, train_tables, "data.scenarios")
    if eval_tables:
        run.scenarios = _scenario_tables(run, eval_tables, "scenarios")
    run.raw = doc | top | ({"data": data} if data else {})
    return run


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    run = parse_config(doc)
    run.raw = doc
    if run.mesh.file and not Path(run.mesh.file).is_absolute():
        mesh_file = str(Path(path).parent / run.mesh.file)
        run.mesh.file = mesh_file
        for sc in run.data.scenarios + run.scenarios:
            sc.mesh_file = mesh_file
    return run
