"""Strict JSON run configuration.

Every section maps onto a dataclass; unknown keys anywhere are rejected so a
typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import METHODS, NoiseModel
from .geometry import Pose, TriangleMesh, load_mesh
from .grid import GridSpec
from .registration import RegistrationParams
from .render import SensorModel
from .similarity import TrainConfig


class ConfigError(ValueError):
    pass


BUILTIN_MESHES = ("bracket", "studs", "sphere", "plane")


@dataclass
class SensorConfig:
    fx: float = 291.5
    fy: float = 289.0
    cx: float = 235.0
    cy: float = 235.0
    width: int = 470
    height: int = 470
    d: float = 25.0
    delta_d: float = 2.0
    sensor_extent: list | None = None
    resolution: int | None = None  # resample to this width (and height) before use

    def build(self) -> SensorModel:
        s = SensorModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.d, self.delta_d,
                        None if self.sensor_extent is None else tuple(self.sensor_extent))
        return s if self.resolution is None else s.scaled(self.resolution)


@dataclass
class EncoderConfig:
    kind: str = "baseline_mask"
    temperature: float = 0.07
    train: dict = field(default_factory=dict)

    def train_config(self, seed: int) -> TrainConfig:
        return _build(TrainConfig, {"temperature": self.temperature, **self.train, "seed": seed}, "encoder.train")


@dataclass
class ExperimentConfig:
    kind: str = "single"  # "single" or "multi"
    n_trials: int = 150
    methods: list = field(default_factory=lambda: ["Best-1", "Reg-1", "Best-10", "Reg-10", "Best-50"])
    max_contacts: int = 7
    random_trials: int = 1000
    fixture: str | None = None  # "studs" runs the shipped multi-contact rig


@dataclass
class RenderConfig:
    pose: dict = field(default_factory=dict)
    project_to_contact: bool = True


@dataclass
class LocalizeConfig:
    query: str = ""
    top_k: int = 10
    refine: bool = False


@dataclass
class FuseConfig:
    queries: list = field(default_factory=list)     # contact-shape PGM paths; null for a sensor without contact
    extrinsics: list = field(default_factory=list)  # pose of each sensor in the sensor-1 frame
    task_prior: str = "uniform"
    train_prior: str = "uniform"
    contact_factor: float = 1.5


@dataclass
class PathsConfig:
    grid: str = "grid.tlg"
    encoder: str = "encoder.tle"


@dataclass
class RunConfig:
    mesh: str = "builtin:bracket"
    sensor: SensorConfig = field(default_factory=SensorConfig)
    grid: dict = field(default_factory=dict)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    noise: dict = field(default_factory=dict)
    registration: dict = field(default_factory=dict)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    output_dir: str = "out"
    seed: int = 0
    base_dir: str = field(default=".", metadata={"internal": True})

    # ---- derived objects

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def grid_spec(self) -> GridSpec:
        return _build(GridSpec, self.grid, "grid")

    def noise_model(self) -> NoiseModel:
        return _build(NoiseModel, {**self.noise, "seed": self.noise.get("seed", self.seed)}, "noise")

    def registration_params(self) -> RegistrationParams:
        return _build(RegistrationParams, {"seed": self.seed, **self.registration}, "registration")

    def load_mesh(self) -> TriangleMesh:
        from . import fixtures, shapes
        if self.mesh.startswith("builtin:"):
            name = self.mesh.split(":", 1)[1]
            if name == "bracket":
                return shapes.bracket()
            if name == "studs":
                return fixtures.stud_mesh()
            if name == "sphere":
                return shapes.icosphere(10.0, 5)
            if name == "plane":
                return shapes.plane(50.0)
            raise ConfigError(f"unknown builtin mesh {name!r}; choose from {BUILTIN_MESHES}")
        return load_mesh(self.resolve(self.mesh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def parse_pose(d) -> Pose:
    """``{"translation": [..], "quaternion": [w, x, y, z]}`` or ``{"matrix": 4x4}``."""
    if not isinstance(d, dict):
        raise ConfigError("pose must be an object")
    extra = set(d) - {"translation", "quaternion", "matrix"}
    if extra:
        raise ConfigError(f"unknown pose keys {sorted(extra)}")
    try:
        if "matrix" in d:
            return Pose.from_matrix(np.asarray(d["matrix"], float))
        return Pose.from_quaternion(d.get("quaternion", [1.0, 0.0, 0.0, 0.0]), d.get("translation", [0.0, 0.0, 0.0]))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad pose: {e}") from None


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        sub = _SECTIONS.get(f.name) if cls is RunConfig else None
        kwargs[f.name] = _build(sub, v, f.name) if sub is not None else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


_SECTIONS = {"sensor": SensorConfig, "encoder": EncoderConfig, "experiment": ExperimentConfig,
             "render": RenderConfig, "localize": LocalizeConfig, "fuse": FuseConfig, "paths": PathsConfig}


def _check(cfg: RunConfig) -> None:
    if cfg.encoder.kind not in ("baseline_mask", "linear_contrastive"):
        raise ConfigError(f"encoder.kind must be baseline_mask or linear_contrastive, got {cfg.encoder.kind!r}")
    if cfg.experiment.kind not in ("single", "multi"):
        raise ConfigError("experiment.kind must be 'single' or 'multi'")
    bad = [m for m in cfg.experiment.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"experiment.methods: unknown {bad}")
    if cfg.experiment.fixture not in (None, "studs"):
        raise ConfigError("experiment.fixture must be null or 'studs'")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    # surface errors in nested sections now rather than mid-run
    cfg.grid_spec()
    cfg.noise_model()
    cfg.registration_params()
    cfg.encoder.train_config(cfg.seed)
    try:
        cfg.sensor.build()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sensor: {e}") from None


def config_from_dict(data: dict, base_dir=".") -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    cfg.base_dir = str(base_dir)
    _check(cfg)
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data, path.parent)


def dump_config(cfg: RunConfig) -> bytes:
    return (json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n").encode()
