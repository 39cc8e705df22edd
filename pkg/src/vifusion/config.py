"""Run configuration: YAML schema with strict key checking.

The file is organized in sections mirroring the subsystem configs; unknown
keys are errors with full field paths, so typos fail loudly instead of
silently running defaults. Every knob has a default and a config file may
set any subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .camera import Extrinsics, Intrinsics
from .ekf import FilterConfig
from .simulate import CorruptionSpec, TrajectorySpec, WorldSpec
from .state import NoiseModel
from .window_ba import SolverConfig

SCHEMA_VERSION = 1

# camera forward along body +x: optical axis z -> body x, image x -> -y,
# image y -> -z
DEFAULT_R_BC = ((0.0, 0.0, 1.0), (-1.0, 0.0, 0.0), (0.0, -1.0, 0.0))


class ConfigError(ValueError):
    pass


@dataclass
class CameraConfig:
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    r_bc: tuple = DEFAULT_R_BC
    p_bc: tuple = (0.05, 0.0, 0.02)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width,
                          self.height)

    def extrinsics(self) -> Extrinsics:
        return Extrinsics(np.array(self.r_bc, dtype=float),
                          np.array(self.p_bc, dtype=float))


@dataclass
class FilterNoiseConfig:
    """Noise the filter assumes; defaults match the corruption defaults so
    runs are noise-matched unless deliberately detuned."""
    accel_psd: float = 2e-3
    gyro_psd: float = 1.7e-4
    sigma_bad: float = 0.0
    sigma_bgd: float = 0.0
    pixel_sigma: float = 1.0

    def noise_model(self, gravity) -> NoiseModel:
        return NoiseModel(sigma_a=self.accel_psd, sigma_g=self.gyro_psd,
                          sigma_bad=self.sigma_bad, sigma_bgd=self.sigma_bgd,
                          pixel_sigma=self.pixel_sigma,
                          gravity=np.array(gravity, dtype=float))


@dataclass
class InitConfig:
    """Initial belief spread; the mean starts at ground truth with zero
    bias estimates."""
    sigma_xi: float = 1e-3
    sigma_p: float = 1e-3
    sigma_v: float = 1e-2
    sigma_ba: float = 0.05
    sigma_bg: float = 0.01


@dataclass
class RunConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: FilterNoiseConfig = field(default_factory=FilterNoiseConfig)
    init: InitConfig = field(default_factory=InitConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    mode: str = "full"                 # full | ekf-only
    seed: int = 0
    out_dir: str = "out"
    single_thread: bool = False
    dataset: str | None = None         # read instead of simulating
    sequence: str | None = None        # label for comparison tables
    map_init_time: float = 10.0
    feedback_inject: int | None = None  # None: fill to the landmark cap

    def __post_init__(self):
        if self.mode not in ("full", "ekf-only"):
            raise ConfigError(f"run.mode must be full or ekf-only, "
                              f"got {self.mode!r}")

    def label(self) -> str:
        if self.sequence:
            return self.sequence
        if self.dataset:
            return Path(self.dataset).name
        return f"{self.trajectory.kind}-seed{self.seed}"


_SECTIONS = {
    "trajectory": TrajectorySpec,
    "world": WorldSpec,
    "corruption": CorruptionSpec,
    "camera": CameraConfig,
    "noise": FilterNoiseConfig,
    "init": InitConfig,
    "filter": FilterConfig,
    "solver": SolverConfig,
}

_RUN_KEYS = {"mode", "seed", "out_dir", "single_thread", "dataset",
             "sequence", "map_init_time", "feedback_inject"}


def _coerce(value, reference):
    if isinstance(reference, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(reference, float) and isinstance(value, int):
        return float(value)
    return value


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        kwargs[key] = _coerce(value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{path}: {err}") from err


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a YAML run configuration.

    overrides (e.g. from CLI flags) are applied to the run section after
    the file is read.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, "
                          f"got {version!r}")
    cfg = RunConfig()
    run_section = raw.pop("run", {}) or {}
    if not isinstance(run_section, dict):
        raise ConfigError("run: must be a mapping")
    for key, value in run_section.items():
        if key not in _RUN_KEYS:
            raise ConfigError(f"run.{key}: unknown key")
        setattr(cfg, key, value)
    for name, data in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"{name}: unknown section")
        if data is None:
            continue
        if not isinstance(data, dict):
            raise ConfigError(f"{name}: must be a mapping")
        setattr(cfg, name, _build_section(_SECTIONS[name], data, name))
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
    cfg.__post_init__()
    # a run-level seed repoints the simulated trajectory seed as well
    if cfg.trajectory.seed != cfg.seed:
        cfg.trajectory = TrajectorySpec(**{**_spec_dict(cfg.trajectory),
                                           "seed": cfg.seed})
    return cfg


def _spec_dict(spec) -> dict:
    return {f.name: getattr(spec, f.name) for f in fields(spec)}


def default_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.trajectory = TrajectorySpec(**{**_spec_dict(cfg.trajectory),
                                       "seed": cfg.seed})
    return cfg
