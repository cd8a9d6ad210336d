"""Run configuration: a strict JSON schema over the per-module config dataclasses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .incremental import DataConfig, IncrementalConfig
from .koopman import TrainConfig
from .mpc import MpcConfig
from .plants import PlantId, PlantSpec, default_spec

_PLANT_OVERRIDABLE = ("dt", "physical_params", "kp", "kd", "u_min", "u_max", "command_low",
                      "command_high", "command_hold", "init_low", "init_high")


@dataclass
class PlantSection:
    id: str = "Pendulum"
    overrides: dict = field(default_factory=dict)

    def build(self) -> PlantSpec:
        bad = sorted(set(self.overrides) - set(_PLANT_OVERRIDABLE))
        if bad:
            raise ConfigError(f"unknown plant override(s): {', '.join(bad)}")
        try:
            return default_spec(PlantId(self.id), **self.overrides)
        except ValueError as exc:
            raise ConfigError(f"invalid plant section: {exc}") from exc


@dataclass
class TrainSection:
    latent_dim: int = 10
    epochs: int = 50
    batch_size: int = 16
    lr0: float = 1e-3
    gamma: float = 0.99
    alpha: float = 0.1
    seed: int = 0
    hidden_dim: int = 64
    n_blocks: int = 2

    def build(self) -> TrainConfig:
        kw = dataclasses.asdict(self)
        kw.pop("latent_dim")
        return TrainConfig(**kw).validate()


@dataclass
class MpcSection:
    H: int = 16
    Q: float | list = 1.0
    R: float | list = 1e-3
    F: float | list = 1.0
    u_min: list | None = None
    u_max: list | None = None
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iters: int = 10_000
    rho: float = 1.0
    auto_rho: bool = True
    eps_fail: float = 0.08
    T_max: int = 200

    def build(self, spec: PlantSpec) -> MpcConfig:
        kw = dataclasses.asdict(self)
        for k in ("eps_fail", "T_max"):
            kw.pop(k)
        kw["u_min"] = spec.u_min if self.u_min is None else self.u_min
        kw["u_max"] = spec.u_max if self.u_max is None else self.u_max
        return MpcConfig(**kw).validate(spec.state_dim, spec.control_dim)


@dataclass
class IncrementalSection:
    n0: int = 4
    delta_n: int = 8
    J0: int = 50
    max_outer_iters: int = 3
    min_outer_iters: int = 2
    eps_conv: float = 0.02
    eval_repo_size: int = 100
    min_epochs: int = 2
    seed: int = 0
    grow_data: bool = True
    grow_dim: bool = True

    def build(self, mpc: MpcSection) -> IncrementalConfig:
        return IncrementalConfig(eps_fail=mpc.eps_fail, T_max=mpc.T_max,
                                 **dataclasses.asdict(self))


@dataclass
class DataSection:
    n_traj: int = 30
    l_init: int = 100
    repo_size: int = 100
    repo_length: int = 201
    noise_halfwidth: float = 0.05
    data_seed: int = 0
    repo_seed: int = 1
    eval_seed: int = 2

    def build(self) -> DataConfig:
        return DataConfig(**dataclasses.asdict(self)).validate()


@dataclass
class TheorySection:
    N: int = 256
    C: float = 0.9
    alpha: float = 1.0
    basis_seed: int = 0
    n: int = 32
    m_grid: list = field(default_factory=lambda: [1_000, 3_000, 10_000, 30_000, 100_000])
    trials: int = 10
    seed: int = 0
    delta: float = 0.05
    n_grid: list = field(default_factory=lambda: [4, 8, 16, 32, 64, 128])
    quad_nodes: int = 16_384
    sampling_slope_band: list = field(default_factory=lambda: [-0.65, -0.35])
    projection_slope_band: list = field(default_factory=lambda: [-0.8, -0.3])


_SECTIONS = {
    "plant": PlantSection,
    "data": DataSection,
    "train": TrainSection,
    "mpc": MpcSection,
    "incremental": IncrementalSection,
    "theory": TheorySection,
}


@dataclass
class RunConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    incremental: IncrementalSection = field(default_factory=IncrementalSection)
    theory: TheorySection = field(default_factory=TheorySection)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(raw) - set(_SECTIONS) - {"output_dir"})
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        kw = {}
        for name, section_cls in _SECTIONS.items():
            kw[name] = _build_section(name, section_cls, raw.get(name, {}))
        if "output_dir" in raw:
            if not isinstance(raw["output_dir"], str):
                raise ConfigError("output_dir must be a string")
            kw["output_dir"] = raw["output_dir"]
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            path, value = item.split("=", 1)
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            keys = path.split(".")
            if keys == ["output_dir"]:
                raw["output_dir"] = parsed
                continue
            if len(keys) < 2 or keys[0] not in raw or not isinstance(raw[keys[0]], dict):
                raise ConfigError(f"unknown configuration section in {path!r}")
            node = raw[keys[0]]
            for k in keys[1:-1]:
                if not isinstance(node.get(k), dict):
                    raise ConfigError(f"cannot descend into {path!r}")
                node = node[k]
            if len(keys) == 2 and keys[1] not in node:
                raise ConfigError(f"unknown key {path!r}")
            node[keys[-1]] = parsed
        return RunConfig.from_dict(raw)


def _build_section(name, section_cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(section_cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    for key, value in raw.items():
        _check_type(f"{name}.{key}", known[key], value)
    return section_cls(**raw)


def _check_type(path, f, value):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = (isinstance(value, (int, float)) and not isinstance(value, bool)) or \
            ("list" in str(f.type) and isinstance(value, list))
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = value is None or isinstance(value, (list, int, float))
    if not ok:
        raise ConfigError(f"{path} has invalid type {type(value).__name__}")


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        cfg = RunConfig.from_json(text)
    return cfg.with_overrides(overrides) if overrides else cfg
