"""Experiment configuration, presets and ``--set`` overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .augment import PHI_KINDS, SIM2REAL_ORDER, PerturbationConfig
from .caps_sac import CapsConfig, SacConfig
from .env import SPEED_PRESETS, CameraConfig, RewardConfig, SpeedConfig, VehicleConfig
from .nets import ArchConfig


class ReplayConfig(BaseModel):
    global_capacity: int = Field(45000, ge=1)
    local_capacity: int = Field(2000, ge=1)
    flush_threshold: int = Field(200, ge=1)
    mode: Literal["uniform", "prioritized"] = "prioritized"
    priority_alpha: float = Field(0.6, ge=0)
    priority_beta: float = Field(0.4, ge=0)
    warmup: int = Field(5000, ge=1)


class BudgetConfig(BaseModel):
    env_steps: int = Field(300_000, ge=0)
    updates: int | None = Field(None, ge=0)
    steps_per_update: int = Field(4, ge=1)  # synchronous mode only
    publish_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(5000, ge=1)


class EvalConfig(BaseModel):
    runs: int = Field(15, ge=1)
    speed_preset: str = "c1"
    reset_jitter: float = Field(0.05, ge=0)
    heading_jitter: float = Field(0.02, ge=0)


class SweepConfig(BaseModel):
    lambda_T_values: list[float] = Field(default_factory=lambda: [0.5, 0.8, 1.0, 1.3])
    seeds: list[int] = Field(default_factory=lambda: [0])


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "sac_caps"
    track: str | None = None  # None selects the bundled desk circuit
    camera: CameraConfig = Field(default_factory=CameraConfig)
    vehicle: VehicleConfig = Field(default_factory=VehicleConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    speed_preset: str = "c1"
    speed: SpeedConfig | None = None  # explicit range overrides the preset
    sac: SacConfig = Field(default_factory=SacConfig)
    caps: CapsConfig = Field(default_factory=CapsConfig)
    perturbation: PerturbationConfig = Field(default_factory=PerturbationConfig)
    translator: str | None = None
    steering_penalty: float = Field(0.0, ge=0)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    replay: ReplayConfig = Field(default_factory=ReplayConfig)
    workers: int = Field(3, ge=1)
    mode: Literal["threaded", "sync"] = "threaded"
    budget: BudgetConfig = Field(default_factory=BudgetConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    reset_jitter: float = Field(0.1, ge=0)
    heading_jitter: float = Field(0.05, ge=0)
    seed: int = 0

    @field_validator("track")
    @classmethod
    def _track_exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"track file {v!r} does not exist")
        return v

    @field_validator("speed_preset")
    @classmethod
    def _known_speed(cls, v):
        if v not in SPEED_PRESETS:
            raise ValueError(f"unknown speed preset {v!r}; known: {sorted(SPEED_PRESETS)}")
        return v

    def speed_config(self, preset: str | None = None) -> SpeedConfig:
        if preset is not None:
            return SPEED_PRESETS[preset]
        return self.speed or SPEED_PRESETS[self.speed_preset]

    def caps_config(self) -> CapsConfig:
        return self.caps.model_copy(update={"phi": self.perturbation})

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.camera.height, self.camera.width, 6)


def _preset(name: str, **changes) -> ExperimentConfig:
    cfg = ExperimentConfig(name=name)
    return apply_overrides(cfg, changes)


def _presets() -> dict:
    dr = {"perturbation.sim2real_enabled": list(SIM2REAL_ORDER)}
    no_caps = {"caps.lambda_T": 0.0, "caps.lambda_S": 0.0}
    return {
        "sac_only": lambda: _preset("sac_only", **no_caps),
        "sac_steering_penalty": lambda: _preset("sac_steering_penalty", steering_penalty=0.003, **no_caps),
        "sac_temporal": lambda: _preset("sac_temporal", **{"caps.lambda_T": 1.0, "caps.lambda_S": 0.0}),
        "sac_spatial": lambda: _preset("sac_spatial", **{"caps.lambda_T": 0.0, "caps.lambda_S": 1.0}),
        "sac_caps": lambda: _preset("sac_caps"),
        "sac_dr": lambda: _preset("sac_dr", **no_caps, **dr),
        "sac_dr_caps": lambda: _preset("sac_dr_caps", **dr),
        "sac_translator": lambda: _preset("sac_translator", translator="identity", **no_caps),
        "sac_translator_caps": lambda: _preset("sac_translator_caps", translator="identity"),
        "lambda_sweep": lambda: _preset("lambda_sweep", **{"caps.lambda_T": 1.0, "caps.lambda_S": 0.0}),
        "spatial_ablation": lambda: _preset("spatial_ablation", **{"perturbation.phi_enabled": list(PHI_KINDS)}),
    }


PRESETS = _presets()
# the six model variants compared for smoothness and sim-to-real transfer
MODEL_PRESETS = ("sac_only", "sac_caps", "sac_dr", "sac_dr_caps", "sac_translator", "sac_translator_caps")
COMPONENT_PRESETS = ("sac_only", "sac_steering_penalty", "sac_temporal", "sac_spatial", "sac_caps")


class ConfigError(ValueError):
    pass


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}") from None


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply dotted-path overrides and re-validate the whole config."""
    data = cfg.model_dump()
    for path, value in overrides.items():
        node = data
        keys = path.split(".")
        fresh = False
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key {path!r}")
            if node[k] is None:
                node[k] = {}
                fresh = True
            node = node[k]
        if not isinstance(node, dict) or (keys[-1] not in node and not fresh):
            raise ConfigError(f"unknown config key {path!r}")
        node[keys[-1]] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_set_args(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_diff(a: ExperimentConfig, b: ExperimentConfig, ignore=("name",)) -> dict:
    """Flattened ``{dotted.key: (a_value, b_value)}`` for every differing leaf."""

    def flat(d, prefix=""):
        out = {}
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict):
                out.update(flat(v, key + "."))
            else:
                out[key] = v
        return out

    fa, fb = flat(a.model_dump()), flat(b.model_dump())
    keys = sorted(set(fa) | set(fb))
    return {k: (fa.get(k), fb.get(k)) for k in keys if fa.get(k) != fb.get(k) and k not in ignore}


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
