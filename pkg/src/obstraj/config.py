"""Experiment configuration: JSON-compatible dataclasses with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .lie import LieOrderConfig
from .metrics import SelectionSpec
from .optimizer import CostSpec, Limits, SolverOptions
from .rigid_body import ExtrinsicParams, NoiseSpec, quat_exp
from .sim import QualityLevel, SensorRates

METHODS = ("random", "mma", "deterministic", "stochastic")


class ConfigError(ValueError):
    pass


@dataclass
class LimitsConfig:
    v_max: list = field(default_factory=lambda: [2.0, 2.0, 2.0, 1.5])
    a_max: list = field(default_factory=lambda: [5.0, 5.0, 5.0, 3.0])
    eps: list = field(default_factory=lambda: [0.1, 0.1, 0.1, 0.1])


@dataclass
class NoiseConfig:
    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_gw: float = 2.0e-5
    sigma_aw: float = 3.0e-3
    sigma_p: float = 0.01
    sigma_q_deg: float = 0.2
    gravity: list = field(default_factory=lambda: [0.0, 0.0, -9.81])


@dataclass
class ExperimentConfig:
    n_trials: int = 6
    n_knots: int = 15
    dt_knot: float = 0.5
    spline_order: int = 6
    H: float = 0.2
    lie_order: int = 2
    qualities: list = field(default_factory=lambda: [4, 40, 400])
    methods: list = field(default_factory=lambda: list(METHODS))
    selection: list = field(default_factory=lambda: [15, 16, 17])
    scalarization: str = "trace"
    accel_weight: float = 0.0
    freeze_yaw: bool = False
    limits: LimitsConfig = field(default_factory=LimitsConfig)
    end_radius: float = 3.0
    yaw_range: float = 1.0
    wiggle: float = 0.4
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    imu_hz: int = 200
    cam_hz: int = 10
    truth_p_IC: list = field(default_factory=lambda: [0.1, 0.02, -0.03])
    truth_rotvec_IC_deg: list = field(default_factory=lambda: [0.0, 5.0, 0.0])
    init_offset_m: float = 0.05
    init_offset_deg: float = 5.0
    budget: int = 5
    inner_iters: int = 15
    master_seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            if self.n_trials < 1:
                raise ValueError("n_trials must be >= 1")
            bad = [m for m in self.methods if m not in METHODS]
            if bad or not self.methods:
                raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
            if len(set(self.methods)) != len(self.methods):
                raise ValueError("methods must not repeat")
            if self.scalarization not in ("trace", "min_singular_value", "condition_number"):
                raise ValueError(f"unknown scalarization {self.scalarization!r}")
            if self.budget < 0 or self.inner_iters < 1:
                raise ValueError("budget must be >= 0 and inner_iters >= 1")
            if self.init_offset_m < 0 or self.init_offset_deg < 0 or self.end_radius <= 0:
                raise ValueError("offsets must be non-negative and end_radius positive")
            for q in self.qualities:
                QualityLevel(q)
            self.rates()
            self.limit_spec()
            self.noise_spec()
            self.cost_spec("deterministic")
            if self.n_knots < self.spline_order:
                raise ValueError("n_knots must be >= spline_order")
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    # typed views used by the pipeline

    def rates(self) -> SensorRates:
        return SensorRates(self.imu_hz, self.cam_hz)

    def limit_spec(self) -> Limits:
        return Limits(tuple(self.limits.v_max), tuple(self.limits.a_max), tuple(self.limits.eps))

    def noise_spec(self) -> NoiseSpec:
        n = self.noise
        return NoiseSpec(
            n.sigma_g, n.sigma_a, n.sigma_gw, n.sigma_aw, n.sigma_p, float(np.deg2rad(n.sigma_q_deg)), tuple(n.gravity)
        )

    def truth(self) -> ExtrinsicParams:
        return ExtrinsicParams(self.truth_p_IC, quat_exp(np.deg2rad(self.truth_rotvec_IC_deg)))

    def cost_spec(self, kind: str) -> CostSpec:
        return CostSpec(
            kind=kind,
            selection=SelectionSpec(tuple(self.selection)),
            lie=LieOrderConfig(self.lie_order),
            H=self.H,
            cam_dt=1.0 / self.cam_hz,
            imu_dt=1.0 / self.imu_hz,
            mode=self.scalarization,
            accel_weight=self.accel_weight,
            extrinsics=self.truth(),
            g=tuple(self.noise.gravity),
        )

    def solver_options(self) -> SolverOptions:
        return SolverOptions(inner_iters=self.inner_iters, freeze_yaw=self.freeze_yaw)


def _from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n"
