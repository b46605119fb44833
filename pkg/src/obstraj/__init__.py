"""Observability-aware trajectory optimization for IMU-camera extrinsic calibration."""

from .config import ExperimentConfig, load_config
from .lie import LieOrderConfig, ObservabilityMatrix, observability_matrix, rank_diagnostic
from .metrics import SelectionSpec, WindowSpec, e2log_trajectory, make_windows, scalarize, stochastic_trajectory
from .optimizer import CostSpec, Limits, accel_cost, constraint_violations, optimize, random_spline, solve
from .rigid_body import AugmentedState, ExtrinsicParams, KinematicInput, NoiseSpec, VehicleState
from .sim import QualityLevel, SensorRates, ekf_calibrate, run_calibration, simulate_run
from .spline import UniformSpline, load_spline, save_spline

__version__ = "0.1.0"

__all__ = [
    "AugmentedState",
    "CostSpec",
    "ExperimentConfig",
    "ExtrinsicParams",
    "KinematicInput",
    "LieOrderConfig",
    "Limits",
    "NoiseSpec",
    "ObservabilityMatrix",
    "QualityLevel",
    "SelectionSpec",
    "SensorRates",
    "UniformSpline",
    "VehicleState",
    "WindowSpec",
    "accel_cost",
    "constraint_violations",
    "e2log_trajectory",
    "ekf_calibrate",
    "load_config",
    "load_spline",
    "make_windows",
    "observability_matrix",
    "optimize",
    "random_spline",
    "rank_diagnostic",
    "run_calibration",
    "save_spline",
    "scalarize",
    "simulate_run",
    "solve",
    "stochastic_trajectory",
]
