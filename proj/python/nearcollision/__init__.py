"""Synthetic near-collision data, baselines and a multi-stream time-to-collision regressor."""

from nearcollision._core import (
    FRAME_RATE,
    HORIZON_FRAMES,
    NEAR_COLLISION_RADIUS,
    ConfigError,
    Dataset,
    MotionModel,
    NearcolError,
    Network,
    Scene,
    SimConfig,
    build_dataset,
    f1_score,
    fit_velocity,
    grad_check,
    interval_report,
    label_frames,
    read_manifest,
    read_scene,
    regression_metrics,
    simulate_batch,
    simulate_scene,
    time_bins,
    time_to_near_collision,
    time_to_radius,
)

__all__ = [
    "FRAME_RATE",
    "HORIZON_FRAMES",
    "NEAR_COLLISION_RADIUS",
    "ConfigError",
    "Dataset",
    "MotionModel",
    "NearcolError",
    "Network",
    "Scene",
    "SimConfig",
    "build_dataset",
    "f1_score",
    "fit_velocity",
    "grad_check",
    "interval_report",
    "label_frames",
    "read_manifest",
    "read_scene",
    "regression_metrics",
    "simulate_batch",
    "simulate_scene",
    "time_bins",
    "time_to_near_collision",
    "time_to_radius",
]
