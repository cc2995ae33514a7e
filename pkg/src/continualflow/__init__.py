"""Occlusion-first optical flow with temporal reuse of previous estimates."""

__version__ = "0.1.0"

from .errors import ConfigurationError, FormatError, TrainingDiverged, UsageError  # noqa: E402
from .estimator import ContinualFlowEstimator  # noqa: E402
from .flowops import FlowField, OcclusionMap  # noqa: E402
from .network import ContinualFlowNet, NetConfig, preset_config  # noqa: E402

__all__ = [
    "ConfigurationError",
    "ContinualFlowEstimator",
    "ContinualFlowNet",
    "FlowField",
    "FormatError",
    "NetConfig",
    "OcclusionMap",
    "TrainingDiverged",
    "UsageError",
    "preset_config",
]
