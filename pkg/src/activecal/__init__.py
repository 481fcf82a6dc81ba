"""Observability-aware active extrinsic calibration of a microphone array and a
LiDAR on a wheeled robot, in a 2-D simulator."""

__version__ = "0.1.0"

from .core import ExtrinsicParams, Pose2, WorldConfig, wrap_angle  # noqa: E402
from .sensors import NOISE_PRESETS, NoiseLevels  # noqa: E402

__all__ = ["ExtrinsicParams", "Pose2", "WorldConfig", "wrap_angle", "NOISE_PRESETS", "NoiseLevels", "__version__"]
