"""Planar geometry, angle arithmetic and the parameter containers shared by every module.

Everything is SI internally (meters, radians). Angles live in the half-open
interval (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"cannot wrap non-finite angle {a!r}")
    r = math.fmod(a + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    return r - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot wrap non-finite angles")
    r = np.fmod(a + math.pi, TWO_PI)
    r = np.where(r <= 0.0, r + TWO_PI, r)
    return r - math.pi


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def drot2(theta: float) -> np.ndarray:
    """Derivative of :func:`rot2` with respect to the angle."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c], [c, -s]])


@dataclass(frozen=True)
class Pose2:
    """Planar pose in the global frame. ``theta`` is normalised on construction."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def t(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def R(self) -> np.ndarray:
        return rot2(self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, v: Sequence[float]) -> "Pose2":
        return cls(v[0], v[1], v[2])

    def compose(self, offset_t: Sequence[float], offset_theta: float) -> "Pose2":
        return compose(self, (offset_t, offset_theta))

    def inverse(self) -> "Pose2":
        t = -self.R.T @ self.t
        return Pose2(t[0], t[1], -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        """Pose of ``other`` expressed in this pose's frame."""
        d = self.R.T @ (other.t - self.t)
        return Pose2(d[0], d[1], other.theta - self.theta)

    def __mul__(self, other: "Pose2") -> "Pose2":
        return compose(self, (other.t, other.theta))


def compose(parent: Pose2, child_offset: tuple[Sequence[float], float]) -> Pose2:
    """Rigid-body composition: place ``child_offset`` (translation, angle) in ``parent``'s frame."""
    off_t, off_theta = child_offset
    t = parent.t + rot2(parent.theta) @ np.asarray(off_t, dtype=float)
    return Pose2(t[0], t[1], parent.theta + off_theta)


@dataclass(frozen=True)
class ExtrinsicParams:
    """Microphone-array and LiDAR poses relative to the wheel-odometry frame.

    Flat order is ``[t_Mx, t_My, theta_M, t_Lx, t_Ly, theta_L]``.
    """

    mic_t: tuple[float, float] = (0.0, 0.0)
    mic_theta: float = 0.0
    lidar_t: tuple[float, float] = (0.0, 0.0)
    lidar_theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mic_t", (float(self.mic_t[0]), float(self.mic_t[1])))
        object.__setattr__(self, "lidar_t", (float(self.lidar_t[0]), float(self.lidar_t[1])))
        object.__setattr__(self, "mic_theta", wrap_angle(float(self.mic_theta)))
        object.__setattr__(self, "lidar_theta", wrap_angle(float(self.lidar_theta)))

    def to_vector(self) -> np.ndarray:
        return np.array([*self.mic_t, self.mic_theta, *self.lidar_t, self.lidar_theta])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "ExtrinsicParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (6,):
            raise ValueError(f"expected a 6-vector, got shape {v.shape}")
        return cls((v[0], v[1]), v[2], (v[3], v[4]), v[5])

    @property
    def mic(self) -> tuple[np.ndarray, float]:
        return np.array(self.mic_t), self.mic_theta

    @property
    def lidar(self) -> tuple[np.ndarray, float]:
        return np.array(self.lidar_t), self.lidar_theta


def param_error(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Signed estimate-minus-truth with the two angle slots wrapped."""
    e = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    e[2] = wrap_angle(e[2])
    e[5] = wrap_angle(e[5])
    return e


PAPER_GROUND_TRUTH = ExtrinsicParams(
    mic_t=(0.3, 0.1), mic_theta=math.radians(60.0),
    lidar_t=(0.4, 0.2), lidar_theta=math.radians(30.0),
)


@dataclass(frozen=True)
class WorldConfig:
    """Static simulation world: sound source, motion box and steering limit."""

    source_position: tuple[float, float] = (0.0, 3.6)
    bounds_min: tuple[float, float] = (-0.25, -0.25)
    bounds_max: tuple[float, float] = (2.25, 2.25)
    steering_max: float = math.radians(30.0)
    ground_truth: ExtrinsicParams = field(default_factory=lambda: PAPER_GROUND_TRUTH)

    def __post_init__(self) -> None:
        for name in ("source_position", "bounds_min", "bounds_max"):
            v = tuple(float(c) for c in getattr(self, name))
            if len(v) != 2 or not all(math.isfinite(c) for c in v):
                raise ValueError(f"{name} must be a finite 2-vector")
            object.__setattr__(self, name, v)
        if not (self.bounds_min[0] < self.bounds_max[0] and self.bounds_min[1] < self.bounds_max[1]):
            raise ValueError("bounds_min must be strictly below bounds_max componentwise")
        if not (0.0 < self.steering_max < math.pi):
            raise ValueError("steering_max must lie in (0, pi)")

    @property
    def source(self) -> np.ndarray:
        return np.array(self.source_position)
