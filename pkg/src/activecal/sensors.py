"""Noise-free measurement models for wheel odometry, microphone-array DOA and
LiDAR relative pose, plus the additive Gaussian corruption used in simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import Pose2, rot2, wrap_angle

_MIN_SOURCE_DISTANCE = 1e-6


class SensorModelError(ValueError):
    pass


@dataclass(frozen=True)
class OdometryIncrement:
    """Pose change between two samples; ``delta_t`` is expressed in the global frame."""

    delta_t: tuple[float, float]
    delta_theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta_t", (float(self.delta_t[0]), float(self.delta_t[1])))
        object.__setattr__(self, "delta_theta", wrap_angle(float(self.delta_theta)))


@dataclass(frozen=True)
class DoaMeasurement:
    direction: tuple[float, float]
    alpha: float

    @classmethod
    def from_angle(cls, alpha: float) -> "DoaMeasurement":
        a = wrap_angle(alpha)
        return cls((math.cos(a), math.sin(a)), a)

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "DoaMeasurement":
        n = math.hypot(v[0], v[1])
        if n == 0.0:
            raise SensorModelError("zero-length DOA vector")
        return cls((v[0] / n, v[1] / n), math.atan2(v[1], v[0]))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.direction)


@dataclass(frozen=True)
class LidarRelPose:
    """Pose of LiDAR frame k expressed in LiDAR frame k-1."""

    delta_t_L: tuple[float, float]
    delta_theta_L: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta_t_L", (float(self.delta_t_L[0]), float(self.delta_t_L[1])))
        object.__setattr__(self, "delta_theta_L", wrap_angle(float(self.delta_theta_L)))

    @property
    def t(self) -> np.ndarray:
        return np.array(self.delta_t_L)

    def as_pose(self) -> Pose2:
        return Pose2(self.delta_t_L[0], self.delta_t_L[1], self.delta_theta_L)


@dataclass(frozen=True)
class NoiseLevels:
    """Measurement noise standard deviations.

    odom_frac
        Odometry increment std as a fraction of the increment (distance for
        translation, absolute angle for rotation).
    doa_std
        DOA angle std, radians.
    lidar_t_std
        Isotropic LiDAR relative-translation std, meters.
    lidar_theta_std
        LiDAR relative-rotation std, radians.
    """

    odom_frac: float = 0.0
    doa_std: float = 0.0
    lidar_t_std: float = 0.0
    lidar_theta_std: float = 0.0

    def __post_init__(self) -> None:
        for k in ("odom_frac", "doa_std", "lidar_t_std", "lidar_theta_std"):
            v = float(getattr(self, k))
            if not (v >= 0.0 and math.isfinite(v)):
                raise SensorModelError(f"{k} must be finite and >= 0, got {v}")
            object.__setattr__(self, k, v)

    def scaled(self, factor: float) -> "NoiseLevels":
        return NoiseLevels(self.odom_frac * factor, self.doa_std * factor,
                           self.lidar_t_std * factor, self.lidar_theta_std * factor)

    def floored(self, doa: float = 1e-3, lidar_t: float = 1e-4, lidar_theta: float = 1e-4) -> "NoiseLevels":
        """Copy with strictly positive stds, for use as a filter/planner noise model."""
        return replace(self, doa_std=max(self.doa_std, doa), lidar_t_std=max(self.lidar_t_std, lidar_t),
                       lidar_theta_std=max(self.lidar_theta_std, lidar_theta))


def _deg(x: float) -> float:
    return math.radians(x)


NOISE_PRESETS: dict[str, NoiseLevels] = {
    "Lv1": NoiseLevels(0.02, _deg(2.0), 0.005, _deg(0.5)),
    "Lv2": NoiseLevels(0.04, _deg(4.0), 0.01, _deg(2.0)),
    "Lv3": NoiseLevels(0.06, _deg(6.0), 0.03, _deg(3.5)),
    "Lv4": NoiseLevels(0.08, _deg(8.0), 0.06, _deg(5.0)),
    "Lv5": NoiseLevels(0.10, _deg(10.0), 0.1, _deg(6.5)),
}


@dataclass(frozen=True)
class MeasurementBundle:
    """Everything sensed at one step. ``lidar``/``odom`` are absent on the first sample."""

    doa: DoaMeasurement | None = None
    lidar: LidarRelPose | None = None
    odom: OdometryIncrement | None = None


def wheel_kinematics(w_l: float, w_r: float, r: float, d_w: float, dt: float, pose: Pose2) -> Pose2:
    """Advance a differential-drive pose over ``dt`` with constant wheel rates.

    The kinematics are integrated in closed form (constant-curvature arc), which
    is the limit of the Euler scheme as the step shrinks.
    """
    if not (r > 0.0 and d_w > 0.0 and dt > 0.0):
        raise SensorModelError("wheel radius, wheelbase and dt must be positive")
    v = r * (w_l + w_r) / 2.0
    omega = r * (w_r - w_l) / d_w
    th = pose.theta
    dth = omega * dt
    if abs(dth) < 1e-9:
        # second-order expansion avoids 0/0 on straight motion
        dx = v * dt * (math.cos(th) - 0.5 * dth * math.sin(th))
        dy = v * dt * (math.sin(th) + 0.5 * dth * math.cos(th))
    else:
        rad = v / omega
        dx = rad * (math.sin(th + dth) - math.sin(th))
        dy = -rad * (math.cos(th + dth) - math.cos(th))
    return Pose2(pose.x + dx, pose.y + dy, th + dth)


def odometry_truth(prev: Pose2, curr: Pose2) -> OdometryIncrement:
    return OdometryIncrement((curr.x - prev.x, curr.y - prev.y), curr.theta - prev.theta)


def integrate_odometry(pose: Pose2, inc: OdometryIncrement) -> Pose2:
    return Pose2(pose.x + inc.delta_t[0], pose.y + inc.delta_t[1], pose.theta + inc.delta_theta)


def mic_position(robot: Pose2, mic_t: Sequence[float]) -> np.ndarray:
    return robot.t + robot.R @ np.asarray(mic_t, dtype=float)


def doa_truth(robot: Pose2, psi_m: tuple[Sequence[float], float], s: Sequence[float]) -> DoaMeasurement:
    """Unit bearing from the array to the source, in the array frame."""
    mic_t, mic_theta = psi_m
    u = np.asarray(s, dtype=float) - mic_position(robot, mic_t)
    dist = math.hypot(u[0], u[1])
    if dist <= _MIN_SOURCE_DISTANCE:
        raise SensorModelError("sound source coincides with the microphone array")
    d = (robot.R @ rot2(mic_theta)).T @ (u / dist)
    return DoaMeasurement((d[0], d[1]), math.atan2(d[1], d[0]))


def lidar_relpose_truth(prev: Pose2, curr: Pose2, psi_l: tuple[Sequence[float], float]) -> LidarRelPose:
    """LiDAR pose change, written as the rotated lever-arm difference plus robot displacement."""
    lidar_t, lidar_theta = psi_l
    t_l = np.asarray(lidar_t, dtype=float)
    R_prev, R_curr = prev.R, curr.R
    dR = R_curr - R_prev
    dt = curr.t - prev.t
    dtl = (R_prev @ rot2(lidar_theta)).T @ (dR @ t_l + dt)
    return LidarRelPose((dtl[0], dtl[1]), curr.theta - prev.theta)


def _rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def corrupt(bundle: MeasurementBundle, levels: NoiseLevels,
            rng: np.random.Generator | int | None) -> MeasurementBundle:
    """Add zero-mean Gaussian noise to every present measurement.

    Standard normals are drawn for every slot even when the std is zero, so
    runs at different noise levels that share a seed see the same draws.
    """
    g = _rng(rng)
    z = g.standard_normal(8)
    doa = lidar = odom = None
    if bundle.doa is not None:
        doa = DoaMeasurement.from_angle(bundle.doa.alpha + levels.doa_std * z[0])
    if bundle.lidar is not None:
        t = bundle.lidar.t + levels.lidar_t_std * z[1:3]
        lidar = LidarRelPose((t[0], t[1]), bundle.lidar.delta_theta_L + levels.lidar_theta_std * z[3])
    if bundle.odom is not None:
        dt = np.array(bundle.odom.delta_t)
        step = math.hypot(dt[0], dt[1])
        dt = dt + levels.odom_frac * step * z[4:6]
        dth = bundle.odom.delta_theta + levels.odom_frac * abs(bundle.odom.delta_theta) * z[6]
        odom = OdometryIncrement((dt[0], dt[1]), dth)
    return MeasurementBundle(doa, lidar, odom)


def truth_bundle(prev: Pose2 | None, curr: Pose2, psi, source: Sequence[float]) -> MeasurementBundle:
    """Noise-free measurements at ``curr`` (and relative to ``prev`` when given)."""
    doa = doa_truth(curr, psi.mic, source)
    if prev is None:
        return MeasurementBundle(doa)
    return MeasurementBundle(doa, lidar_relpose_truth(prev, curr, psi.lidar), odometry_truth(prev, curr))
