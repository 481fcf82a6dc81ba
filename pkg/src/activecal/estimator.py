"""EKF over the static extrinsic vector, and the switch that swaps wheel odometry
for LiDAR odometry once the LiDAR extrinsics have settled.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import ExtrinsicParams, Pose2, wrap_angle
from .observability import jac_doa, jac_lidar
from .sensors import (LidarRelPose, MeasurementBundle, NoiseLevels, doa_truth,
                      lidar_relpose_truth)


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianBelief:
    mean: ExtrinsicParams
    cov: np.ndarray

    def __post_init__(self) -> None:
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def initial(cls, mean: ExtrinsicParams | None = None, cov: np.ndarray | None = None) -> "GaussianBelief":
        return cls(mean or ExtrinsicParams(), np.eye(6) if cov is None else cov)

    @property
    def vector(self) -> np.ndarray:
        return self.mean.to_vector()

    def sigma(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def predict(belief: GaussianBelief) -> GaussianBelief:
    """Static parameters: the prediction step is the identity."""
    return belief


def _linearize(psi: ExtrinsicParams, pose: Pose2, prev_pose: Pose2 | None, z: MeasurementBundle,
               noise: NoiseLevels, source, doa_pose: Pose2 | None):
    """Stacked Jacobian, residual ``z - h(psi)`` and noise variances of the usable rows."""
    H_rows, r_rows, n_rows = [], [], []
    if z.doa is not None:
        dp = doa_pose if doa_pose is not None else pose
        J = np.zeros((2, 6))
        J[:, :3] = jac_doa(dp, psi.mic, source)
        H_rows.append(J)
        r_rows.append(z.doa.vector - doa_truth(dp, psi.mic, source).vector)
        n_rows.append(np.full(2, noise.doa_std**2))
    if z.lidar is not None and prev_pose is not None:
        J = np.zeros((2, 6))
        J[:, 3:] = jac_lidar(prev_pose, pose, psi.lidar)[:2]
        H_rows.append(J)
        r_rows.append(z.lidar.t - lidar_relpose_truth(prev_pose, pose, psi.lidar).t)
        n_rows.append(np.full(2, noise.lidar_t_std**2))
    if not H_rows:
        return None
    return np.vstack(H_rows), np.concatenate(r_rows), np.concatenate(n_rows)


_HESS_STEP = 1e-5


def _hessians(psi: ExtrinsicParams, pose: Pose2, prev_pose: Pose2 | None, z: MeasurementBundle,
              source, doa_pose: Pose2 | None) -> np.ndarray:
    """Second derivatives ``(rows, 6, 6)`` of the usable measurement rows, by central
    differences of the analytic Jacobians."""
    blocks = []
    if z.doa is not None:
        dp = doa_pose if doa_pose is not None else pose
        mt, mth = psi.mic
        base = np.array([mt[0], mt[1], mth])
        Hs = np.zeros((2, 6, 6))
        for p in range(3):
            e = np.zeros(3)
            e[p] = _HESS_STEP
            jp = jac_doa(dp, ((base + e)[:2], (base + e)[2]), source)
            jm = jac_doa(dp, ((base - e)[:2], (base - e)[2]), source)
            Hs[:, :3, p] = (jp - jm) / (2.0 * _HESS_STEP)
        blocks.append(Hs)
    if z.lidar is not None and prev_pose is not None:
        lt, lth = psi.lidar
        base = np.array([lt[0], lt[1], lth])
        Hs = np.zeros((2, 6, 6))
        for p in range(3):
            e = np.zeros(3)
            e[p] = _HESS_STEP
            jp = jac_lidar(prev_pose, pose, ((base + e)[:2], (base + e)[2]))[:2]
            jm = jac_lidar(prev_pose, pose, ((base - e)[:2], (base - e)[2]))[:2]
            Hs[:, 3:, 3 + p] = (jp - jm) / (2.0 * _HESS_STEP)
        blocks.append(Hs)
    Hs = np.concatenate(blocks)
    return 0.5 * (Hs + np.swapaxes(Hs, 1, 2))


def linearization_covariance(hess: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``C_ij = 1/2 tr(A_i P A_j P)``: the variance a Gaussian prior ``P`` induces through the
    quadratic terms of the measurement model."""
    AP = hess @ P
    return 0.5 * np.einsum("iab,jba->ij", AP, AP)


def _angle_aware_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    d[2] = wrap_angle(d[2])
    d[5] = wrap_angle(d[5])
    return d


def update(belief: GaussianBelief, pose: Pose2, prev_pose: Pose2 | None, z: MeasurementBundle,
           noise: NoiseLevels, source, doa_pose: Pose2 | None = None, iterations: int = 1,
           second_order: bool = False) -> GaussianBelief:
    """One EKF correction.

    ``pose``/``prev_pose`` are the robot poses used for the LiDAR rows; the DOA
    rows use ``doa_pose`` when given (LiDAR-odometry pose source), else ``pose``.
    The DOA innovation is the unit-vector difference; the covariance update is
    in Joseph form and symmetrised.

    ``iterations=1`` is the standard EKF, linearised at the prior mean. Larger
    values relinearise at the running estimate (iterated EKF, a Gauss-Newton
    solve of the same MAP problem), which matters when the prior mean is far
    from the truth and the measurements are precise.

    ``second_order`` adds the Gaussian second-order term ``1/2 tr(A_i P A_j P)``
    to the innovation covariance, which keeps early updates from trusting a
    linearisation taken far from the truth; it vanishes as ``P`` shrinks.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x0 = belief.vector
    P = belief.cov
    x = x0.copy()
    lin = None
    for _ in range(iterations):
        psi = ExtrinsicParams.from_vector(x)
        lin_i = _linearize(psi, pose, prev_pose, z, noise, source, doa_pose)
        if lin_i is None:
            return belief
        H, r, nvar = lin_i
        if np.any(nvar <= 0.0):
            raise EstimatorError("measurement noise covariance must be positive definite")
        N = np.diag(nvar)
        if second_order:
            N = N + linearization_covariance(_hessians(psi, pose, prev_pose, z, source, doa_pose), P)
        S = H @ P @ H.T + N
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise EstimatorError("innovation covariance is not positive definite") from exc
        # K = P H^T S^-1 via two triangular solves
        K = np.linalg.solve(L.T, np.linalg.solve(L, H @ P)).T
        x_new = x0 + K @ (r + H @ _angle_aware_diff(x, x0))
        step = _angle_aware_diff(x_new, x)
        x, lin = x_new, (H, N, K)
        if float(np.linalg.norm(step)) < 1e-12:
            break
    H, N, K = lin
    IKH = np.eye(6) - K @ H
    P_new = IKH @ P @ IKH.T + K @ N @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    return GaussianBelief(ExtrinsicParams.from_vector(x), P_new)


class PoseSourceMode(enum.Enum):
    WHEEL = "WheelOdometry"
    LIDAR = "LidarOdometry"


@dataclass(frozen=True)
class PoseSource:
    mode: PoseSourceMode = PoseSourceMode.WHEEL
    lidar_var_threshold: float = 1e-3

    def __post_init__(self) -> None:
        if not self.lidar_var_threshold > 0.0:
            raise ValueError("lidar_var_threshold must be positive")


def select_pose_source(belief: GaussianBelief, current: PoseSource) -> PoseSource:
    """Latching switch to LiDAR odometry once trace(P_L) drops below the threshold."""
    if current.mode is PoseSourceMode.LIDAR:
        return current
    if float(np.trace(belief.cov[3:, 3:])) < current.lidar_var_threshold:
        return PoseSource(PoseSourceMode.LIDAR, current.lidar_var_threshold)
    return current


@dataclass
class LidarOdometry:
    """Robot pose from LiDAR relative poses accumulated since the switch.

    ``motion`` is the LiDAR frame at step k expressed in the LiDAR frame at the
    switch. The robot pose is ``anchor * L * motion * L^-1`` with ``L`` the
    LiDAR extrinsic pose, evaluated with the caller's current estimate so the
    mapping sharpens as that estimate converges.
    """

    anchor: Pose2
    motion: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.0, 0.0))

    @classmethod
    def start(cls, robot: Pose2) -> "LidarOdometry":
        return cls(robot)

    def step(self, rel: LidarRelPose) -> None:
        self.motion = self.motion * rel.as_pose()

    def robot_pose(self, psi: ExtrinsicParams) -> Pose2:
        lt, lth = psi.lidar
        L = Pose2(lt[0], lt[1], lth)
        return self.anchor * L * self.motion * L.inverse()


@dataclass
class ConvergenceMonitor:
    """Declares convergence after ``window`` consecutive updates with step norm below ``step_tol``."""

    step_tol: float = 1e-4
    window: int = 20
    _count: int = field(default=0, init=False)

    def observe(self, before: np.ndarray, after: np.ndarray) -> bool:
        d = np.asarray(after) - np.asarray(before)
        d[2] = wrap_angle(d[2])
        d[5] = wrap_angle(d[5])
        if float(np.linalg.norm(d)) < self.step_tol:
            self._count += 1
        else:
            self._count = 0
        return self.converged

    @property
    def converged(self) -> bool:
        return self._count >= self.window


def sigma3(belief: GaussianBelief) -> np.ndarray:
    return 3.0 * belief.sigma()
