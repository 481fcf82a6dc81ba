"""Measurement Jacobians with respect to the extrinsics, Fisher information
assembly and the minimum-eigenvalue observability score.

Scalar functions (``jac_doa``, ``jac_lidar``) follow the closed forms one pose at
a time; the ``*_batch`` variants evaluate the same expressions over arrays of
poses and are what the planner calls in its inner loop.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import ExtrinsicParams, Pose2, rot2
from .sensors import NoiseLevels, SensorModelError

_MIN_SOURCE_DISTANCE = 1e-6


class ObservabilityError(ValueError):
    pass


def _drot_T(theta: float) -> np.ndarray:
    """d R(theta)^T / d theta."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, c], [-c, -s]])


def jac_doa(robot: Pose2, psi_m: tuple[Sequence[float], float], s: Sequence[float]) -> np.ndarray:
    """2x3 Jacobian of the unit DOA vector w.r.t. ``[t_Mx, t_My, theta_M]``."""
    mic_t, mic_theta = psi_m
    Rk = robot.R
    RM = rot2(mic_theta)
    u = np.asarray(s, dtype=float) - (robot.t + Rk @ np.asarray(mic_t, dtype=float))
    d = math.hypot(u[0], u[1])
    if d <= _MIN_SOURCE_DISTANCE:
        raise SensorModelError("sound source coincides with the microphone array")
    A = np.outer(u, u)
    J = np.empty((2, 3))
    J[:, :2] = (Rk @ RM).T @ (-Rk * d * d + A @ Rk) / d**3
    J[:, 2] = _drot_T(mic_theta) @ Rk.T @ u / d
    return J


def jac_lidar(prev: Pose2, curr: Pose2, psi_l: tuple[Sequence[float], float]) -> np.ndarray:
    """3x3 Jacobian of ``[dt_Lx, dt_Ly, dtheta_L]`` w.r.t. ``[t_Lx, t_Ly, theta_L]``; last row is zero."""
    lidar_t, lidar_theta = psi_l
    Rp, Rc = prev.R, curr.R
    RL = rot2(lidar_theta)
    dR = Rc - Rp
    J = np.zeros((3, 3))
    J[:2, :2] = (Rp @ RL).T @ dR
    J[:2, 2] = _drot_T(lidar_theta) @ Rp.T @ (dR @ np.asarray(lidar_t, dtype=float) + (curr.t - prev.t))
    return J


def _rot_batch(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def jac_doa_batch(poses: np.ndarray, mic_t: np.ndarray, mic_theta: float, s: np.ndarray) -> np.ndarray:
    """``(K, 2, 3)`` DOA Jacobians for an ``(K, 3)`` array of robot poses."""
    Rk = _rot_batch(poses[:, 2])
    u = s[None, :] - poses[:, :2] - Rk @ np.asarray(mic_t, dtype=float)
    d2 = np.einsum("ki,ki->k", u, u)
    d = np.sqrt(d2)
    if np.any(d <= _MIN_SOURCE_DISTANCE):
        raise SensorModelError("sound source coincides with the microphone array")
    RkRM_T = np.swapaxes(Rk @ rot2(mic_theta), 1, 2)
    # (-d^2 I + u u^T) Rk
    inner = -d2[:, None, None] * Rk + u[:, :, None] * np.einsum("ki,kij->kj", u, Rk)[:, None, :]
    J = np.empty((len(poses), 2, 3))
    J[:, :, :2] = RkRM_T @ inner / (d2 * d)[:, None, None]
    J[:, :, 2] = np.einsum("ij,kjl,kl->ki", _drot_T(mic_theta), np.swapaxes(Rk, 1, 2), u) / d[:, None]
    return J


def jac_lidar_batch(prev: np.ndarray, curr: np.ndarray, lidar_t: np.ndarray, lidar_theta: float) -> np.ndarray:
    """``(K, 2, 3)`` translation rows of the LiDAR Jacobian for consecutive pose pairs."""
    Rp, Rc = _rot_batch(prev[:, 2]), _rot_batch(curr[:, 2])
    dR = Rc - Rp
    J = np.empty((len(prev), 2, 3))
    J[:, :, :2] = np.swapaxes(Rp @ rot2(lidar_theta), 1, 2) @ dR
    lever = dR @ np.asarray(lidar_t, dtype=float) + (curr[:, :2] - prev[:, :2])
    J[:, :, 2] = np.einsum("ij,kjl,kl->ki", _drot_T(lidar_theta), np.swapaxes(Rp, 1, 2), lever)
    return J


def _as_array(poses: Sequence[Pose2] | np.ndarray) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.reshape(-1, 3)
    return np.array([p.as_array() for p in poses]).reshape(-1, 3)


def _check_noise(noise: NoiseLevels) -> None:
    if noise.doa_std <= 0.0 or noise.lidar_t_std <= 0.0:
        raise ObservabilityError("noise covariance is singular (zero DOA or LiDAR translation std)")


def fim_segment(poses: Sequence[Pose2] | np.ndarray, psi: ExtrinsicParams, noise: NoiseLevels,
                source: Sequence[float], prev_pose: Pose2 | np.ndarray | None = None) -> np.ndarray:
    """Fisher information of one trajectory segment, ``sum_k J_k^T N_k^-1 J_k``.

    Every pose contributes a DOA term to the microphone block. Consecutive
    pairs (starting from ``prev_pose`` when given) contribute LiDAR terms to the
    LiDAR block. The DOA noise is modelled as ``doa_std^2 I_2`` on the unit vector.
    """
    _check_noise(noise)
    arr = _as_array(poses)
    if len(arr) == 0:
        raise ObservabilityError("need at least one pose")
    I = np.zeros((6, 6))
    mic_t, mic_th = psi.mic
    Jd = jac_doa_batch(arr, mic_t, mic_th, np.asarray(source, dtype=float))
    I[:3, :3] = np.einsum("kri,krj->ij", Jd, Jd) / noise.doa_std**2
    if prev_pose is not None:
        p = prev_pose.as_array() if isinstance(prev_pose, Pose2) else np.asarray(prev_pose, dtype=float)
        arr = np.vstack([p[None, :], arr])
    if len(arr) >= 2:
        lt, lth = psi.lidar
        Jl = jac_lidar_batch(arr[:-1], arr[1:], lt, lth)
        I[3:, 3:] = np.einsum("kri,krj->ij", Jl, Jl) / noise.lidar_t_std**2
    return I


def fim_total(segment_fims: Sequence[np.ndarray]) -> np.ndarray:
    if len(segment_fims) == 0:
        raise ObservabilityError("fim_total needs at least one segment")
    out = np.zeros((6, 6))
    for m in segment_fims:
        out = out + np.asarray(m, dtype=float)
    return out


def jacobi_eigenvalues(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> list[float]:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Stops once the off-diagonal Frobenius norm drops below ``tol`` times the
    matrix Frobenius norm.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ObservabilityError("expected a square matrix")
    if not np.all(np.isfinite(a)):
        raise ObservabilityError("matrix has non-finite entries")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    A = a.tolist()
    scale = math.sqrt(sum(x * x for row in A for x in row))
    if scale == 0.0:
        return [0.0] * n
    thresh = tol * scale
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n):
            row = A[p]
            for q in range(p + 1, n):
                off += row[q] * row[q]
        if math.sqrt(2.0 * off) < thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p][q]
                if apq == 0.0:
                    continue
                app, aqq = A[p][p], A[q][q]
                theta = (aqq - app) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                A[p][p] = app - t * apq
                A[q][q] = aqq + t * apq
                A[p][q] = A[q][p] = 0.0
                for r in range(n):
                    if r == p or r == q:
                        continue
                    arp, arq = A[r][p], A[r][q]
                    A[r][p] = A[p][r] = c * arp - s * arq
                    A[r][q] = A[q][r] = s * arp + c * arq
    return [A[i][i] for i in range(n)]


def min_eigenvalue(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (symmetrised internally)."""
    return min(jacobi_eigenvalues(m))


def lidar_translation_block(fim: np.ndarray) -> np.ndarray:
    return np.asarray(fim)[3:5, 3:5]
