"""Clamped cubic B-spline trajectories.

Segment ``j`` (1-based, ``1 <= j <= n - 3``) is written in matrix form

    T_j(q) = [1, q, q^2, q^3] @ M_j @ C_j,    q in (0, 1]

with ``C_j`` the four control points ``c_j .. c_{j+3}``. The per-segment basis
matrices are derived once from the Cox-de Boor recursion carried out on
polynomials in ``q``, so the clamped end segments get their own (non-uniform)
matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .core import Pose2

DEGREE = 3
_TANGENT_EPS = 1e-9


class SplineError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentParam:
    j: int
    q: float

    def __post_init__(self) -> None:
        if not float(self.q) > 0.0 or not float(self.q) <= 1.0:
            raise SplineError(f"q must lie in (0, 1], got {self.q}")


def clamped_knots(n: int, degree: int = DEGREE) -> np.ndarray:
    """Uniform clamped knot vector with ``degree + 1``-fold end knots, domain ``[0, n - degree]``."""
    inner = np.arange(1, n - degree, dtype=float)
    end = float(n - degree)
    return np.concatenate([np.zeros(degree + 1), inner, np.full(degree + 1, end)])


def _segment_basis_polys(knots: np.ndarray, span: int, offset: float, degree: int) -> list[np.ndarray]:
    """Cox-de Boor on polynomials in q, where u = offset + q on knot span ``span``."""
    # N[k] holds the polynomial coefficients of N_{span-deg+k, deg}
    N = [np.array([1.0])]
    for deg in range(1, degree + 1):
        out = []
        for idx in range(span - deg, span + 1):
            acc = np.array([0.0])
            # left term uses N_{idx, deg-1}, right term N_{idx+1, deg-1}
            left_pos = idx - (span - deg + 1)
            right_pos = left_pos + 1
            den = knots[idx + deg] - knots[idx]
            if den > 0.0 and 0 <= left_pos < len(N):
                lin = np.array([offset - knots[idx], 1.0]) / den
                acc = P.polyadd(acc, P.polymul(lin, N[left_pos]))
            den = knots[idx + deg + 1] - knots[idx + 1]
            if den > 0.0 and 0 <= right_pos < len(N):
                lin = np.array([knots[idx + deg + 1] - offset, -1.0]) / den
                acc = P.polyadd(acc, P.polymul(lin, N[right_pos]))
            out.append(acc)
        N = out
    return [np.pad(c, (0, degree + 1 - len(c))) for c in N]


@lru_cache(maxsize=64)
def basis_matrices(n: int) -> np.ndarray:
    """Stack of the ``n - 3`` basis matrices, shape ``(n-3, 4, 4)``; rows are powers of q."""
    knots = clamped_knots(n)
    mats = np.empty((n - DEGREE, DEGREE + 1, DEGREE + 1))
    for j in range(1, n - DEGREE + 1):
        span = j + DEGREE - 1
        polys = _segment_basis_polys(knots, span, float(j - 1), DEGREE)
        mats[j - 1] = np.stack(polys, axis=1)
    mats.setflags(write=False)
    return mats


def _power_rows(q: np.ndarray, order: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    ones, zeros = np.ones_like(q), np.zeros_like(q)
    if order == 0:
        return np.stack([ones, q, q * q, q * q * q], axis=-1)
    if order == 1:
        return np.stack([zeros, ones, 2.0 * q, 3.0 * q * q], axis=-1)
    if order == 2:
        return np.stack([zeros, zeros, 2.0 * ones, 6.0 * q], axis=-1)
    raise SplineError(f"derivative order must be 0, 1 or 2, got {order}")


@dataclass(frozen=True)
class ClampedCubicSpline:
    control_points: np.ndarray
    knots: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.control_points)

    @property
    def n_segments(self) -> int:
        return self.n - DEGREE

    @property
    def degree(self) -> int:
        return DEGREE

    def segment_points(self, j: int) -> np.ndarray:
        return self.control_points[j - 1:j + DEGREE]

    def _check_j(self, j: int) -> None:
        if int(j) != j or not 1 <= j <= self.n_segments:
            raise SplineError(f"segment index {j} outside [1, {self.n_segments}]")

    def eval_segment(self, j: int, q: np.ndarray, order: int = 0) -> np.ndarray:
        """Vectorised evaluation on one segment; ``q`` may include 0 (the left limit)."""
        self._check_j(j)
        rows = _power_rows(q, order)
        return rows @ basis_matrices(self.n)[j - 1] @ self.segment_points(j)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClampedCubicSpline):
            return NotImplemented
        return np.array_equal(self.control_points, other.control_points)

    def __hash__(self) -> int:
        return hash(self.control_points.tobytes())


def build(control_points: Sequence[Sequence[float]]) -> ClampedCubicSpline:
    pts = np.array(control_points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise SplineError("control points must be a sequence of 2-vectors")
    if len(pts) < DEGREE + 2:
        raise SplineError(f"need at least {DEGREE + 2} control points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise SplineError("control points must be finite")
    pts.setflags(write=False)
    knots = clamped_knots(len(pts))
    knots.setflags(write=False)
    return ClampedCubicSpline(pts, knots)


def evaluate(spline: ClampedCubicSpline, sp: SegmentParam) -> np.ndarray:
    return spline.eval_segment(sp.j, np.array([sp.q]))[0]


def derivative(spline: ClampedCubicSpline, sp: SegmentParam, order: int = 1) -> np.ndarray:
    """Analytic derivative with respect to the segment parameter q."""
    if order not in (1, 2):
        raise SplineError(f"derivative order must be 1 or 2, got {order}")
    return spline.eval_segment(sp.j, np.array([sp.q]), order)[0]


def headings_from_tangents(tangents: np.ndarray, initial: float = 0.0) -> np.ndarray:
    """atan2 of each tangent; near-zero tangents inherit the previous heading."""
    out = np.arctan2(tangents[:, 1], tangents[:, 0])
    small = np.hypot(tangents[:, 0], tangents[:, 1]) < _TANGENT_EPS
    if small.any():
        prev = initial
        for i in range(len(out)):
            if small[i]:
                out[i] = prev
            prev = out[i]
    return out


def sample_array(spline: ClampedCubicSpline, samples_per_segment: int,
                 segments: Sequence[int] | None = None, initial_heading: float = 0.0) -> np.ndarray:
    """Poses as an ``(N, 3)`` array of ``[x, y, heading]``; q = i/m for i = 1..m per segment."""
    if samples_per_segment < 2:
        raise SplineError("samples_per_segment must be >= 2")
    segs = range(1, spline.n_segments + 1) if segments is None else segments
    q = np.arange(1, samples_per_segment + 1) / samples_per_segment
    rows0, rows1 = _power_rows(q, 0), _power_rows(q, 1)
    mats = basis_matrices(spline.n)
    pos, tan = [], []
    for j in segs:
        spline._check_j(j)
        mc = mats[j - 1] @ spline.segment_points(j)
        pos.append(rows0 @ mc)
        tan.append(rows1 @ mc)
    pos_a, tan_a = np.concatenate(pos), np.concatenate(tan)
    heading = headings_from_tangents(tan_a, initial_heading)
    return np.column_stack([pos_a, heading])


def sample_poses(spline: ClampedCubicSpline, samples_per_segment: int) -> list[Pose2]:
    arr = sample_array(spline, samples_per_segment)
    return [Pose2(x, y, h) for x, y, h in arr]


def tail_size(spline: ClampedCubicSpline, from_segment: int) -> int:
    """Number of control points that :func:`replace_tail` swaps out."""
    return spline.n - (from_segment + DEGREE - 2)


def replace_tail(spline: ClampedCubicSpline, from_segment: int,
                 new_tail_points: Sequence[Sequence[float]]) -> ClampedCubicSpline:
    """Swap control points with 1-based index >= ``from_segment + 2``.

    Points ``c_1 .. c_{from_segment+1}`` are kept, so segments up to
    ``from_segment - 2`` are untouched and position, velocity and acceleration
    at the start of segment ``from_segment - 1`` are preserved.
    """
    if int(from_segment) != from_segment or not 2 <= from_segment <= spline.n_segments:
        raise SplineError(f"from_segment {from_segment} outside [2, {spline.n_segments}]")
    keep = from_segment + DEGREE - 2
    tail = np.asarray(new_tail_points, dtype=float).reshape(-1, 2)
    if len(tail) != spline.n - keep:
        raise SplineError(f"expected {spline.n - keep} tail points, got {len(tail)}")
    return build(np.vstack([spline.control_points[:keep], tail]))


def path_length(spline: ClampedCubicSpline, samples_per_segment: int = 200) -> float:
    pts = sample_array(spline, samples_per_segment)[:, :2]
    pts = np.vstack([spline.control_points[:1], pts])
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def total_turning(headings: np.ndarray) -> float:
    d = np.diff(np.unwrap(headings))
    return float(np.sum(np.abs(d)))


__all__ = [
    "ClampedCubicSpline", "SegmentParam", "SplineError", "build", "evaluate", "derivative",
    "sample_poses", "sample_array", "replace_tail", "tail_size", "basis_matrices",
    "clamped_knots", "headings_from_tangents", "path_length", "total_turning",
]
