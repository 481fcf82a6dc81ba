"""Observability-aware trajectory planning.

The planner maximises the smallest eigenvalue of the accumulated Fisher
information over the free B-spline control points, subject to a per-sample
steering limit, the motion box and a clearance around the sound source. The
local solver is COBYLA (derivative-free, linear approximations); a wrapper keeps
the best feasible iterate so accepted results never get worse.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import spline as spl
from .core import ExtrinsicParams, Pose2, WorldConfig
from .observability import fim_segment, min_eigenvalue
from .sensors import NoiseLevels

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9
_LOG_FLOOR = 1e-300


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanningProblem:
    world: WorldConfig
    psi_hat: ExtrinsicParams
    noise: NoiseLevels
    start: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.0, 0.0))
    n_control_points: int = 8
    samples_per_segment: int = 10
    restarts: int = 4
    max_evals: int = 500
    source_clearance: float = 0.3
    info_samples_per_segment: int | None = None

    def __post_init__(self) -> None:
        if self.n_control_points < 5:
            raise ValueError("n_control_points must be >= 5")
        if self.samples_per_segment < 4:
            raise ValueError("samples_per_segment must be >= 4")
        if self.info_samples_per_segment is not None and self.info_samples_per_segment < 2:
            raise ValueError("info_samples_per_segment must be >= 2")
        if self.restarts < 1 or self.max_evals < 1:
            raise ValueError("restarts and max_evals must be >= 1")

    @property
    def n_segments(self) -> int:
        return self.n_control_points - spl.DEGREE

    @property
    def info_m(self) -> int:
        """Samples per segment for the information score; the constraint grid is
        ``samples_per_segment``. DOA information grows with the sample count while
        LiDAR information per step shrinks with the step length, so the score must
        use the grid the trajectory is executed on."""
        return self.info_samples_per_segment or self.samples_per_segment


@dataclass(frozen=True)
class ConstraintReport:
    max_steering_violation: float
    max_box_violation: float
    max_clearance_violation: float = 0.0

    @property
    def feasible(self) -> bool:
        return (self.max_steering_violation <= FEAS_TOL and self.max_box_violation <= FEAS_TOL
                and self.max_clearance_violation <= FEAS_TOL)


@dataclass
class PlanResult:
    spline: spl.ClampedCubicSpline
    score: float
    feasible: bool
    evaluations: int = 0
    warning: str | None = None
    seed_scores: list[float] = field(default_factory=list)
    accepted_scores: list[float] = field(default_factory=list)


# -- sampling helpers -----------------------------------------------------------------

def _segment_samples(ctrl: np.ndarray, segments: Sequence[int], m: int, initial_heading: float) -> np.ndarray:
    q = np.arange(1, m + 1) / m
    rows0 = np.stack([np.ones_like(q), q, q * q, q * q * q], axis=-1)
    rows1 = np.stack([np.zeros_like(q), np.ones_like(q), 2.0 * q, 3.0 * q * q], axis=-1)
    mats = spl.basis_matrices(len(ctrl))
    pos, tan = [], []
    for j in segments:
        mc = mats[j - 1] @ ctrl[j - 1:j + spl.DEGREE]
        pos.append(rows0 @ mc)
        tan.append(rows1 @ mc)
    pos_a, tan_a = np.concatenate(pos), np.concatenate(tan)
    return np.column_stack([pos_a, spl.headings_from_tangents(tan_a, initial_heading)])


def _prev_pose(ctrl: np.ndarray, first_segment: int, m: int, start: Pose2) -> np.ndarray:
    """Pose just before ``first_segment`` (the start pose for segment 1)."""
    if first_segment == 1:
        return start.as_array()
    segs = range(1, first_segment)
    return _segment_samples(ctrl, segs, m, start.theta)[-1]


def _constraint_vector(samples: np.ndarray, prev_heading: float, problem: PlanningProblem) -> np.ndarray:
    """Margins that must all be >= 0 for feasibility."""
    w = problem.world
    h = np.concatenate([[prev_heading], samples[:, 2]])
    beta = np.abs(np.angle(np.exp(1j * np.diff(h))))
    pts = samples[:, :2]
    lo = pts - np.asarray(w.bounds_min)
    hi = np.asarray(w.bounds_max) - pts
    clear = np.hypot(*(pts - w.source).T) - problem.source_clearance
    return np.concatenate([w.steering_max - beta, lo.ravel(), hi.ravel(), clear])


def _report(samples: np.ndarray, prev_heading: float, problem: PlanningProblem) -> ConstraintReport:
    w = problem.world
    h = np.concatenate([[prev_heading], samples[:, 2]])
    beta = np.abs(np.angle(np.exp(1j * np.diff(h))))
    pts = samples[:, :2]
    box = np.maximum.reduce([np.asarray(w.bounds_min) - pts, pts - np.asarray(w.bounds_max), np.zeros_like(pts)])
    clear = problem.source_clearance - np.hypot(*(pts - w.source).T)
    return ConstraintReport(
        max_steering_violation=float(max(0.0, np.max(beta) - w.steering_max)),
        max_box_violation=float(np.max(box)),
        max_clearance_violation=float(max(0.0, np.max(clear))),
    )


def evaluate_constraints(spline: spl.ClampedCubicSpline, problem: PlanningProblem,
                         first_segment: int = 1) -> ConstraintReport:
    """Steering, box and clearance violations over segments ``first_segment..n-3``."""
    ctrl = spline.control_points
    m = problem.samples_per_segment
    prev = _prev_pose(ctrl, first_segment, m, problem.start)
    samples = _segment_samples(ctrl, range(first_segment, spline.n_segments + 1), m, prev[2])
    return _report(samples, prev[2], problem)


def _fim(ctrl: np.ndarray, segments: Sequence[int], problem: PlanningProblem, prev: np.ndarray,
         psi: ExtrinsicParams) -> np.ndarray:
    samples = _segment_samples(ctrl, segments, problem.info_m, prev[2])
    return fim_segment(samples, psi, problem.noise, problem.world.source, prev_pose=prev)


def segment_fims(spline: spl.ClampedCubicSpline, problem: PlanningProblem) -> list[np.ndarray]:
    ctrl = spline.control_points
    m = problem.info_m
    samples = _segment_samples(ctrl, range(1, spline.n_segments + 1), m, problem.start.theta)
    out, prev = [], problem.start.as_array()
    for j in range(spline.n_segments):
        seg = samples[j * m:(j + 1) * m]
        out.append(fim_segment(seg, problem.psi_hat, problem.noise, problem.world.source, prev_pose=prev))
        prev = seg[-1]
    return out


def score(spline: spl.ClampedCubicSpline, problem: PlanningProblem, prior: np.ndarray | None = None,
          first_segment: int = 1) -> float:
    """Minimum eigenvalue of ``prior + FIM(segments first_segment..n-3)`` at ``problem.psi_hat``."""
    ctrl = spline.control_points
    prev = _prev_pose(ctrl, first_segment, problem.samples_per_segment, problem.start)
    I = _fim(ctrl, range(first_segment, spline.n_segments + 1), problem, prev, problem.psi_hat)
    if prior is not None:
        I = I + prior
    return min_eigenvalue(I)


# -- optimisation core -----------------------------------------------------------------

@dataclass
class _Tracker:
    best_x: np.ndarray | None = None
    best_score: float = -math.inf
    evals: int = 0
    accepted: list[float] = field(default_factory=list)


def optimize_control_points(problem: PlanningProblem, x0: np.ndarray,
                            decode: Callable[[np.ndarray], np.ndarray],
                            first_segment: int = 1, prior: np.ndarray | None = None,
                            max_evals: int | None = None, rhobeg: float = 0.25) -> _Tracker:
    """Maximise the score over ``x`` with ``decode(x) -> (n, 2)`` control points.

    Only segments ``first_segment..`` are scored and constrained; ``prior`` is
    added to their information. Returns the best feasible iterate seen.
    """
    n_seg = problem.n_segments
    segments = range(first_segment, n_seg + 1)
    m = problem.samples_per_segment
    track = _Tracker()
    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def evaluate(x: np.ndarray) -> tuple[float, np.ndarray]:
        key = np.asarray(x, dtype=float).tobytes()
        hit = cache.get(key)
        if hit is not None:
            return hit
        ctrl = decode(x)
        prev = _prev_pose(ctrl, first_segment, m, problem.start)
        samples = _segment_samples(ctrl, segments, m, prev[2])
        g = _constraint_vector(samples, prev[2], problem)
        if problem.info_m != m:
            samples = _segment_samples(ctrl, segments, problem.info_m, prev[2])
        I = fim_segment(samples, problem.psi_hat, problem.noise, problem.world.source, prev_pose=prev)
        if prior is not None:
            I = I + prior
        s = min_eigenvalue(I)
        track.evals += 1
        if np.all(g >= -FEAS_TOL) and s > track.best_score:
            track.best_score = s
            track.best_x = np.array(x, dtype=float)
            track.accepted.append(s)
        cache.clear()
        cache[key] = (s, g)
        return s, g

    evaluate(x0)
    budget = (max_evals or problem.max_evals) - 1
    if budget > 0:
        minimize(
            lambda x: -math.log(max(evaluate(x)[0], _LOG_FLOOR)),
            np.asarray(x0, dtype=float),
            method="COBYLA",
            constraints=[{"type": "ineq", "fun": lambda x: evaluate(x)[1]}],
            options={"maxiter": budget, "rhobeg": rhobeg, "tol": 1e-6},
        )
    return track


_MIN_LEAD = 0.05


def _seed_points(problem: PlanningProblem, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Random seed: the lead distance of ``c_2`` along the start heading, and ``c_3..c_n``."""
    w = problem.world
    lo, hi = np.asarray(w.bounds_min) + 0.1, np.asarray(w.bounds_max) - 0.1
    lead = rng.uniform(0.2, 0.6)
    return lead, rng.uniform(lo, hi, size=(problem.n_control_points - 2, 2))


def lead_decoder(problem: PlanningProblem) -> Callable[[np.ndarray], np.ndarray]:
    """Decision vector ``[r, c_3, ..., c_n]`` to control points.

    ``c_1`` is the start position and ``c_2 = c_1 + (0.05 + r^2) h`` with ``h`` the
    start heading, so the path leaves the start tangent to the robot's heading
    and never needs an in-place turn.
    """
    start = problem.start.t
    head = np.array([math.cos(problem.start.theta), math.sin(problem.start.theta)])

    def decode(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        c2 = start + (_MIN_LEAD + x[0] * x[0]) * head
        return np.vstack([start, c2, x[1:].reshape(-1, 2)])

    return decode


def plan_initial(problem: PlanningProblem, rng_seed: int | None = 0) -> PlanResult:
    """Multi-start COBYLA from random control polygons.

    The first control point is pinned to the start and the second slides along
    the start heading.
    """
    rng = np.random.default_rng(rng_seed)
    decode = lead_decoder(problem)
    best: _Tracker | None = None
    seed_scores, evals = [], 0
    for _ in range(problem.restarts):
        lead, rest = _seed_points(problem, rng)
        x0 = np.concatenate([[math.sqrt(lead - _MIN_LEAD)], rest.ravel()])
        track = optimize_control_points(problem, x0, decode)
        evals += track.evals
        seed_spline = spl.build(decode(x0))
        if evaluate_constraints(seed_spline, problem).feasible:
            seed_scores.append(score(seed_spline, problem))
        if track.best_x is not None and (best is None or track.best_score > best.best_score):
            best = track
    if best is None or best.best_x is None:
        raise PlanningError(f"no feasible trajectory after {problem.restarts} restarts")
    return PlanResult(spl.build(decode(best.best_x)), best.best_score, True, evals,
                      seed_scores=seed_scores, accepted_scores=best.accepted)


def executed_prior(spline: spl.ClampedCubicSpline, completed_segment: int, problem: PlanningProblem) -> np.ndarray:
    """Information already collected on segments ``1..completed_segment`` at ``problem.psi_hat``."""
    ctrl = spline.control_points
    return _fim(ctrl, range(1, completed_segment + 1), problem, problem.start.as_array(), problem.psi_hat)


def replan_tail(spline: spl.ClampedCubicSpline, completed_segment: int, problem: PlanningProblem,
                max_evals: int | None = None) -> PlanResult:
    """Re-optimise the control points that do not influence segments ``1..completed_segment``.

    The executed segments enter as a fixed information prior; constraints are
    checked on the remaining segments only. When no free control point is left,
    or no feasible improvement exists, the spline comes back unchanged with a warning.
    """
    n_seg = spline.n_segments
    if not 1 <= completed_segment < n_seg:
        raise PlanningError(f"completed_segment must lie in [1, {n_seg - 1}]")
    first = completed_segment + 1
    prior = executed_prior(spline, completed_segment, problem)
    current = score(spline, problem, prior=prior, first_segment=first)
    from_segment = completed_segment + 2
    if from_segment > n_seg:
        return PlanResult(spline, current, True, 0, warning="no free control points left")
    keep = from_segment + spl.DEGREE - 2
    fixed = spline.control_points[:keep]

    def decode(x: np.ndarray) -> np.ndarray:
        return np.vstack([fixed, np.asarray(x).reshape(-1, 2)])

    x0 = spline.control_points[keep:].ravel()
    track = optimize_control_points(problem, x0, decode, first_segment=first, prior=prior,
                                    max_evals=max_evals, rhobeg=0.15)
    if track.best_x is None:
        log.warning("replanning after segment %d found no feasible tail; keeping the old one", completed_segment)
        feasible = evaluate_constraints(spline, problem, first).feasible
        return PlanResult(spline, current, feasible, track.evals, warning="infeasible tail")
    new = spl.replace_tail(spline, from_segment, track.best_x.reshape(-1, 2))
    return PlanResult(new, track.best_score, True, track.evals, accepted_scores=track.accepted)
