"""Experiment engine: trajectory strategies, single calibration runs, Monte Carlo
aggregation and the noise / initial-error / strategy sweeps.

Errors and 3-sigma widths are carried in SI units (meters, radians) inside
``RunResult``; ``SummaryStats`` is the reporting boundary and expresses angles in
degrees.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import spline as spl
from .acoustic import ArrayGeometry, srp_phat, synthesize
from .core import ExtrinsicParams, Pose2, WorldConfig, param_error
from .estimator import (ConvergenceMonitor, EstimatorError, GaussianBelief, LidarOdometry, PoseSource,
                        PoseSourceMode, select_pose_source, update)
from .planner import PlanningError, PlanningProblem, plan_initial, replan_tail
from .scan_matching import LineMap, ScanMatchError, match, raycast, rectangle_room
from .sensors import (NOISE_PRESETS, DoaMeasurement, LidarRelPose, MeasurementBundle, NoiseLevels, corrupt,
                      integrate_odometry, truth_bundle)

log = logging.getLogger(__name__)

COMPONENTS = ("tMx", "tMy", "thM", "tLx", "tLy", "thL")
ANGLE_IDX = (2, 5)
OUTLIER_POSITION = 3.0
OUTLIER_ANGLE = math.radians(90.0)

# Initial-guess error standard deviations (position m, position m, angle rad), applied to both sensors.
INIT_ERROR_LEVELS: dict[str, tuple[float, float, float]] = {
    "Err1": (0.2, 0.2, math.radians(10.0)),
    "Err2": (0.5, 0.5, math.radians(30.0)),
    "Err3": (0.8, 0.8, math.radians(50.0)),
    "Err4": (1.0, 1.0, math.radians(70.0)),
}
INIT_SWEEP_NOISE = "Lv2"


class HarnessError(RuntimeError):
    pass


class Strategy(str, enum.Enum):
    ACTIVE = "Active"
    FIGURE8 = "Figure8"
    CIRCLE = "Circle"
    LINE = "Line"
    RANDOM = "Random"


@dataclass(frozen=True)
class SignalConfig:
    """Settings for signal-level runs: DOA from SRP-PHAT on synthetic audio and
    LiDAR motion from scan matching in a rectangular room."""

    snr_db: float = 20.0
    doa_grid_deg: float = 1.0
    mic_radius: float = 0.05
    n_mics: int = 6
    room_min: tuple[float, float] = (-3.0, -1.5)
    room_max: tuple[float, float] = (6.0, 4.5)
    lidar_res_deg: float = 1.0
    lidar_max_range: float = 12.0
    range_noise_std: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: Strategy = Strategy.ACTIVE
    noise: NoiseLevels | str = "Lv1"
    init_error: str | None = None
    runs: int = 50
    base_seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    sample_dt: float = 0.1
    steps: int = 400
    n_control_points: int = 8
    plan_samples_per_segment: int = 10
    plan_restarts: int = 4
    plan_max_evals: int = 500
    replan_max_evals: int = 150
    lidar_var_threshold: float = 1e-3
    pose_switching: bool = True
    ekf_iterations: int = 3
    ekf_second_order: bool = True
    step_tol: float = 1e-4
    convergence_window: int = 20
    stop_on_convergence: bool = True
    mode: str = "geometric"
    signal: SignalConfig = field(default_factory=SignalConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.ekf_iterations < 1:
            raise ValueError("ekf_iterations must be >= 1")
        if isinstance(self.noise, str) and self.noise not in NOISE_PRESETS:
            raise ValueError(f"unknown noise preset {self.noise!r}")
        if self.init_error is not None and self.init_error not in INIT_ERROR_LEVELS:
            raise ValueError(f"unknown init error level {self.init_error!r}")
        if self.mode not in ("geometric", "signal"):
            raise ValueError("mode must be 'geometric' or 'signal'")
        if not self.sample_dt > 0.0:
            raise ValueError("sample_dt must be positive")
        n_seg = self.n_control_points - spl.DEGREE
        if self.strategy is Strategy.ACTIVE and self.steps % n_seg != 0:
            raise ValueError(f"steps ({self.steps}) must be a multiple of the segment count ({n_seg})")

    @property
    def noise_levels(self) -> NoiseLevels:
        return NOISE_PRESETS[self.noise] if isinstance(self.noise, str) else self.noise

    @property
    def noise_label(self) -> str:
        return self.noise if isinstance(self.noise, str) else "custom"


@dataclass
class RunResult:
    final_estimate: ExtrinsicParams
    final_cov: np.ndarray
    error_trace: np.ndarray
    sigma_trace: np.ndarray
    steps: int
    outlier: bool
    pose_source_trace: list[str] = field(default_factory=list)
    converged_at: int | None = None
    failure: str | None = None

    @property
    def final_error(self) -> np.ndarray:
        return self.error_trace[-1]

    @property
    def final_sigma3(self) -> np.ndarray:
        return self.sigma_trace[-1]


def is_outlier(err: np.ndarray) -> bool:
    e = np.asarray(err, dtype=float)
    if not np.all(np.isfinite(e)):
        return True
    pos = np.abs(e[[0, 1, 3, 4]])
    ang = np.abs(e[list(ANGLE_IDX)])
    return bool(np.any(pos > OUTLIER_POSITION) or np.any(ang > OUTLIER_ANGLE))


# -- trajectories -------------------------------------------------------------------------

def _with_tangent_headings(xy: np.ndarray, tangents: np.ndarray) -> list[Pose2]:
    heads = spl.headings_from_tangents(tangents)
    return [Pose2(x, y, h) for (x, y), h in zip(xy, heads)]


def fixed_trajectory(kind: Strategy | str, world: WorldConfig, steps: int = 400, seed: int = 0) -> list[Pose2]:
    """``steps + 1`` poses of a fixed calibration path inside ``world``'s box.

    Line runs from (0, 0) to (2, 2). Circle is the unit circle about (1, 1),
    entered at (1, 0) heading along +x. Figure8 is the Lissajous curve
    ``(1 + sin t, 1 + sin 2t)``, which crosses itself at (1, 1). Random is a
    clamped spline through seeded control points starting at the origin.
    """
    kind = Strategy(kind)
    if kind is Strategy.ACTIVE:
        raise HarnessError("Active trajectories come from the planner, not fixed_trajectory")
    u = np.linspace(0.0, 1.0, steps + 1)
    if kind is Strategy.LINE:
        xy = np.column_stack([2.0 * u, 2.0 * u])
        tan = np.tile([1.0, 1.0], (len(u), 1))
    elif kind is Strategy.CIRCLE:
        phi = 2.0 * np.pi * u
        xy = np.column_stack([1.0 + np.sin(phi), 1.0 - np.cos(phi)])
        tan = np.column_stack([np.cos(phi), np.sin(phi)])
    elif kind is Strategy.FIGURE8:
        t = 2.0 * np.pi * u
        xy = np.column_stack([1.0 + np.sin(t), 1.0 + np.sin(2.0 * t)])
        tan = np.column_stack([np.cos(t), 2.0 * np.cos(2.0 * t)])
    else:
        rng = np.random.default_rng(seed)
        lo = np.asarray(world.bounds_min) + 0.1
        hi = np.asarray(world.bounds_max) - 0.1
        ctrl = np.vstack([[0.0, 0.0], rng.uniform(lo, hi, size=(7, 2))])
        s = spl.build(ctrl)
        per = int(math.ceil(steps / s.n_segments))
        arr = spl.sample_array(s, per)
        idx = np.round(np.linspace(0, len(arr) - 1, steps)).astype(int)
        first = arr[0, 2]
        return [Pose2(0.0, 0.0, first)] + [Pose2(*row) for row in arr[idx]]
    return _with_tangent_headings(xy, tan)


# -- single run ---------------------------------------------------------------------------

def _run_streams(base_seed: int, run_index: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, meas_ss = np.random.SeedSequence([int(base_seed), int(run_index)]).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(meas_ss)


def initial_guess(config: ExperimentConfig, rng: np.random.Generator) -> ExtrinsicParams:
    """Zero when no init-error level is set, else ground truth plus Gaussian noise.

    The standard normals are drawn even for the zero guess so that every level
    shares the same per-run draws.
    """
    z = rng.standard_normal(6)
    if config.init_error is None:
        return ExtrinsicParams()
    sx, sy, sth = INIT_ERROR_LEVELS[config.init_error]
    std = np.array([sx, sy, sth, sx, sy, sth])
    return ExtrinsicParams.from_vector(config.world.ground_truth.to_vector() + std * z)


def planning_problem(config: ExperimentConfig, psi_hat: ExtrinsicParams) -> PlanningProblem:
    """Constraints on the planning grid, information on the execution grid."""
    n_seg = config.n_control_points - spl.DEGREE
    return PlanningProblem(config.world, psi_hat, config.noise_levels.floored(),
                           n_control_points=config.n_control_points,
                           samples_per_segment=config.plan_samples_per_segment,
                           restarts=config.plan_restarts, max_evals=config.plan_max_evals,
                           info_samples_per_segment=max(2, config.steps // n_seg))


@lru_cache(maxsize=64)
def _cached_plan(problem: PlanningProblem, seed: int):
    return plan_initial(problem, rng_seed=seed)


class _SignalFrontend:
    """Replaces the noisy geometric DOA and LiDAR measurements with ones extracted from
    synthetic microphone frames and synthetic scans."""

    def __init__(self, config: ExperimentConfig, rng: np.random.Generator) -> None:
        sc = config.signal
        self.sc = sc
        self.geometry = ArrayGeometry.circular(sc.n_mics, sc.mic_radius)
        self.room: LineMap = rectangle_room(sc.room_min, sc.room_max)
        self.rng = rng
        self.prev_scan = None

    def doa(self, true_doa: DoaMeasurement) -> DoaMeasurement:
        frame = synthesize(self.geometry, true_doa.alpha, snr_db=self.sc.snr_db, rng_seed=self.rng)
        return DoaMeasurement.from_angle(srp_phat(frame, self.geometry, math.radians(self.sc.doa_grid_deg),
                                                  band=(2900.0, 5100.0)))

    def scan(self, robot: Pose2, psi: ExtrinsicParams):
        lt, lth = psi.lidar
        return raycast(self.room, robot.compose(lt, lth), math.radians(self.sc.lidar_res_deg),
                       self.sc.lidar_max_range, self.sc.range_noise_std, self.rng)

    def lidar(self, scan, guess: LidarRelPose) -> LidarRelPose:
        prev, self.prev_scan = self.prev_scan, scan
        res = match(prev, scan, guess)
        if not res.converged:
            log.warning("scan matching did not converge in %d iterations", res.iterations)
        return res.relpose


class _Runner:
    def __init__(self, config: ExperimentConfig, run_index: int) -> None:
        self.cfg = config
        rng_init, self.rng = _run_streams(config.base_seed, run_index)
        self.psi_true = config.world.ground_truth
        self.truth_vec = self.psi_true.to_vector()
        self.source = config.world.source
        self.noise = config.noise_levels
        self.filter_noise = self.noise.floored()
        psi0 = initial_guess(config, rng_init)
        self.belief = GaussianBelief.initial(psi0)
        self.source_mode = PoseSource(PoseSourceMode.WHEEL, config.lidar_var_threshold)
        self.monitor = ConvergenceMonitor(config.step_tol, config.convergence_window)
        self.signal = _SignalFrontend(config, self.rng) if config.mode == "signal" else None
        self.true_prev: Pose2 | None = None
        self.est_prev: Pose2 | None = None
        self.lidar_odo: LidarOdometry | None = None
        self.errors: list[np.ndarray] = []
        self.sigmas: list[np.ndarray] = []
        self.sources: list[str] = []
        self.converged_at: int | None = None
        self.converged = False

    def step(self, true_pose: Pose2) -> None:
        """Simulate and fuse one sample and refresh the convergence flag."""
        z = corrupt(truth_bundle(self.true_prev, true_pose, self.psi_true, self.source), self.noise, self.rng)
        if self.est_prev is None:
            est = true_pose
        else:
            est = integrate_odometry(self.est_prev, z.odom)
        if self.signal is not None:
            z = self._signal_measurements(z, true_pose, est)
        doa_pose = None
        if self.lidar_odo is not None and z.lidar is not None:
            self.lidar_odo.step(z.lidar)
            doa_pose = self.lidar_odo.robot_pose(self.belief.mean)
        before = self.belief.vector
        self.belief = update(self.belief, est, self.est_prev, z, self.filter_noise, self.source, doa_pose=doa_pose,
                             iterations=self.cfg.ekf_iterations,
                             second_order=self.cfg.ekf_second_order)
        if self.cfg.pose_switching and self.lidar_odo is None:
            self.source_mode = select_pose_source(self.belief, self.source_mode)
            if self.source_mode.mode is PoseSourceMode.LIDAR:
                self.lidar_odo = LidarOdometry.start(est)
        self.true_prev, self.est_prev = true_pose, est
        self.errors.append(param_error(self.belief.vector, self.truth_vec))
        self.sigmas.append(3.0 * self.belief.sigma())
        self.sources.append(self.source_mode.mode.value)
        self.converged = self.monitor.observe(before, self.belief.vector)
        if self.converged and self.converged_at is None:
            self.converged_at = len(self.errors) - 1

    def should_stop(self) -> bool:
        """Checked at segment boundaries only: a segment, once started, is always completed."""
        return self.cfg.stop_on_convergence and self.converged

    def _signal_measurements(self, z: MeasurementBundle, true_pose: Pose2, est: Pose2) -> MeasurementBundle:
        sig = self.signal
        doa = sig.doa(truth_bundle(None, true_pose, self.psi_true, self.source).doa)
        scan = sig.scan(true_pose, self.psi_true)
        if self.true_prev is None:
            sig.prev_scan = scan
            return MeasurementBundle(doa, None, z.odom)
        # odometry prediction of the LiDAR motion seeds the matcher
        lt, lth = self.belief.mean.lidar
        guess = self.est_prev.compose(lt, lth).between(est.compose(lt, lth))
        lidar = sig.lidar(scan, LidarRelPose((guess.x, guess.y), guess.theta))
        return MeasurementBundle(doa, lidar, z.odom)

    def result(self, failure: str | None = None) -> RunResult:
        if not self.errors:
            nan = np.full((1, 6), np.nan)
            return RunResult(self.belief.mean, np.array(self.belief.cov), nan, nan, 0, True, [], None, failure)
        err = np.array(self.errors)
        outlier = failure is not None or is_outlier(err[-1])
        return RunResult(self.belief.mean, np.array(self.belief.cov), err, np.array(self.sigmas), len(err),
                         outlier, self.sources, self.converged_at, failure)


def _run_active(runner: _Runner, config: ExperimentConfig) -> None:
    plan = _cached_plan(planning_problem(config, runner.belief.mean), int(config.base_seed))
    spline = plan.spline
    n_seg = spline.n_segments
    m = config.steps // n_seg
    start = Pose2(0.0, 0.0, 0.0)
    runner.step(start)
    heading = start.theta
    for j in range(1, n_seg + 1):
        samples = spl.sample_array(spline, m, segments=[j], initial_heading=heading)
        for row in samples:
            runner.step(Pose2(*row))
        heading = float(samples[-1, 2])
        if runner.should_stop():
            return
        if j < n_seg:
            problem = planning_problem(config, runner.belief.mean)
            spline = replan_tail(spline, j, problem, max_evals=config.replan_max_evals).spline


def run_once(config: ExperimentConfig, run_index: int = 0) -> RunResult:
    """One calibration run; deterministic in ``(config.base_seed, run_index)``.

    Planner and filter failures end the run early and mark it as an outlier.
    """
    runner = _Runner(config, run_index)
    try:
        if config.strategy is Strategy.ACTIVE:
            _run_active(runner, config)
        else:
            # fixed paths get the same stopping cadence as the Active segments
            m = max(1, config.steps // (config.n_control_points - spl.DEGREE))
            for i, pose in enumerate(fixed_trajectory(config.strategy, config.world, config.steps, config.base_seed)):
                runner.step(pose)
                if i > 0 and i % m == 0 and runner.should_stop():
                    break
    except (PlanningError, EstimatorError, ScanMatchError) as exc:
        log.warning("run %d failed: %s", run_index, exc)
        return runner.result(failure=f"{type(exc).__name__}: {exc}")
    return runner.result()


# -- Monte Carlo --------------------------------------------------------------------------

def _to_report_units(v: np.ndarray) -> np.ndarray:
    out = np.array(v, dtype=float)
    out[..., list(ANGLE_IDX)] = np.degrees(out[..., list(ANGLE_IDX)])
    return out


@dataclass(frozen=True)
class SummaryStats:
    """Monte Carlo summary in reporting units (meters and degrees)."""

    runs: int
    outliers: int
    rmse: tuple[float, ...]
    coverage: float
    coverage_per_component: tuple[float, ...]
    quartiles: tuple[tuple[float, ...], ...]
    sigma3_final_mean: tuple[float, ...]
    sigma3_initial_mean: tuple[float, ...]

    def as_dict(self) -> dict:
        named = lambda v: {c: float(x) for c, x in zip(COMPONENTS, v)}  # noqa: E731
        return {
            "runs": self.runs,
            "outliers": self.outliers,
            "rmse": named(self.rmse),
            "coverage_3sigma": self.coverage,
            "coverage_3sigma_per_component": named(self.coverage_per_component),
            "quartiles": {c: dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))
                          for c, q in zip(COMPONENTS, self.quartiles)},
            "sigma3_initial_mean": named(self.sigma3_initial_mean),
            "sigma3_final_mean": named(self.sigma3_final_mean),
        }


def summarize(results: Sequence[RunResult]) -> SummaryStats:
    """RMSE over non-outlier runs (angles wrapped, then in degrees), 3-sigma coverage at the
    final step and quartiles of the signed final errors."""
    if not results:
        raise HarnessError("no runs to summarize")
    good = [r for r in results if not r.outlier]
    if not good:
        raise HarnessError(f"all {len(results)} runs are outliers")
    fe = np.array([r.final_error for r in good])
    fs = np.array([r.final_sigma3 for r in good])
    inside = np.abs(fe) <= fs
    rmse = np.sqrt(np.mean(fe * fe, axis=0))
    q = np.percentile(_to_report_units(fe), [0, 25, 50, 75, 100], axis=0).T
    s0 = np.array([r.sigma_trace[0] for r in good])
    return SummaryStats(
        runs=len(results),
        outliers=len(results) - len(good),
        rmse=tuple(_to_report_units(rmse).tolist()),
        coverage=float(np.mean(np.all(inside, axis=1))),
        coverage_per_component=tuple(np.mean(inside, axis=0).tolist()),
        quartiles=tuple(tuple(row) for row in q.tolist()),
        sigma3_final_mean=tuple(_to_report_units(fs.mean(axis=0)).tolist()),
        sigma3_initial_mean=tuple(_to_report_units(s0.mean(axis=0)).tolist()),
    )


def _run_indexed(args: tuple[ExperimentConfig, int]) -> RunResult:
    return run_once(*args)


def run_all(config: ExperimentConfig, threads: int = 1) -> list[RunResult]:
    """Every run of ``config`` in run-index order; ``threads > 1`` uses worker processes."""
    jobs = [(config, i) for i in range(config.runs)]
    if threads <= 1 or config.runs == 1:
        return [_run_indexed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_indexed, jobs, chunksize=max(1, config.runs // (4 * threads))))


def run_monte_carlo(config: ExperimentConfig, threads: int = 1) -> SummaryStats:
    return summarize(run_all(config, threads))


def compare_strategies(configs: Sequence[ExperimentConfig], threads: int = 1) -> dict[str, SummaryStats]:
    if not configs:
        return {}
    w, nz = configs[0].world, configs[0].noise_levels
    for c in configs[1:]:
        if c.world != w or c.noise_levels != nz:
            raise HarnessError("strategy comparison needs a shared world and noise level")
    return {c.strategy.value: run_monte_carlo(c, threads) for c in configs}


def sweep_noise(config: ExperimentConfig, levels: Sequence[str] = tuple(NOISE_PRESETS),
                threads: int = 1) -> dict[str, SummaryStats]:
    return {lv: run_monte_carlo(replace(config, noise=lv), threads) for lv in levels}


def sweep_init(config: ExperimentConfig, levels: Sequence[str] = tuple(INIT_ERROR_LEVELS),
               threads: int = 1, noise: NoiseLevels | str = INIT_SWEEP_NOISE) -> dict[str, SummaryStats]:
    """Initial-error sweep; runs at the LV2 noise preset unless ``noise`` says otherwise."""
    return {lv: run_monte_carlo(replace(config, init_error=lv, noise=noise), threads) for lv in levels}
