"""Command-line entry point.

Configuration is a JSON document with angles in degrees and lengths in meters;
this module is the only place that converts between degrees and radians.
Exit codes: 0 success, 2 configuration error, 3 runtime or planner failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from . import spline as spl
from .core import ExtrinsicParams, WorldConfig
from .harness import (COMPONENTS, INIT_SWEEP_NOISE, ExperimentConfig, HarnessError, RunResult, SignalConfig,
                      Strategy, SummaryStats, planning_problem, compare_strategies, run_all, run_once,
                      summarize, sweep_init, sweep_noise)
from .planner import PlanningError, lead_decoder, evaluate_constraints, plan_initial, score
from .sensors import NoiseLevels

log = logging.getLogger("activecal")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "ACTIVECAL_SEED"
CSV_HEADER = (["step", "time_s"] + [f"err_{c}" for c in ("tMx", "tMy", "thM_deg", "tLx", "tLy", "thL_deg")]
              + [f"sig3_{c}" for c in ("tMx", "tMy", "thM_deg", "tLx", "tLy", "thL_deg")] + ["pose_source"])


class ConfigError(Exception):
    pass


# -- configuration schema -----------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


Vec2 = tuple[float, float]


class ExtrinsicsIn(_Strict):
    mic_t: Vec2 = (0.3, 0.1)
    mic_theta_deg: float = 60.0
    lidar_t: Vec2 = (0.4, 0.2)
    lidar_theta_deg: float = 30.0

    def to_params(self) -> ExtrinsicParams:
        return ExtrinsicParams(self.mic_t, math.radians(self.mic_theta_deg),
                               self.lidar_t, math.radians(self.lidar_theta_deg))


class WorldIn(_Strict):
    source_position: Vec2 = (0.0, 3.6)
    bounds_min: Vec2 = (-0.25, -0.25)
    bounds_max: Vec2 = (2.25, 2.25)
    steering_max_deg: float = Field(30.0, gt=0.0, lt=180.0)
    ground_truth: ExtrinsicsIn = Field(default_factory=ExtrinsicsIn)


class NoiseIn(_Strict):
    odom_frac: float = Field(ge=0.0)
    doa_std_deg: float = Field(ge=0.0)
    lidar_t_std: float = Field(ge=0.0)
    lidar_theta_std_deg: float = Field(ge=0.0)

    def to_levels(self) -> NoiseLevels:
        return NoiseLevels(self.odom_frac, math.radians(self.doa_std_deg), self.lidar_t_std,
                           math.radians(self.lidar_theta_std_deg))


class PlannerIn(_Strict):
    n_control_points: int = Field(8, ge=5)
    samples_per_segment: int = Field(10, ge=4)
    restarts: int = Field(4, ge=1)
    max_evals: int = Field(500, ge=1)
    replan_max_evals: int = Field(150, ge=1)


class EstimatorIn(_Strict):
    lidar_var_threshold: float = Field(1e-3, gt=0.0)
    pose_switching: bool = True
    step_tol: float = Field(1e-4, gt=0.0)
    convergence_window: int = Field(20, ge=1)
    stop_on_convergence: bool = True
    iterations: int = Field(3, ge=1)
    second_order: bool = True


class SignalIn(_Strict):
    snr_db: float = 20.0
    doa_grid_deg: float = Field(1.0, gt=0.0, le=10.0)
    mic_radius: float = Field(0.05, gt=0.0)
    n_mics: int = Field(6, ge=2)
    room_min: Vec2 = (-3.0, -1.5)
    room_max: Vec2 = (6.0, 4.5)
    lidar_res_deg: float = Field(1.0, gt=0.0)
    lidar_max_range: float = Field(12.0, gt=0.0)
    range_noise_std: float = Field(0.0, ge=0.0)


class CliConfig(_Strict):
    strategy: Literal["Active", "Figure8", "Circle", "Line", "Random"] = "Active"
    noise_level: Union[Literal["Lv1", "Lv2", "Lv3", "Lv4", "Lv5"], NoiseIn] = "Lv1"
    init_error: Optional[Literal["Err1", "Err2", "Err3", "Err4"]] = None
    runs: int = Field(50, ge=1)
    seed: int = Field(0, ge=0)
    sample_dt: float = Field(0.1, gt=0.0)
    steps: int = Field(400, ge=1)
    mode: Literal["geometric", "signal"] = "geometric"
    world: WorldIn = Field(default_factory=WorldIn)
    planner: PlannerIn = Field(default_factory=PlannerIn)
    estimator: EstimatorIn = Field(default_factory=EstimatorIn)
    signal: SignalIn = Field(default_factory=SignalIn)

    @field_validator("world")
    @classmethod
    def _box(cls, w: WorldIn) -> WorldIn:
        if not (w.bounds_min[0] < w.bounds_max[0] and w.bounds_min[1] < w.bounds_max[1]):
            raise ValueError("bounds_min must be below bounds_max componentwise")
        return w

    def to_experiment(self) -> ExperimentConfig:
        w = self.world
        world = WorldConfig(w.source_position, w.bounds_min, w.bounds_max, math.radians(w.steering_max_deg),
                            w.ground_truth.to_params())
        noise = self.noise_level if isinstance(self.noise_level, str) else self.noise_level.to_levels()
        p, e, s = self.planner, self.estimator, self.signal
        return ExperimentConfig(
            strategy=Strategy(self.strategy), noise=noise, init_error=self.init_error, runs=self.runs,
            base_seed=self.seed, world=world, sample_dt=self.sample_dt, steps=self.steps,
            n_control_points=p.n_control_points, plan_samples_per_segment=p.samples_per_segment,
            plan_restarts=p.restarts, plan_max_evals=p.max_evals, replan_max_evals=p.replan_max_evals,
            lidar_var_threshold=e.lidar_var_threshold, pose_switching=e.pose_switching, step_tol=e.step_tol,
            convergence_window=e.convergence_window, stop_on_convergence=e.stop_on_convergence,
            ekf_iterations=e.iterations, ekf_second_order=e.second_order, mode=self.mode,
            signal=SignalConfig(s.snr_db, s.doa_grid_deg, s.mic_radius, s.n_mics, s.room_min, s.room_max,
                                s.lidar_res_deg, s.lidar_max_range, s.range_noise_std),
        )


def load_config(path: str | None, runs: int | None = None, seed: int | None = None) -> CliConfig:
    """Read and validate a config file; ``--seed`` beats ``ACTIVECAL_SEED``, which beats the file."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from exc
    if seed is not None:
        data["seed"] = seed
    if runs is not None:
        data["runs"] = runs
    try:
        cfg = CliConfig.model_validate(data)
        cfg.to_experiment()
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


# -- metadata and formatting --------------------------------------------------------------

def config_hash(cfg: CliConfig) -> str:
    canon = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5, check=False)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _metadata(cfg: CliConfig, **extra) -> dict:
    meta = {"seed": cfg.seed, "git_describe": git_describe(), "config_hash": config_hash(cfg),
            "version": __version__, "strategy": cfg.strategy, "runs": cfg.runs,
            "noise_level": cfg.noise_level if isinstance(cfg.noise_level, str) else "custom",
            "init_error": cfg.init_error, "mode": cfg.mode}
    meta.update(extra)
    return meta


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def paper_table(stats: SummaryStats) -> dict:
    """RMSE in the layout of the calibration tables: per sensor, x and y in meters and angle in degrees."""
    r = dict(zip(COMPONENTS, stats.rmse))
    return {"Microphone Array": {"x_m": r["tMx"], "y_m": r["tMy"], "theta_deg": r["thM"]},
            "LiDAR": {"x_m": r["tLx"], "y_m": r["tLy"], "theta_deg": r["thL"]}}


def _stats_block(stats: SummaryStats) -> dict:
    return {"table": paper_table(stats), **stats.as_dict()}


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def trace_rows(result: RunResult, sample_dt: float) -> list[list[str]]:
    rows = []
    deg = np.ones(6)
    deg[[2, 5]] = 180.0 / math.pi
    for k in range(result.steps):
        e = result.error_trace[k] * deg
        s = result.sigma_trace[k] * deg
        rows.append([str(k), _fmt(k * sample_dt)] + [_fmt(v) for v in e] + [_fmt(v) for v in s]
                    + [result.pose_source_trace[k]])
    return rows


def write_trace_csv(path: Path, result: RunResult, sample_dt: float) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(trace_rows(result, sample_dt))


def _per_run_csv(path: Path, results: list[RunResult]) -> None:
    deg = np.ones(6)
    deg[[2, 5]] = 180.0 / math.pi
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + CSV_HEADER[2:8] + ["steps", "outlier", "failure"])
        for i, r in enumerate(results):
            e = r.final_error * deg
            w.writerow([str(i)] + [_fmt(v) for v in e] + [str(r.steps), str(int(r.outlier)), r.failure or ""])


# -- commands -----------------------------------------------------------------------------

def cmd_plan(cfg: CliConfig, out: Path) -> None:
    exp = cfg.to_experiment()
    problem = planning_problem(exp, ExtrinsicParams())
    result = plan_initial(problem, rng_seed=cfg.seed)
    # baseline: a random control polygon from the same generator family, scored without optimisation
    rng = np.random.default_rng([cfg.seed, 1])
    lo = np.asarray(exp.world.bounds_min) + 0.1
    hi = np.asarray(exp.world.bounds_max) - 0.1
    x0 = np.concatenate([[rng.uniform(0.2, 0.6) ** 0.5], rng.uniform(lo, hi, size=(problem.n_control_points - 2, 2)).ravel()])
    baseline = spl.build(lead_decoder(problem)(x0))
    m = problem.samples_per_segment
    arr = spl.sample_array(result.spline, m, initial_heading=problem.start.theta)
    segments = []
    for j in range(result.spline.n_segments):
        seg = arr[j * m:(j + 1) * m]
        segments.append({"segment": j + 1,
                         "poses": [[_round(x), _round(y), _round(math.degrees(h))] for x, y, h in seg]})
    _write_json(out, {
        "metadata": _metadata(cfg),
        "n_control_points": result.spline.n,
        "control_points": [[_round(x), _round(y)] for x, y in result.spline.control_points],
        "score": result.score,
        "feasible": result.feasible,
        "evaluations": result.evaluations,
        "random_baseline_score": score(baseline, problem),
        "random_baseline_feasible": evaluate_constraints(baseline, problem).feasible,
        "segments": segments,
    })


def _round(x: float) -> float:
    return float(_fmt(x))


def cmd_calibrate(cfg: CliConfig, out: Path) -> None:
    exp = replace(cfg.to_experiment(), runs=1)
    result = run_once(exp, 0)
    if result.failure is not None:
        raise HarnessError(result.failure)
    write_trace_csv(out, result, exp.sample_dt)


def cmd_montecarlo(cfg: CliConfig, out_dir: Path, threads: int) -> None:
    exp = cfg.to_experiment()
    results = run_all(exp, threads)
    stats = summarize(results)
    out_dir.mkdir(parents=True, exist_ok=True)
    _per_run_csv(out_dir / "runs.csv", results)
    _write_json(out_dir / "summary.json", {"metadata": _metadata(cfg), **_stats_block(stats)})


def cmd_sweep_noise(cfg: CliConfig, out_dir: Path, threads: int) -> None:
    table = sweep_noise(cfg.to_experiment(), threads=threads)
    _write_json(out_dir / "summary.json", {"metadata": _metadata(cfg, sweep="noise"),
                                           "levels": {k: _stats_block(v) for k, v in table.items()}})


def cmd_sweep_init(cfg: CliConfig, out_dir: Path, threads: int) -> None:
    table = sweep_init(cfg.to_experiment(), threads=threads)
    meta = _metadata(cfg, sweep="init_error", noise_level=INIT_SWEEP_NOISE)
    _write_json(out_dir / "summary.json", {"metadata": meta,
                                           "levels": {k: _stats_block(v) for k, v in table.items()}})


def cmd_compare(cfg: CliConfig, out_dir: Path, threads: int) -> None:
    base = cfg.to_experiment()
    configs = [replace(base, strategy=s) for s in (Strategy.ACTIVE, Strategy.FIGURE8, Strategy.CIRCLE,
                                                  Strategy.LINE, Strategy.RANDOM)]
    table = compare_strategies(configs, threads=threads)
    _write_json(out_dir / "summary.json", {"metadata": _metadata(cfg, sweep="strategy"),
                                           "strategies": {k: _stats_block(v) for k, v in table.items()}})


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="activecal", description="Observability-aware active extrinsic calibration")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    specs = {
        "plan": ("plan the initial calibration trajectory", "plan.json"),
        "calibrate": ("run one calibration and write the per-step CSV trace", "trace.csv"),
        "montecarlo": ("Monte Carlo runs of one configuration", "results"),
        "sweep-noise": ("Monte Carlo over noise levels Lv1..Lv5", "results"),
        "sweep-init": ("Monte Carlo over initial-guess errors Err1..Err4 at Lv2", "results"),
        "compare": ("Monte Carlo over trajectory strategies", "results"),
    }
    for name, (help_, default_out) in specs.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", default=default_out, help=f"output path (default: {default_out})")
        p.add_argument("--runs", type=int, help="override the number of Monte Carlo runs")
        p.add_argument("--seed", type=int, help=f"override the seed (beats ${SEED_ENV})")
        p.add_argument("--threads", type=int, default=1, help="worker processes for Monte Carlo runs")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, runs=args.runs, seed=args.seed)
    except ConfigError as exc:
        print(f"activecal: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        if args.command == "plan":
            cmd_plan(cfg, out)
        elif args.command == "calibrate":
            cmd_calibrate(cfg, out)
        elif args.command == "montecarlo":
            cmd_montecarlo(cfg, out, args.threads)
        elif args.command == "sweep-noise":
            cmd_sweep_noise(cfg, out, args.threads)
        elif args.command == "sweep-init":
            cmd_sweep_init(cfg, out, args.threads)
        else:
            cmd_compare(cfg, out, args.threads)
    except (PlanningError, HarnessError) as exc:
        print(f"activecal: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
