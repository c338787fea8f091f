"""Command-line front end and end-to-end pipeline.

Every stage reads and writes files so stages can be rerun on their own; all
outputs carry the hash of the resolved configuration.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import adjust as adj
from . import curves as cv
from . import executor as ex
from . import fitting as fit
from . import kinematics as kin
from . import metrics as met
from . import redundancy as rd
from .program import MOVEC, MOVEJ, MOVEL, ProgramError, parse_program, print_program

logger = logging.getLogger("curvetrack")

EXIT_OK, EXIT_SPEC_FAIL, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CurveSource:
    generator: str | None = "curve1"
    params: dict = field(default_factory=dict)
    csv: str | None = None


@dataclass
class ThresholdConfig:
    p_err_mm: float = met.P_ERR_MAX
    n_err_deg: float = met.N_ERR_MAX
    speed_std_pct: float = met.SPEED_STD_MAX

    def spec(self) -> met.SpecThresholds:
        return met.SpecThresholds(self.p_err_mm, self.n_err_deg, self.speed_std_pct)


@dataclass
class DEParams:
    population: int = 20
    generations: int = 50
    F: float = 0.8
    CR: float = 0.9


@dataclass
class FitParams:
    threshold_mm: float = 0.3
    kinds: list = field(default_factory=lambda: [MOVEL, MOVEC])


@dataclass
class AdjustParams:
    gamma: float = 0.8
    compensate_passes: int = 3
    max_iters: int = 10
    step: float = 0.5
    refresh: int = 5


@dataclass
class ExecutorParams:
    sample_rate: float = 250.0
    noise_sigma: float = 0.0
    accel_mode: str = "configuration"


@dataclass
class SpeedSearch:
    v_lo: float = 20.0
    v_hi: float = 2000.0
    resolution: float = 1.0


@dataclass
class PipelineConfig:
    robot_model: str | None = None  # None: bundled model
    curve: CurveSource = field(default_factory=CurveSource)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    de: DEParams = field(default_factory=DEParams)
    fit: FitParams = field(default_factory=FitParams)
    adjust: AdjustParams = field(default_factory=AdjustParams)
    executor: ExecutorParams = field(default_factory=ExecutorParams)
    speed: SpeedSearch = field(default_factory=SpeedSearch)
    eval_spacing_mm: float = 0.02
    out_dir: str = "out"
    seed: int = 1

    def validate(self) -> "PipelineConfig":
        if self.robot_model is not None and not Path(self.robot_model).is_file():
            raise ConfigError(f"robot model not found: {self.robot_model}")
        if self.curve.csv is not None:
            if not Path(self.curve.csv).is_file():
                raise ConfigError(f"curve CSV not found: {self.curve.csv}")
        elif self.curve.generator not in cv.GENERATORS:
            raise ConfigError(f"unknown curve generator {self.curve.generator!r}; "
                              f"choose from {sorted(cv.GENERATORS)}")
        for name, v in dataclasses.asdict(self.thresholds).items():
            if not v > 0:
                raise ConfigError(f"thresholds.{name} must be positive")
        if not self.fit.threshold_mm > 0:
            raise ConfigError("fit.threshold_mm must be positive")
        bad = set(self.fit.kinds) - {MOVEL, MOVEC, MOVEJ}
        if bad or not self.fit.kinds:
            raise ConfigError(f"fit.kinds must be a non-empty subset of MoveL, MoveC, MoveJ; got {self.fit.kinds}")
        if not 0 < self.adjust.gamma <= 1:
            raise ConfigError("adjust.gamma must be in (0, 1]")
        if not 0 < self.speed.v_lo < self.speed.v_hi:
            raise ConfigError("speed search needs 0 < v_lo < v_hi")
        if self.de.population < 4 or self.de.generations < 0:
            raise ConfigError("de.population must be >= 4 and de.generations >= 0")
        if self.executor.accel_mode not in ("configuration", "table", "constant"):
            raise ConfigError(f"unknown executor.accel_mode {self.executor.accel_mode!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def exec_config(self) -> ex.ExecutorConfig:
        e = self.executor
        return ex.ExecutorConfig(sample_rate=e.sample_rate, noise_sigma=e.noise_sigma, accel_mode=e.accel_mode)

    def adjust_config(self) -> adj.AdjustConfig:
        a = self.adjust
        return adj.AdjustConfig(gamma=a.gamma, compensate_passes=a.compensate_passes, max_iters=a.max_iters,
                                step=a.step, refresh=a.refresh)


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        kw[k] = _build(sub, v, f"{where}.{k}") if sub else v
    return cls(**kw)


_NESTED = {
    (PipelineConfig, "curve"): CurveSource,
    (PipelineConfig, "thresholds"): ThresholdConfig,
    (PipelineConfig, "de"): DEParams,
    (PipelineConfig, "fit"): FitParams,
    (PipelineConfig, "adjust"): AdjustParams,
    (PipelineConfig, "executor"): ExecutorParams,
    (PipelineConfig, "speed"): SpeedSearch,
}


def load_config(path=None, overrides=None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    try:
        cfg = _build(PipelineConfig, data, "config")
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()


# ---------------------------------------------------------------------------
# file helpers


def save_joint_path(q, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"q{i}" for i in range(1, 7)])
        for row in q:
            w.writerow([repr(float(x)) for x in row])


def load_joint_path(path) -> rd.JointPath:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(f"q{i}" for i in range(1, 7)):
            raise ConfigError(f"{path}:1: expected header q1,...,q6")
    return rd.JointPath(np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1)))


def save_pose(path, pose: cv.CurvePose, q0, branch, objective, config_hash, kind) -> None:
    doc = {"config_hash": config_hash, "method": kind, **pose.to_dict(), "q0_rad": [float(x) for x in q0],
           "branch": int(branch), "objective_min_speed_mms": float(objective)}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_model_for(cfg: PipelineConfig) -> kin.RobotModel:
    return kin.load_model(cfg.robot_model)


def load_curve_for(cfg: PipelineConfig) -> cv.Curve:
    if cfg.curve.csv is not None:
        return cv.load_csv(cfg.curve.csv)
    return cv.GENERATORS[cfg.curve.generator](**cfg.curve.params)


class _Outputs:
    def __init__(self, out_dir, config_hash):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash
        self.files = []

    def path(self, name) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_manifest(self, extra=None) -> Path:
        doc = {"config_hash": self.hash, "files": sorted(set(self.files)), **(extra or {})}
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(doc, indent=2) + "\n")
        return p


# ---------------------------------------------------------------------------
# pipeline stages


@dataclass
class StageResult:
    pose: cv.CurvePose
    path: rd.JointPath
    curve: cv.Curve  # placed curve
    program: ex.MotionProgram  # template before speed selection
    search: met.BisectResult
    n_segments: int
    fit_residual: float
    objective: float
    extra: dict = field(default_factory=dict)

    @property
    def report(self) -> met.TrackingReport:
        return self.search.report


def _speed_run(program, curve, model, cfg: PipelineConfig, ev, adjust=False, logs=None):
    exec_cfg = cfg.exec_config()
    thr = cfg.thresholds.spec()

    def run_exec(p):
        return ex.execute(p, model, exec_cfg, seed=cfg.seed)

    def run(v):
        try:
            return attempt(v)
        except ex.ExecutionError as exc:
            # a speed the controller cannot run counts as a failed speed
            logger.info("speed %.1f mm/s not executable: %s", v, exc)
            rep = met.TrackingReport(float("inf"), float("inf"), 0.0, float("inf"))
            return met.check_spec(rep, thr), None, None

    def attempt(v):
        cal = ex.calibrate_zone(program.with_speed(v), model, cfg=exec_cfg)
        if not adjust:
            tr = run_exec(cal.program)
            return met.make_report(tr, curve, model, thresholds=thr, evaluator=ev), tr, cal.program
        st = adj.adjust(cal.program, curve, model, cfg.adjust_config(), exec_cfg, ev, thr, run=run_exec)
        if logs is not None:
            logs[v] = st
        return st.last_report, st.trace, st.program

    return run


def run_baseline(curve: cv.Curve, model: kin.RobotModel, cfg: PipelineConfig) -> StageResult:
    """Industry-practice baseline: mid-workspace placement, equally spaced MoveL, speed bisection."""
    pose, path, branch = rd.baseline_resolve(curve, model)
    c = cv.transform_curve(curve, pose)
    objective = rd.traversal_speed(path, c, model).min_speed
    n, r = fit.uniform_count_for(c, cfg.fit.threshold_mm)
    segs = fit.uniform_movel(c, n, path, model)
    program = fit.to_program(segs, path, model)
    logger.info("baseline: branch %d, %d equally spaced MoveL segments (max residual %.3f mm)", branch, n, r)
    ev = met.ErrorEvaluator(c, model, cfg.eval_spacing_mm)
    s = cfg.speed
    search = met.bisect_speed(_speed_run(program, c, model, cfg, ev), s.v_lo, s.v_hi, s.resolution,
                              cfg.thresholds.spec())
    logger.info("baseline: speed %.1f mm/s (%s)", search.speed, search.report.summary())
    return StageResult(pose, path, c, program, search, n, r, objective, {"branch": branch})


def run_optimized(curve: cv.Curve, model: kin.RobotModel, cfg: PipelineConfig, baseline_pose=None,
                  baseline_branch=None, jobs=1, de_log=None) -> StageResult:
    """Optimised placement, greedy primitive fit, waypoint adjustment, speed selection."""
    seeds = None
    if baseline_pose is not None:
        seeds = np.concatenate([baseline_pose.p_curve, baseline_pose.beta_curve, [baseline_branch + 0.5]])[None]
    d = cfg.de
    de_cfg = rd.DEConfig(population=d.population, generations=d.generations, F=d.F, CR=d.CR, seed=cfg.seed)
    res = rd.de_optimize(curve, model, de_cfg, seeds=seeds, log=de_log, jobs=jobs)
    c = cv.transform_curve(curve, res.pose)
    segs = fit.greedy_fit(c, res.path, cfg.fit.threshold_mm, model, kinds=tuple(cfg.fit.kinds))
    program = fit.to_program(segs, res.path, model)
    logger.info("optimized: objective %.1f mm/s, %d segments", res.objective, len(segs))
    ev = met.ErrorEvaluator(c, model, cfg.eval_spacing_mm)
    logs = {}
    s = cfg.speed
    v_hi = float(np.clip(np.floor(res.objective), s.v_lo + s.resolution, s.v_hi))
    search = met.bisect_speed(_speed_run(program, c, model, cfg, ev, adjust=True, logs=logs), s.v_lo, v_hi,
                              s.resolution, cfg.thresholds.spec())
    logger.info("optimized: speed %.1f mm/s (%s)", search.speed, search.report.summary())
    return StageResult(res.pose, res.path, c, program, search, len(segs), fit.max_residual(segs), res.objective,
                       {"de": res, "segments": segs, "adjust": logs.get(search.speed), "adjust_runs": logs})


def run_pipeline(cfg: PipelineConfig, jobs=1, out: _Outputs = None) -> dict:
    """Baseline and optimised runs on the configured curve; returns the summary."""
    t0 = time.time()
    model = load_model_for(cfg)
    curve = load_curve_for(cfg)
    base = run_baseline(curve, model, cfg)
    de_rows = []
    opt = run_optimized(curve, model, cfg, base.pose, base.extra["branch"], jobs, de_log=de_rows.append)
    summary = {
        "config_hash": cfg.hash(),
        "baseline": _stage_summary(base),
        "optimized": _stage_summary(opt),
        "speedup_mean_v": opt.report.mean_v / base.report.mean_v,
        "speedup_vs_baseline_commanded": opt.report.mean_v / base.search.speed,
        "de_dominates_baseline": opt.objective >= base.objective,
        "runtime_s": time.time() - t0,
    }
    if out is not None:
        _write_stage(out, "baseline", base, cfg)
        _write_stage(out, "optimized", opt, cfg)
        with open(out.path("de_log.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gen", "best_obj", "mean_obj", "worst_obj"])
            w.writerows(de_rows)
        st = opt.extra.get("adjust")
        if st is not None:
            adj.write_log(st.log, out.path("adjust_log.csv"))
        out.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        out.write_manifest()
    summary["_stages"] = (base, opt)
    return summary


def _stage_summary(st: StageResult) -> dict:
    r = st.report
    return {"speed_mms": st.search.speed, "feasible": st.search.feasible, "passed": r.ok,
            "max_p_err_mm": r.max_p_err, "max_n_err_deg": r.max_n_err, "mean_v_mms": r.mean_v,
            "std_v_mms": r.std_v, "std_v_pct": r.std_v_pct, "segments": st.n_segments,
            "fit_residual_mm": st.fit_residual, "objective_min_speed_mms": st.objective,
            "pose": st.pose.to_dict()}


def _write_stage(out: _Outputs, name, st: StageResult, cfg):
    cv.save_csv(st.curve, out.path(f"{name}_curve.csv"))
    save_joint_path(st.path.q, out.path(f"{name}_path.csv"))
    save_pose(out.path(f"{name}_pose.yaml"), st.pose, st.path.q[0], st.extra.get("branch", -1), st.objective,
              out.hash, name)
    if st.search.program is not None:
        out.path(f"{name}_program.txt").write_text(print_program(st.search.program, _header(out.hash, name)))
    if st.search.trace is not None:
        st.search.trace.to_csv(out.path(f"{name}_trace.csv"))
    _write_report(out.path(f"{name}_report.csv"), st.report)


def _header(config_hash, what):
    return f"config {config_hash}\n{what}"


def _write_report(path, rep: met.TrackingReport):
    Path(path).write_text(",".join(met.REPORT_HEADER) + "\n" + rep.csv_row() + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_curve(args, cfg):
    if args.load:
        curve = cv.load_csv(args.load)
    else:
        params = dict(_kv(p) for p in args.param or [])
        if args.gen not in cv.GENERATORS:
            raise ConfigError(f"unknown generator {args.gen!r}; choose from {sorted(cv.GENERATORS)}")
        curve = cv.GENERATORS[args.gen](**params)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "curve.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cv.save_csv(curve, out)
    print(f"wrote {out} ({len(curve)} points, length {curve.length:.2f} mm)")
    return EXIT_OK


def _kv(s):
    if "=" not in s:
        raise ConfigError(f"expected key=value, got {s!r}")
    k, v = s.split("=", 1)
    return k, yaml.safe_load(v)


def cmd_resolve(args, cfg):
    model = load_model_for(cfg)
    curve = cv.load_csv(args.curve) if args.curve else load_curve_for(cfg)
    out = _Outputs(cfg.out_dir, cfg.hash())
    pose, path, branch = rd.baseline_resolve(curve, model)
    base_obj = rd.traversal_speed(path, cv.transform_curve(curve, pose), model).min_speed
    if args.baseline:
        logger.info("baseline branch %d selected by manipulability", branch)
        kind, q, obj = "baseline", path.q, base_obj
    else:
        rows = []
        seeds = np.concatenate([pose.p_curve, pose.beta_curve, [branch + 0.5]])[None]
        d = cfg.de
        res = rd.de_optimize(curve, model, rd.DEConfig(d.population, d.generations, d.F, d.CR, seed=cfg.seed),
                             seeds=seeds, log=rows.append, jobs=args.jobs)
        pose, branch, q, obj, kind = res.pose, res.branch, res.path.q, res.objective, "optimized"
        with open(out.path("de_log.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gen", "best_obj", "mean_obj", "worst_obj"])
            w.writerows(rows)
    save_pose(out.path("pose.yaml"), pose, q[0], branch, obj, out.hash, kind)
    save_joint_path(q, out.path("path.csv"))
    cv.save_csv(cv.transform_curve(curve, pose), out.path("curve_placed.csv"))
    summary = {"method": kind, "objective_min_speed_mms": obj, "baseline_objective_min_speed_mms": base_obj,
               "dominates_baseline": bool(obj >= base_obj)}
    out.path("resolve_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    out.write_manifest()
    print(json.dumps(summary))
    return EXIT_OK


def cmd_fit(args, cfg):
    model = load_model_for(cfg)
    curve = cv.load_csv(args.curve)
    path = load_joint_path(args.path)
    if len(path) != len(curve):
        raise ConfigError(f"joint path has {len(path)} rows but the curve has {len(curve)} points")
    thresholds = args.sweep or [args.threshold if args.threshold is not None else cfg.fit.threshold_mm]
    out = _Outputs(cfg.out_dir, cfg.hash())
    counts = []
    for thr in thresholds:
        if args.uniform:
            n, _ = fit.uniform_count_for(curve, thr)
            segs = fit.uniform_movel(curve, n, path, model)
        else:
            segs = fit.greedy_fit(curve, path, thr, model, kinds=tuple(cfg.fit.kinds))
        counts.append((thr, len(segs)))
        prog = fit.to_program(segs, path, model, speed=args.speed)
        suffix = "" if len(thresholds) == 1 else f"_{thr:g}"
        out.path(f"program{suffix}.txt").write_text(
            print_program(prog, _header(out.hash, f"fit threshold {thr:g} mm, {len(segs)} segments")))
        out.path(f"segments{suffix}.json").write_text(fit.segments_sidecar(segs, thr))
    out.write_manifest()
    for thr, n in counts:
        print(f"threshold {thr:g} mm: {n} segments")
    return EXIT_OK


def cmd_execute(args, cfg):
    model = load_model_for(cfg)
    program = parse_program(Path(args.program).read_text())
    ecfg = cfg.exec_config()
    if args.sample_rate is not None:
        ecfg.sample_rate = args.sample_rate
    if args.noise_sigma is not None:
        ecfg.noise_sigma = args.noise_sigma
    trace = ex.execute(program, model, ecfg, seed=cfg.seed)
    out = _Outputs(cfg.out_dir, cfg.hash())
    trace.to_csv(out.path("trace.csv"))
    code = EXIT_OK
    if args.curve:
        curve = cv.load_csv(args.curve)
        rep = met.make_report(trace, curve, model, cfg.eval_spacing_mm, cfg.thresholds.spec())
        _write_report(out.path("report.csv"), rep)
        print(",".join(met.REPORT_HEADER))
        print(rep.csv_row())
        print(rep.summary())
        code = EXIT_OK if rep.ok else EXIT_SPEC_FAIL
    out.write_manifest({"duration_s": trace.meta.get("duration_s")})
    return code


def cmd_adjust(args, cfg):
    model = load_model_for(cfg)
    program = parse_program(Path(args.program).read_text())
    curve = cv.load_csv(args.curve)
    acfg = cfg.adjust_config()
    if args.step is not None:
        acfg.step = args.step
    ev = met.ErrorEvaluator(curve, model, cfg.eval_spacing_mm)
    ecfg = cfg.exec_config()
    st = adj.adjust(program, curve, model, acfg, ecfg, ev, cfg.thresholds.spec(),
                    run=lambda p: ex.execute(p, model, ecfg, seed=cfg.seed))
    out = _Outputs(cfg.out_dir, cfg.hash())
    out.path("program_adjusted.txt").write_text(print_program(st.program, _header(out.hash, "adjusted")))
    adj.write_log(st.log, out.path("adjust_log.csv"))
    out.write_manifest()
    print(f"max_p_err {st.initial_p_err:.4f} -> {st.best_p_err:.4f} mm")
    print(st.last_report.summary())
    return EXIT_OK if st.last_report.ok else EXIT_SPEC_FAIL


def cmd_baseline(args, cfg):
    model = load_model_for(cfg)
    curve = cv.load_csv(args.curve) if args.curve else load_curve_for(cfg)
    out = _Outputs(cfg.out_dir, cfg.hash())
    base = run_baseline(curve, model, cfg)
    _write_stage(out, "baseline", base, cfg)
    out.path("baseline_summary.json").write_text(json.dumps(_stage_summary(base), indent=2) + "\n")
    out.write_manifest()
    print(f"baseline speed {base.search.speed:.1f} mm/s: {base.report.summary()}")
    return EXIT_OK if base.search.feasible else EXIT_SPEC_FAIL


PIPELINE_STAGES = [
    "load robot model and curve",
    "baseline: resolve (mid-workspace, manipulability branch), equally spaced MoveL, bisect speed",
    "resolve: differential evolution over placement and branch (baseline seeded)",
    "fit: greedy primitive fit at the configured threshold",
    "speed: calibrate_zone -> execute -> adjust, bisecting commanded speed below the DE objective",
    "report: final metrics and speedup over the baseline",
]


def cmd_pipeline(args, cfg):
    if args.dry_run:
        print(f"config {cfg.hash()}")
        for i, s in enumerate(PIPELINE_STAGES, 1):
            print(f"{i}. {s}")
        return EXIT_OK
    out = _Outputs(cfg.out_dir, cfg.hash())
    summary = run_pipeline(cfg, jobs=args.jobs, out=out)
    base, opt = summary.pop("_stages")
    print(f"baseline : v={base.search.speed:.1f} mm/s  {base.report.summary()}")
    print(f"optimized: v={opt.search.speed:.1f} mm/s  {opt.report.summary()}")
    print(f"speedup  : {summary['speedup_mean_v']:.3f}x (mean speed)")
    return EXIT_OK if opt.report.ok and opt.search.feasible else EXIT_SPEC_FAIL


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvetrack", description="Motion-primitive planning for robot curve tracking.")
    p.add_argument("--config", help="pipeline configuration (YAML)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for DE evaluation")
    p.add_argument("--out-dir", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("curve", help="generate or validate a curve CSV")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--gen", help="generator name (curve1, curve2)")
    g.add_argument("--load", help="curve CSV to validate and rewrite")
    s.add_argument("--param", action="append", help="generator parameter key=value")
    s.add_argument("-o", "--output")

    s = sub.add_parser("resolve", help="place the curve and resolve the joint path")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--baseline", action="store_true")
    g.add_argument("--optimize", action="store_true", help="differential evolution (default)")
    s.add_argument("--curve", help="curve CSV in its own frame (default: config curve)")

    s = sub.add_parser("fit", help="fit motion primitives to a placed curve")
    s.add_argument("--curve", required=True, help="placed curve CSV")
    s.add_argument("--path", required=True, help="joint path CSV")
    s.add_argument("--threshold", type=float)
    s.add_argument("--sweep", type=float, nargs="+", help="several thresholds")
    s.add_argument("--uniform", action="store_true", help="equally spaced MoveL instead of the greedy fit")
    s.add_argument("--speed", type=float, help="commanded speed written to the program")

    s = sub.add_parser("execute", help="run a program on the virtual controller")
    s.add_argument("program")
    s.add_argument("--curve", help="placed curve CSV; adds a tracking report")
    s.add_argument("--sample-rate", type=float)
    s.add_argument("--noise-sigma", type=float)

    s = sub.add_parser("adjust", help="waypoint adjustment of an executed program")
    s.add_argument("program")
    s.add_argument("--curve", required=True, help="placed curve CSV")
    s.add_argument("--step", type=float)

    s = sub.add_parser("baseline", help="baseline protocol with speed bisection")
    s.add_argument("--curve", help="curve CSV in its own frame (default: config curve)")

    s = sub.add_parser("pipeline", help="baseline and optimised runs with a speedup summary")
    s.add_argument("--dry-run", action="store_true", help="print the stage plan only")
    return p


COMMANDS = {"curve": cmd_curve, "resolve": cmd_resolve, "fit": cmd_fit, "execute": cmd_execute,
            "adjust": cmd_adjust, "baseline": cmd_baseline, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out_dir})
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, cv.CurveError, ProgramError, kin.ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (rd.PathFollowError, rd.InfeasibleSearch, ex.ExecutionError, fit.FitError, adj.AdjustError,
            met.MetricsError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
