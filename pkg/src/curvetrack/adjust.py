"""Waypoint adjustment after execution.

Two stages: error compensation pushes every waypoint along its measured
error vector; multi-peak descent then moves only the waypoints flanking the
worst error peaks, using a cubic-spline joint trajectory through the
waypoints as a cheap model of the executor.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import kinematics as kin
from .curves import Curve
from .executor import ExecutionTrace, ExecutorConfig, execute
from .kinematics import Pose, RobotModel
from .metrics import ErrorEvaluator, SpecThresholds, TrackingReport, make_report
from .program import MOVEC, MOVEJ, MotionProgram, Primitive

logger = logging.getLogger(__name__)

LOG_HEADER = ["iter", "max_p_err_mm", "max_n_err_deg", "mean_v", "std_v", "mode"]


class AdjustError(RuntimeError):
    pass


@dataclass
class AdjustConfig:
    gamma: float = 0.8
    compensate_passes: int = 3
    max_iters: int = 10
    step: float = 0.5  # fraction of the linearised optimal step
    delta_p: float = 0.05  # mm
    delta_r: float = 5e-4  # rad
    refresh: int = 5  # surrogate iterations between true executions
    peak_fraction: float = 0.5
    stop_rel: float = 0.01
    stop_window: int = 3
    tolerance: float | None = None  # mm; None -> spec position threshold


# ---------------------------------------------------------------------------
# waypoints


@dataclass
class Waypoints:
    """Poses of the program start, MoveC vias and targets in path order."""

    P: np.ndarray
    R: np.ndarray
    refs: list  # (primitive index or -1 for the start, "start" | "via" | "target")


def get_waypoints(program: MotionProgram, model: RobotModel) -> Waypoints:
    P0, R0 = kin.fwd_batch(program.start[None], model)
    P, R, refs = [P0[0]], [R0[0]], [(-1, "start")]
    for k, prim in enumerate(program.primitives):
        if prim.kind == MOVEC:
            P.append(prim.via.p)
            R.append(prim.via.R)
            refs.append((k, "via"))
        if prim.kind == MOVEJ:
            Pt, Rt = kin.fwd_batch(prim.target[None], model)
            P.append(Pt[0])
            R.append(Rt[0])
        else:
            P.append(prim.target.p)
            R.append(prim.target.R)
        refs.append((k, "target"))
    return Waypoints(np.array(P, dtype=float), np.array(R, dtype=float), refs)


def _ik_nearest(P, R, q_ref, model, name=""):
    br = kin.inv_branches(np.asarray(P)[None], np.asarray(R)[None], model, q4_ref=q_ref[3])[0]
    ok = ~np.isnan(br).any(axis=1)
    if not ok.any():
        raise AdjustError(f"waypoint {name} is unreachable")
    d = br[ok] - q_ref
    d -= 2 * np.pi * np.round(d / (2 * np.pi))
    cand = q_ref + d
    inlim = model.within_limits(cand, 1e-9)
    if not inlim.any():
        raise AdjustError(f"waypoint {name} is outside the joint limits")
    cand = cand[inlim]
    return cand[int(np.argmin(np.abs(cand - q_ref).max(axis=1)))]


def set_waypoints(program: MotionProgram, model: RobotModel, wp: Waypoints) -> MotionProgram:
    """Program with the same primitives moved to the poses in ``wp``."""
    prims = [Primitive(p.kind, p.target, p.speed, p.zone, p.via) for p in program.primitives]
    start = program.start.copy()
    for i, (k, role) in enumerate(wp.refs):
        pose = Pose.from_matrix(wp.P[i], wp.R[i])
        if k < 0:
            start = _ik_nearest(wp.P[i], wp.R[i], program.start, model, "start")
        elif role == "via":
            prims[k].via = pose
        elif prims[k].kind == MOVEJ:
            prims[k].target = _ik_nearest(wp.P[i], wp.R[i], program.primitives[k].target, model, f"{k} (MoveJ)")
        else:
            prims[k].target = pose
    return MotionProgram(start, prims, sample_rate=program.sample_rate, meta=dict(program.meta))


def _rotate(R, w):
    return Rotation.from_rotvec(w).as_matrix() @ R


# ---------------------------------------------------------------------------
# error vectors


def curve_foot(curve: Curve, k, X):
    """Closest point on the curve polyline next to vertex ``k`` and its normal.

    Projecting onto the two adjacent chords keeps the tangential
    discretisation of the curve samples out of the error vectors.
    """
    k = np.asarray(k)
    X = np.atleast_2d(X)
    best_d = np.full(len(X), np.inf)
    foot = curve.p[k].copy()
    normal = curve.n[k].copy()
    last = len(curve) - 1
    for a_off in (-1, 0):
        a = np.clip(k + a_off, 0, last - 1)
        b = a + 1
        d = curve.p[b] - curve.p[a]
        L2 = np.maximum(np.sum(d * d, axis=1), 1e-300)
        u = np.clip(np.sum((X - curve.p[a]) * d, axis=1) / L2, 0.0, 1.0)
        F = curve.p[a] + u[:, None] * d
        dist = np.linalg.norm(X - F, axis=1)
        better = dist < best_d
        best_d[better] = dist[better]
        foot[better] = F[better]
        Nn = (1 - u)[:, None] * curve.n[a] + u[:, None] * curve.n[b]
        normal[better] = Nn[better]
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    return foot, normal


def waypoint_errors(trace: ExecutionTrace, curve: Curve, program: MotionProgram, model: RobotModel,
                    evaluator: ErrorEvaluator = None):
    """Error 6-vector ``(dp mm, dn rad)`` at every waypoint.

    For each waypoint the closest trace sample is found; the position part
    points from that sample's TCP to its closest point on the curve, the
    orientation part is the rotation vector turning the tool z-axis onto
    that point's normal.
    """
    ev = evaluator or ErrorEvaluator(curve, model)
    wp = get_waypoints(program, model)
    sl = trace.interior_slice() if trace.interior is not None else slice(0, len(trace.q))
    Q = trace.q[sl]
    P, R = kin.fwd_batch(Q, model)
    _, near = cKDTree(P).query(wp.P)
    Pn, Rn = P[near], R[near]
    _, _, k = ev.errors(Q[near])
    c = ev.curve
    E = np.zeros((len(wp.P), 6))
    foot, n = curve_foot(c, k, Pn)
    E[:, :3] = foot - Pn
    ez = Rn[:, :, 2]
    axis = np.cross(ez, n)
    s = np.linalg.norm(axis, axis=1)
    ang = np.arctan2(s, np.sum(ez * n, axis=1))
    safe = s > 1e-15
    E[safe, 3:] = axis[safe] / s[safe, None] * ang[safe, None]
    return E


def error_compensate(program: MotionProgram, trace: ExecutionTrace, curve: Curve, model: RobotModel, gamma=0.8,
                     evaluator: ErrorEvaluator = None) -> MotionProgram:
    """Shift every waypoint by ``gamma`` times its error vector."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    E = waypoint_errors(trace, curve, program, model, evaluator)
    wp = get_waypoints(program, model)
    P = wp.P + gamma * E[:, :3]
    R = np.array([_rotate(Ri, gamma * e) for Ri, e in zip(wp.R, E[:, 3:])])
    return set_waypoints(program, model, Waypoints(P, R, wp.refs))


# ---------------------------------------------------------------------------
# spline surrogate


class Predictor:
    """Cubic-spline joint trajectory through the waypoints of a program.

    Station times follow from the commanded speeds (joint moves from the
    speed fraction of the slowest joint).  Stations can be frozen so that
    moved waypoints are compared at the same times.
    """

    def __init__(self, program: MotionProgram, model: RobotModel, stations=None):
        self.program = program
        self.model = model
        self.wp = get_waypoints(program, model)
        if len(self.wp.P) < 2:
            raise AdjustError("need at least two waypoints")
        self.q = self._joints(self.wp)
        self.t = self._stations() if stations is None else np.asarray(stations, dtype=float)

    def _joints(self, wp):
        q = np.empty((len(wp.P), 6))
        q[0] = self.program.start
        for i in range(1, len(wp.P)):
            k, role = wp.refs[i]
            prim = self.program.primitives[k]
            if prim.kind == MOVEJ and role == "target":
                q[i] = prim.target
            else:
                q[i] = _ik_nearest(wp.P[i], wp.R[i], q[i - 1], self.model, str(i))
        return q

    def _stations(self):
        t = [0.0]
        for i in range(1, len(self.wp.P)):
            k, _ = self.wp.refs[i]
            prim = self.program.primitives[k]
            if prim.kind == MOVEJ:
                dt = np.max(np.abs(self.q[i] - self.q[i - 1]) / (prim.speed * self.model.dq_max))
            else:
                dt = np.linalg.norm(self.wp.P[i] - self.wp.P[i - 1]) / prim.speed
            t.append(t[-1] + max(dt, 1e-6))
        return np.array(t)

    def spline(self, q=None):
        return CubicSpline(self.t, self.q if q is None else q, bc_type="natural", axis=0)

    def sample(self, sample_rate=250.0) -> ExecutionTrace:
        sp = self.spline()
        n = int(np.floor(self.t[-1] * sample_rate + 1e-9)) + 1
        t = np.arange(n) / sample_rate
        return ExecutionTrace(t, sp(t), meta={"predicted": True})

    def positions_at(self, times, q=None):
        Q = self.spline(q)(np.atleast_1d(times))
        return kin.fwd_batch(Q, self.model)[0]

    def with_waypoint(self, i, P, R):
        """Waypoint joints with waypoint ``i`` moved (other joints unchanged)."""
        q = self.q.copy()
        q[i] = _ik_nearest(P, R, self.q[i], self.model, str(i))
        return q


def predict_trajectory(program: MotionProgram, model: RobotModel, sample_rate=250.0) -> ExecutionTrace:
    """Spline prediction of the executed joint trajectory (no extension moves)."""
    return Predictor(program, model).sample(sample_rate)


# ---------------------------------------------------------------------------
# multi-peak descent


@dataclass
class AdjustState:
    """Outcome of an adjustment run: the best executed program and its history."""

    program: MotionProgram
    last_report: TrackingReport
    iteration: int
    history: list  # (iteration, executed or surrogate max_p_err mm)
    initial_p_err: float
    log: list = field(default_factory=list)  # rows of LOG_HEADER
    diverged: bool = False
    trace: ExecutionTrace = None

    @property
    def best_p_err(self) -> float:
        return self.last_report.max_p_err


def find_peaks(err, fraction=0.5):
    """Indices of local maxima of ``err`` above ``fraction`` of its maximum."""
    err = np.asarray(err)
    if err.size == 0:
        return np.array([], dtype=int)
    thr = fraction * err.max()
    left = np.concatenate([[-np.inf], err[:-1]])
    right = np.concatenate([err[1:], [-np.inf]])
    return np.flatnonzero((err >= left) & (err >= right) & (err > thr) & (err > 0))


def peak_jacobian(pred: Predictor, t_peak, flank, delta_p=0.05, delta_r=5e-4):
    """``3 x 6*len(flank)`` central-difference Jacobian of the predicted TCP
    position at ``t_peak`` w.r.t. the flanking waypoints (position, rotation)."""
    cols = []
    for i in flank:
        P0, R0 = pred.wp.P[i], pred.wp.R[i]
        for c in range(6):
            e = np.zeros(3)
            e[c % 3] = 1.0
            if c < 3:
                qp = pred.with_waypoint(i, P0 + delta_p * e, R0)
                qm = pred.with_waypoint(i, P0 - delta_p * e, R0)
                h = delta_p
            else:
                qp = pred.with_waypoint(i, P0, _rotate(R0, delta_r * e))
                qm = pred.with_waypoint(i, P0, _rotate(R0, -delta_r * e))
                h = delta_r
            cols.append((pred.positions_at(t_peak, qp)[0] - pred.positions_at(t_peak, qm)[0]) / (2 * h))
    return np.array(cols).T


class _Runner:
    def __init__(self, curve, model, exec_cfg, evaluator, thresholds, run=None):
        self.curve, self.model = curve, model
        self.cfg = exec_cfg or ExecutorConfig()
        self.ev = evaluator or ErrorEvaluator(curve, model)
        self.thr = thresholds
        self.run_fn = run

    def run(self, program):
        tr = self.run_fn(program) if self.run_fn is not None else execute(program, self.model, self.cfg)
        rep = make_report(tr, self.curve, self.model, thresholds=self.thr, evaluator=self.ev)
        return tr, rep


def _log_row(it, rep, mode):
    return [it, rep.max_p_err, rep.max_n_err, rep.mean_v, rep.std_v, mode]


class _Best:
    """Best executed iterate so far."""

    def __init__(self, program, trace, report):
        self.program, self.trace, self.report = program, trace, report

    def offer(self, program, trace, report):
        if report.max_p_err < self.report.max_p_err:
            self.program, self.trace, self.report = program, trace, report

    def state(self, iteration, history, initial, log, diverged=False):
        return AdjustState(self.program, self.report, iteration, history, initial, log, diverged, self.trace)


def multipeak_descent(program: MotionProgram, curve: Curve, model: RobotModel, cfg: AdjustConfig = None,
                      exec_cfg: ExecutorConfig = None, evaluator: ErrorEvaluator = None,
                      thresholds: SpecThresholds = SpecThresholds(), run=None, start_iter=0) -> AdjustState:
    """Gradient descent on the waypoints flanking the error peaks.

    The executed error field is refreshed every ``cfg.refresh`` iterations;
    in between it is corrected by the spline prediction of how far the moved
    waypoints shift the trajectory.  Returns the best executed program.
    """
    cfg = cfg or AdjustConfig()
    runner = _Runner(curve, model, exec_cfg, evaluator, thresholds, run)
    tol = thresholds.p_err if cfg.tolerance is None else cfg.tolerance
    tr, rep = runner.run(program)
    log = [_log_row(start_iter, rep, "descent")]
    history = [(start_iter, rep.max_p_err)]
    initial = rep.max_p_err
    best = _Best(program, tr, rep)
    if rep.max_p_err < tol:
        return best.state(start_iter, history, initial, log)

    current = program
    executed = True
    diverged = False
    ref = None
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if ref is None:
            # refresh the executed error field and the sample correspondences
            Qx = tr.q[tr.interior_slice()]
            Px = kin.fwd_batch(Qx, model)[0]
            _, _, kx = runner.ev.errors(Qx)
            ex = curve_foot(runner.ev.curve, kx, Px)[0] - Px
            pred_ref = Predictor(current, model)
            ts = np.linspace(0.0, pred_ref.t[-1], max(200, 4 * len(Px)))
            _, nn = cKDTree(pred_ref.positions_at(ts)).query(Px)
            t_corr = ts[nn]
            ref = (ex, t_corr, pred_ref.positions_at(t_corr), pred_ref.t)

        ex, t_corr, base, stations = ref
        pred = Predictor(current, model, stations=stations)
        err_vec = ex - (pred.positions_at(t_corr) - base)
        err = np.linalg.norm(err_vec, axis=1)
        # one peak per waypoint interval, the interval being the flanking pair
        groups = {}
        for i in find_peaks(err, cfg.peak_fraction):
            j = int(np.clip(np.searchsorted(stations, t_corr[i], side="right") - 1, 0, len(stations) - 2))
            if j not in groups or err[i] > err[groups[j]]:
                groups[j] = i
        grad = np.zeros((len(pred.wp.P), 6))
        blocks = []
        # rotations are measured in units of delta_r / delta_p so both halves
        # of a waypoint take comparable steps
        scale = np.tile(np.r_[np.ones(3), np.full(3, cfg.delta_r / cfg.delta_p)], 2)
        for j, i in groups.items():
            flank = [j, j + 1]
            J = peak_jacobian(pred, t_corr[i], flank, cfg.delta_p, cfg.delta_r) * scale
            grad[flank] += (J.T @ err_vec[i]).reshape(2, 6)
            blocks.append((J, flank, err_vec[i]))
        # optimal step along the gradient for the linearised peak errors
        num = den = 0.0
        for J, flank, e in blocks:
            Jd = J @ grad[flank].ravel()
            num += e @ Jd
            den += Jd @ Jd
        if den <= 0:
            break
        alpha = cfg.step * num / den
        wp = pred.wp
        P = wp.P + alpha * grad[:, :3]
        rs = cfg.delta_r / cfg.delta_p
        R = np.array([_rotate(Ri, alpha * rs * g) for Ri, g in zip(wp.R, grad[:, 3:])])
        try:
            current = set_waypoints(current, model, Waypoints(P, R, wp.refs))
        except AdjustError as exc:
            logger.warning("multipeak_descent: %s; stopping", exc)
            break
        executed = False

        if it % cfg.refresh == 0 or it == cfg.max_iters:
            tr, rep = runner.run(current)
            executed = True
            log.append(_log_row(start_iter + it, rep, "descent"))
            ref = None
            est = rep.max_p_err
            best.offer(current, tr, rep)
            if est > 2 * best.report.max_p_err:
                logger.warning("multipeak_descent: error doubled from best (%.3f -> %.3f mm); returning best",
                               best.report.max_p_err, est)
                diverged = True
                history.append((start_iter + it, est))
                break
        else:
            pred_new = Predictor(current, model, stations=stations)
            est = float(np.linalg.norm(ex - (pred_new.positions_at(t_corr) - base), axis=1).max())
        history.append((start_iter + it, est))
        if executed and est < tol:
            break
        w = cfg.stop_window
        if len(history) > w:
            old = history[-w - 1][1]
            if old - min(h[1] for h in history[-w:]) <= cfg.stop_rel * old:
                break
    if not executed:
        tr, rep = runner.run(current)
        log.append(_log_row(start_iter + it, rep, "descent"))
        best.offer(current, tr, rep)
    return best.state(start_iter + it, history, initial, log, diverged)


def adjust(program: MotionProgram, curve: Curve, model: RobotModel, cfg: AdjustConfig = None,
           exec_cfg: ExecutorConfig = None, evaluator: ErrorEvaluator = None,
           thresholds: SpecThresholds = SpecThresholds(), run=None) -> AdjustState:
    """Error compensation passes followed by multi-peak descent; best executed iterate wins."""
    cfg = cfg or AdjustConfig()
    runner = _Runner(curve, model, exec_cfg, evaluator, thresholds, run)
    tol = thresholds.p_err if cfg.tolerance is None else cfg.tolerance
    tr, rep = runner.run(program)
    log = [_log_row(0, rep, "compensate")]
    history = [(0, rep.max_p_err)]
    initial = rep.max_p_err
    best = _Best(program, tr, rep)
    if rep.max_p_err < tol:
        return best.state(0, history, initial, log)
    current = program
    for it in range(1, cfg.compensate_passes + 1):
        try:
            current = error_compensate(current, tr, curve, model, cfg.gamma, runner.ev)
        except AdjustError as exc:
            logger.warning("error_compensate: %s", exc)
            break
        tr, rep = runner.run(current)
        log.append(_log_row(it, rep, "compensate"))
        history.append((it, rep.max_p_err))
        best.offer(current, tr, rep)
        if rep.max_p_err < tol:
            return best.state(it, history, initial, log)
    res = multipeak_descent(best.program, curve, model, cfg, exec_cfg, runner.ev, thresholds, run,
                            start_iter=cfg.compensate_passes + 1)
    log.extend(res.log[1:])
    history.extend(res.history[1:])
    best.offer(res.program, res.trace, res.last_report)
    return best.state(res.iteration, history, initial, log, res.diverged)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:5]] + [r[5]])
