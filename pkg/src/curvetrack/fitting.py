"""Greedy decomposition of a reference path into MoveL / MoveC / MoveJ primitives."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .curves import Curve
from .kinematics import Pose, RobotModel
from .program import MOVEC, MOVEJ, MOVEL, MotionProgram, Primitive
from .redundancy import JointPath

logger = logging.getLogger(__name__)

MAX_RADIUS = 1e6  # mm; larger circles are treated as lines
PREFERENCE = (MOVEL, MOVEC, MOVEJ)


class FitError(ValueError):
    def __init__(self, msg, index=None):
        super().__init__(msg if index is None else f"curve index {index}: {msg}")
        self.index = index


class DegenerateArc(FitError):
    pass


@dataclass
class FitSegment:
    primitive: Primitive
    start_index: int
    end_index: int
    max_residual: float
    start_point: np.ndarray = None  # fitted start position (mm)

    @property
    def kind(self) -> str:
        return self.primitive.kind


# ---------------------------------------------------------------------------
# point-to-geometry distances


def point_segment_distance(X, a, b):
    """Distance from points ``X`` (N, 3) to the segment ``[a, b]``."""
    d = b - a
    dd = d @ d
    if dd == 0:
        return np.linalg.norm(X - a, axis=1)
    t = np.clip((X - a) @ d / dd, 0.0, 1.0)
    return np.linalg.norm(X - (a + t[:, None] * d), axis=1)


def point_polyline_distance(X, poly):
    """Distance from every point of ``X`` to the polyline through ``poly``."""
    X = np.atleast_2d(X)
    if len(poly) == 1:
        return np.linalg.norm(X - poly[0], axis=1)
    a = poly[:-1]
    d = np.diff(poly, axis=0)
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(X))
    chunk = max(1, 200000 // len(a))
    for k in range(0, len(X), chunk):
        x = X[k : k + chunk, None, :]
        t = np.clip(np.einsum("nsj,sj->ns", x - a, d) / dd, 0.0, 1.0)
        dist = np.linalg.norm(x - (a + t[..., None] * d), axis=2)
        out[k : k + chunk] = dist.min(axis=1)
    return out


@dataclass
class ArcGeom:
    center: np.ndarray
    radius: float
    normal: np.ndarray
    e1: np.ndarray  # unit vector towards the arc start
    e2: np.ndarray
    sweep: float  # rad, from start to end

    def point(self, phi):
        phi = np.atleast_1d(phi)
        return self.center + self.radius * (np.cos(phi)[:, None] * self.e1 + np.sin(phi)[:, None] * self.e2)

    def distance(self, X):
        d = X - self.center
        h = d @ self.normal
        x, y = d @ self.e1, d @ self.e2
        ang = np.mod(np.arctan2(y, x), 2 * np.pi)
        inside = ang <= self.sweep
        rho = np.hypot(x, y)
        on_arc = np.sqrt(h * h + (rho - self.radius) ** 2)
        ends = np.minimum(np.linalg.norm(X - self.point(0.0)[0], axis=1),
                          np.linalg.norm(X - self.point(self.sweep)[0], axis=1))
        return np.where(inside, on_arc, ends)


# ---------------------------------------------------------------------------
# single-primitive fits


def _line_through(X, c0=None):
    """Direction and anchor of the least-squares line (through ``c0`` if given)."""
    anchor = X.mean(axis=0) if c0 is None else np.asarray(c0, dtype=float)
    D = X - anchor
    _, _, Vt = np.linalg.svd(D, full_matrices=False)
    u = Vt[0]
    if (X[-1] - X[0]) @ u < 0:
        u = -u
    return anchor, u


def fit_line(X, start=None):
    """Fitted segment endpoints ``(a, b)`` and residual for points ``X``."""
    X = np.asarray(X, dtype=float)
    if len(X) < 2:
        raise FitError("a line fit needs at least two points")
    anchor, u = _line_through(X, start)
    a = anchor + ((X[0] - anchor) @ u) * u if start is None else np.asarray(start, dtype=float)
    b = anchor + ((X[-1] - anchor) @ u) * u
    res = float(point_segment_distance(X, a, b).max())
    return a, b, res


def fit_circle(X, start=None) -> tuple[ArcGeom, float]:
    """Least-squares circle in the best-fit plane; the arc runs from the first
    to the last point (from ``start`` when given)."""
    X = np.asarray(X, dtype=float)
    if len(X) < 3:
        raise FitError("a circle fit needs at least three points")
    origin = X.mean(axis=0) if start is None else np.asarray(start, dtype=float)
    D = X - origin
    _, sv, Vt = np.linalg.svd(D, full_matrices=False)
    e1, e2, n = Vt[0], Vt[1], Vt[2]
    x, y = D @ e1, D @ e2
    if start is None:
        A = np.stack([x, y, np.ones_like(x)], axis=1)
    else:
        A = np.stack([x, y], axis=1)
    rhs = -(x * x + y * y)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    cx, cy = -sol[0] / 2, -sol[1] / 2
    F = sol[2] if start is None else 0.0
    r2 = cx * cx + cy * cy - F
    if not np.isfinite(r2) or r2 <= 0 or r2 > MAX_RADIUS**2:
        raise DegenerateArc("points are nearly collinear; prefer a linear move")
    r = float(np.sqrt(r2))
    center = origin + cx * e1 + cy * e2
    # orient the arc frame: start direction and travel sense
    p0 = X[0] if start is None else origin
    v0 = p0 - center
    v0 -= (v0 @ n) * n
    f1 = v0 / np.linalg.norm(v0)
    f2 = np.cross(n, f1)
    ang = np.unwrap(np.arctan2((X - center) @ f2, (X - center) @ f1))
    ang -= ang[0] if start is None else 0.0
    if ang[-1] < 0:
        n, f2, ang = -n, -f2, -ang
    sweep = float(ang[-1])
    if not 0 < sweep < 2 * np.pi:
        raise DegenerateArc("arc sweep outside (0, 2*pi)")
    arc = ArcGeom(center, r, n, f1, f2, sweep)
    return arc, float(arc.distance(X).max())


def _joint_samples(qa, qb, n_points):
    m = max(2, 4 * n_points)
    lam = np.linspace(0.0, 1.0, m)
    return qa + lam[:, None] * (qb - qa)


def joint_line_residual(qa, qb, X, model: RobotModel, oversample=1):
    """Max distance of the TCP along the joint-space line ``qa -> qb`` to the polyline ``X``."""
    Q = _joint_samples(qa, qb, len(X) * oversample)
    P, _ = kin.fwd_batch(Q, model)
    return float(point_polyline_distance(P, X).max())


def fit_movel(X, R_end, start=None, speed=100.0, zone=0.0):
    """MoveL through the least-squares line of ``X``; returns ``(primitive, residual, start point)``."""
    a, b, res = fit_line(X, start)
    return Primitive(MOVEL, Pose.from_matrix(b, R_end), speed, zone), res, a


def fit_movec(X, R_mid, R_end, start=None, speed=100.0, zone=0.0):
    """MoveC on the least-squares circle of ``X``; via at the arc midpoint."""
    arc, res = fit_circle(X, start)
    via = arc.point(0.5 * arc.sweep)[0]
    end = arc.point(arc.sweep)[0]
    prim = Primitive(MOVEC, Pose.from_matrix(end, R_end), speed, zone, via=Pose.from_matrix(via, R_mid))
    return prim, res, arc.point(0.0)[0]


def fit_movej(q_start, q_end, X, model: RobotModel, speed=0.5, zone=0.0):
    """MoveJ between joint configurations; residual against the Cartesian slice ``X``."""
    res = joint_line_residual(q_start, q_end, X, model)
    return Primitive(MOVEJ, np.array(q_end, dtype=float), speed, zone), res


# ---------------------------------------------------------------------------
# greedy decomposition


class _Fitter:
    def __init__(self, curve: Curve, path: JointPath, model: RobotModel, speed, joint_speed):
        self.X = curve.p
        self.q = path.q
        self.model = model
        self.P_path, self.R_path = kin.fwd_batch(path.q, model)
        self.speed = speed
        self.joint_speed = joint_speed

    def attempt(self, kind, i, j, start, q_start):
        """``(primitive, residual, start point)`` or None when the kind is not applicable."""
        X = self.X[i : j + 1]
        if kind == MOVEL:
            return fit_movel(X, self.R_path[j], start, self.speed)
        if kind == MOVEC:
            if j - i < 2:
                return None
            try:
                return fit_movec(X, self.R_path[(i + j) // 2], self.R_path[j], start, self.speed)
            except DegenerateArc:
                return None
        qa = self.q[i] if q_start is None else q_start
        prim, res = fit_movej(qa, self.q[j], X, self.model, self.joint_speed)
        a = kin.fwd_batch(qa[None], self.model)[0][0]
        return prim, res, a

    def reach(self, kind, i, start, q_start, threshold):
        """Largest end index reachable from ``i`` by ``kind`` (exponential then bisection search)."""
        last = len(self.X) - 1

        def ok(j):
            r = self.attempt(kind, i, j, start, q_start)
            return r if (r is not None and r[1] <= threshold) else None

        lo_j = i + (2 if kind == MOVEC else 1)
        if lo_j > last:
            return None, None
        best = ok(lo_j)
        if best is None:
            return None, None
        good, step = lo_j, lo_j - i
        bad = None
        while True:
            step *= 2
            j = min(i + step, last)
            if j <= good:
                break
            r = ok(j)
            if r is None:
                bad = j
                break
            good, best = j, r
            if j == last:
                break
        if bad is not None:
            while bad - good > 1:
                mid = (good + bad) // 2
                r = ok(mid)
                if r is None:
                    bad = mid
                else:
                    good, best = mid, r
        return good, best


def greedy_fit(curve: Curve, path: JointPath, threshold: float, model: RobotModel, speed=100.0,
               joint_speed=0.5, kinds=PREFERENCE) -> list:
    """Fewest-segment greedy decomposition within ``threshold`` mm.

    Each segment is the longest reach of any primitive type from the current
    index (ties go to the earlier entry of ``kinds``); later segments are
    constrained to start at the previous segment's end.
    """
    if threshold <= 0:
        raise FitError("threshold must be positive")
    if len(curve) != len(path):
        raise FitError("curve and joint path differ in length")
    fitter = _Fitter(curve, path, model, speed, joint_speed)
    last = len(curve) - 1
    segs = []
    i = 0
    start = None
    q_start = None
    while i < last:
        best = None
        for kind in kinds:
            j, r = fitter.reach(kind, i, start, q_start, threshold)
            if j is not None and (best is None or j > best[0]):
                best = (j, r)
        if best is None:
            raise FitError(f"threshold {threshold} mm unachievable even for two points", i)
        j, (prim, res, a) = best
        segs.append(FitSegment(prim, i, j, res, np.array(a, dtype=float)))
        if prim.kind == MOVEJ:
            q_start = prim.target.copy()
            start = kin.fwd_batch(q_start[None], model)[0][0]
        else:
            start = prim.target.p.copy()
            q_start = _ik_near(prim.target, fitter.q[j], model)
        i = j
    logger.info("greedy fit: %d segments (%s)", len(segs), ", ".join(s.kind for s in segs))
    return segs


def _ik_near(pose: Pose, q_ref, model):
    sols = kin.inv(pose, model, q_ref=q_ref)
    if not sols:
        raise FitError("fitted waypoint is unreachable")
    d = [np.abs(s - q_ref).max() for s in sols]
    return sols[int(np.argmin(d))]


def uniform_movel(curve: Curve, n: int, path: JointPath = None, model: RobotModel = None, speed=100.0) -> list:
    """``n`` MoveL segments between equal arc-length stations of the curve."""
    if n < 1:
        raise FitError("n must be >= 1")
    st = np.linspace(0.0, curve.length, n + 1)
    P = np.stack([np.interp(st, curve.s, curve.p[:, k]) for k in range(3)], axis=1)
    P[0], P[-1] = curve.p[0], curve.p[-1]
    idx = np.searchsorted(curve.s, st)
    idx = np.clip(idx, 0, len(curve) - 1)
    if path is not None and model is not None:
        _, Rp = kin.fwd_batch(path.q, model)
    else:
        Rp = None
    segs = []
    for k in range(n):
        lo = int(np.searchsorted(curve.s, st[k], side="left"))
        hi = int(np.searchsorted(curve.s, st[k + 1], side="right")) - 1
        X = np.vstack([P[k], curve.p[lo : hi + 1], P[k + 1]])
        res = float(point_segment_distance(X, P[k], P[k + 1]).max())
        R = np.eye(3) if Rp is None else _interp_rotation(curve.s, Rp, st[k + 1])
        prim = Primitive(MOVEL, Pose.from_matrix(P[k + 1], R), speed, 0.0)
        segs.append(FitSegment(prim, int(idx[k]), int(idx[k + 1]), res, P[k].copy()))
    return segs


def _interp_rotation(s, R, at):
    from scipy.spatial.transform import Rotation, Slerp

    j = int(np.clip(np.searchsorted(s, at), 1, len(s) - 1))
    if at >= s[j]:
        return R[j]
    sl = Slerp([s[j - 1], s[j]], Rotation.from_matrix(R[j - 1 : j + 1]))
    return sl([at]).as_matrix()[0]


def max_residual(segments) -> float:
    return float(max(s.max_residual for s in segments))


def uniform_count_for(curve: Curve, target_residual: float, n_max=1000) -> tuple[int, float]:
    """Smallest ``n`` whose equally spaced MoveL fit reaches ``target_residual``."""
    lo, hi = 1, 1
    while max_residual(uniform_movel(curve, hi)) > target_residual:
        lo = hi + 1
        hi *= 2
        if hi > n_max:
            raise FitError(f"no uniform fit with n <= {n_max} reaches {target_residual} mm")
    # the residual is not strictly monotone in n, so scan the last bracket
    for n in range(lo, hi + 1):
        r = max_residual(uniform_movel(curve, n))
        if r <= target_residual:
            return n, r
    return hi, max_residual(uniform_movel(curve, hi))


def to_program(segments, path: JointPath, model: RobotModel, speed=None, zone=None) -> MotionProgram:
    """Motion program for fitted segments, starting at the first fitted point."""
    first = segments[0]
    q0 = path.q[first.start_index]
    _, R0 = kin.fwd_batch(q0[None], model)
    if first.kind == MOVEJ:
        start_q = q0.copy()
    else:
        start_q = _ik_near(Pose.from_matrix(first.start_point, R0[0]), q0, model)
    prims = []
    for s in segments:
        p = s.primitive
        prims.append(Primitive(p.kind, p.target, p.speed if speed is None or p.kind == MOVEJ else speed,
                               p.zone if zone is None else zone, p.via))
    return MotionProgram(start_q, prims)


def segments_sidecar(segments, threshold=None) -> str:
    """JSON diagnostics for fitted segments."""
    doc = {
        "threshold_mm": threshold,
        "segments": [
            {"kind": s.kind, "start_index": s.start_index, "end_index": s.end_index,
             "max_residual_mm": s.max_residual}
            for s in segments
        ],
    }
    return json.dumps(doc, indent=2)
