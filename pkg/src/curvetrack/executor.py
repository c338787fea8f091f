"""Deterministic virtual motion controller.

A program is turned into one geometric path: every primitive contributes a
piece (line, circular arc or joint-space line), pieces are trimmed around
each waypoint by the zone radius and joined by a blend that superposes the
incoming and outgoing pieces,

    B(u) = P_in(entry + (2u - u^2) z) + P_out(u^2 z) - W,   u in [0, 1],

which leaves and enters the zone tangentially (for two lines it is a
parabola, for collinear lines it is the line itself).  Orientations are
blended the same way by composing relative rotations.

The path is time-scaled by a forward/backward pass on a uniform arc-length
grid that respects the commanded speed, the joint velocity limits and the
configuration-dependent joint acceleration limits.  The acceleration along
the path is piecewise constant between grid nodes, so samples at 250 Hz are
taken on the exact geometry and converted to joints by branch-continuous
inverse kinematics.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import kinematics as kin
from .kinematics import Pose, RobotModel
from .program import MOVEC, MOVEJ, MOVEL, MotionProgram, Primitive

logger = logging.getLogger(__name__)

TRACE_HEADER = ["t_s", "q1", "q2", "q3", "q4", "q5", "q6"]


class ExecutionError(RuntimeError):
    def __init__(self, msg, segment=None):
        if segment is not None:
            msg = f"segment {segment}: {msg}"
        super().__init__(msg)
        self.segment = segment


class ExtensionError(ExecutionError):
    pass


@dataclass
class ExecutorConfig:
    sample_rate: float | None = None  # Hz; overrides the program's rate when set
    grid_step: float = 0.5  # mm of path between time-scaling nodes
    path_accel: float = 2000.0  # mm/s^2, Cartesian moves only
    vel_margin: float = 0.99
    acc_margin: float = 0.97
    accel_mode: str = "configuration"  # "configuration", "table" or "constant"
    accel_constant: tuple | None = None  # joints 1-3 in "constant" mode
    noise_sigma: float = 0.0  # rad, per-sample joint jitter
    extension_margin: float = 1.25
    min_extension: float = 5.0  # mm
    jump_tol: float = 0.25  # rad between neighbouring samples


# ---------------------------------------------------------------------------
# acceleration ground truth


def configuration_accel(Q, model: RobotModel):
    """Joint 1-3 acceleration limits that shrink as the arm stretches out.

    Extension is the horizontal distance of the wrist centre from the joint-1
    axis relative to the fully stretched arm.  Limits are
    ``base + gain * (1 - extension)**2`` per joint.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    h, o = model.joint_axes, model.joint_origins
    W0 = model.wrist_center
    R2 = kin._rot_batch(h[1], Q[:, 1], model._K[1], model._K2[1])
    R3 = kin._rot_batch(h[2], Q[:, 2], model._K[2], model._K2[2])
    w = np.einsum("nij,nj->ni", R2, np.einsum("nij,j->ni", R3, W0 - o[2]) + (o[2] - o[1])) + o[1]
    rel = w - o[0]
    radial = np.linalg.norm(rel - np.outer(rel @ h[0], h[0]), axis=1)
    off = o[1] - o[0]
    reach = (np.linalg.norm(off - h[0] * (off @ h[0])) + np.linalg.norm(o[2] - o[1])
             + np.linalg.norm(W0 - o[2]))
    fold = (1.0 - np.clip(radial / reach, 0.0, 1.0)) ** 2
    base = np.array([2.5, 3.0, 4.0])
    gain = np.array([4.0, 3.0, 3.0])
    return base + gain * fold[:, None]


def joint_accel_limits(Q, model: RobotModel, cfg: ExecutorConfig):
    Q = np.atleast_2d(Q)
    if cfg.accel_mode == "configuration":
        a123 = configuration_accel(Q, model)
    elif cfg.accel_mode == "table":
        a123, _ = model.accel_table.lookup(Q[:, 1], Q[:, 2])
    elif cfg.accel_mode == "constant":
        if cfg.accel_constant is None:
            raise ValueError("constant accel mode needs accel_constant")
        a123 = np.broadcast_to(np.asarray(cfg.accel_constant, dtype=float), (len(Q), 3))
    else:
        raise ValueError(f"unknown accel mode {cfg.accel_mode!r}")
    return np.hstack([a123, np.broadcast_to(model.ddq_wrist, (len(Q), 3))])


# ---------------------------------------------------------------------------
# geometric pieces; eval(s) -> (P, R, Q or None) for arc-length s (may
# extrapolate beyond [0, L])


def _rotvec_rel(Ra, Rb):
    return Rotation.from_matrix(Ra.T @ Rb).as_rotvec()


def _exp(v):
    return Rotation.from_rotvec(np.atleast_2d(v)).as_matrix()


class _Line:
    joint = False

    def __init__(self, pa, pb, Ra, Rb):
        d = np.asarray(pb, dtype=float) - pa
        self.L = float(np.linalg.norm(d))
        if self.L < 1e-9:
            raise ValueError("zero-length linear move")
        self.pa = np.asarray(pa, dtype=float)
        self.u = d / self.L
        self.Ra = Ra
        self.rate = _rotvec_rel(Ra, Rb) / self.L

    def eval(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self.pa + s[:, None] * self.u, self.Ra @ _exp(s[:, None] * self.rate), None


class _Arc:
    joint = False

    def __init__(self, pa, pv, pb, Ra, Rv, Rb):
        pa, pv, pb = (np.asarray(x, dtype=float) for x in (pa, pv, pb))
        b, c = pv - pa, pb - pa
        w = np.cross(b, c)
        ww = w @ w
        if ww < 1e-12 * (b @ b) * (c @ c) or ww == 0:
            raise ValueError("degenerate arc (collinear points)")
        self.c = pa + np.cross(b @ b * c - c @ c * b, w) / (2 * ww)
        self.r = float(np.linalg.norm(pa - self.c))
        self.e1 = (pa - self.c) / self.r
        self.e2 = np.cross(w / np.sqrt(ww), self.e1)
        self.th_v = self._angle(pv)
        self.th_b = self._angle(pb)
        self.L = self.r * self.th_b
        # orientation: rotation vector relative to Ra, quadratic in arc length
        # through the via and end orientations, so the rate has no kink at the via
        self.Ra = Ra
        sv, L = self.r * self.th_v, self.L
        bv, bb = _rotvec_rel(Ra, Rv), _rotvec_rel(Ra, Rb)
        self._lagrange = (sv, bv / (sv * (sv - L)), bb / (L * (L - sv)))

    def _angle(self, x):
        d = x - self.c
        return float(np.mod(np.arctan2(d @ self.e2, d @ self.e1), 2 * np.pi))

    def eval(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        phi = s / self.r
        P = self.c + self.r * (np.cos(phi)[:, None] * self.e1 + np.sin(phi)[:, None] * self.e2)
        sv, cv, cb = self._lagrange
        beta = (s * (s - self.L))[:, None] * cv + (s * (s - sv))[:, None] * cb
        return P, self.Ra @ _exp(beta), None


class _JointLine:
    joint = True

    def __init__(self, qa, qb, model):
        self.qa = np.asarray(qa, dtype=float)
        self.dq = np.asarray(qb, dtype=float) - self.qa
        self.model = model
        P, _ = kin.fwd_batch(self.qa + np.linspace(0, 1, 33)[:, None] * self.dq, model)
        self.L = float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)))
        if self.L < 1e-6:
            raise ValueError("joint move without TCP displacement")

    def eval(self, s):
        lam = np.atleast_1d(np.asarray(s, dtype=float)) / self.L
        Q = self.qa + lam[:, None] * self.dq
        P, R = kin.fwd_batch(Q, self.model)
        return P, R, Q


class _Trim:
    """Part ``[a, b]`` of a piece, re-parameterised from 0."""

    def __init__(self, piece, a, b):
        self.piece, self.a, self.L = piece, a, b - a
        self.joint = piece.joint

    def eval(self, s):
        return self.piece.eval(self.a + np.asarray(s, dtype=float))


class _Blend:
    joint = False

    def __init__(self, pin, pout, z, model):
        self.pin, self.pout, self.z = pin, pout, z
        self.entry = pin.L - z
        PW, RW, QW = pin.eval(pin.L)
        self.PW, self.RWt = PW[0], RW[0].T
        self.joint = pin.joint and pout.joint
        self.QW = None if QW is None else QW[0]
        self.model = model
        u = np.linspace(0.0, 1.0, 401)
        P = self.at_u(u)[0]
        su = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])
        self.su, self.uu = su, u
        self.L = float(su[-1])

    def at_u(self, u):
        a = self.entry + (2 * u - u * u) * self.z
        b = u * u * self.z
        Pi, Ri, Qi = self.pin.eval(a)
        Po, Ro, Qo = self.pout.eval(b)
        if self.joint:
            Q = Qi + Qo - self.QW
            P, R = kin.fwd_batch(Q, self.model)
            return P, R, Q
        return Pi + Po - self.PW, Ri @ self.RWt @ Ro, None

    def eval(self, s):
        return self.at_u(np.interp(np.atleast_1d(s), self.su, self.uu))


def _piece(prim: Primitive, Pa, Ra, qa, model):
    if prim.kind == MOVEL:
        return _Line(Pa, prim.target.p, Ra, prim.target.R)
    if prim.kind == MOVEC:
        return _Arc(Pa, prim.via.p, prim.target.p, Ra, prim.via.R, prim.target.R)
    return _JointLine(qa, prim.target, model)


# ---------------------------------------------------------------------------
# inverse kinematics along a path


def _track(P, R, Qfix, q_start, model: RobotModel, jump_tol, seg_of=None):
    """Branch-continuous joints for poses ``(P, R)``; rows of ``Qfix`` that are
    not NaN are taken as given."""
    n = len(P)
    need = np.isnan(Qfix).any(axis=1)
    cand = np.full((n, kin.N_BRANCHES, 6), np.nan)
    if need.any():
        cand[need] = kin.inv_branches(P[need], R[need], model, q4_ref=q_start[3])
    out = np.empty((n, 6))
    q = np.asarray(q_start, dtype=float)
    two_pi = 2 * np.pi
    for k in range(n):
        if not need[k]:
            qk = Qfix[k]
            step = np.abs(qk - q).max()
        else:
            d = cand[k] - q
            d -= two_pi * np.round(d / two_pi)
            score = np.abs(d).max(axis=1)
            if np.all(np.isnan(score)):
                seg = None if seg_of is None else int(seg_of[k])
                raise ExecutionError("target unreachable", seg)
            b = int(np.nanargmin(score))
            step = score[b]
            qk = q + d[b]
        if step > jump_tol:
            seg = None if seg_of is None else int(seg_of[k])
            raise ExecutionError(f"branch discontinuity ({step:.3g} rad between samples)", seg)
        out[k] = q = qk
    bad = ~model.within_limits(out, 1e-9)
    if bad.any():
        k = int(np.argmax(bad))
        seg = None if seg_of is None else int(seg_of[k])
        raise ExecutionError(f"joint limits exceeded at path sample {k}", seg)
    return out


# ---------------------------------------------------------------------------
# assembled path


@dataclass
class _Section:
    geom: object
    start: float
    length: float
    segment: int  # index into the full primitive list (lead-in = 0)
    blend: bool
    vcap: float  # mm/s
    jfrac: float  # fraction of joint speed limits
    cartesian: bool


class PlannedPath:
    """Geometric path of an extended program (lead-in, primitives, lead-out)."""

    def __init__(self, program: MotionProgram, model: RobotModel, cfg: ExecutorConfig):
        prims = program.all_primitives()
        self.model = model
        self.cfg = cfg
        self.n_lead_in = 1 if program.lead_in is not None else 0
        self.n_true = len(program.primitives)
        P0, R0 = kin.fwd_batch(program.start[None], model)
        Pa, Ra, qa = P0[0], R0[0], program.start.copy()
        pieces = []
        for k, prim in enumerate(prims):
            try:
                pc = _piece(prim, Pa, Ra, qa, model)
            except ValueError as exc:
                raise ExecutionError(str(exc), k - self.n_lead_in) from None
            pieces.append(pc)
            m = max(8, int(pc.L / 20.0))
            Pk, Rk, Qk = pc.eval(np.linspace(0.0, pc.L, m + 1))
            Qfix = np.full((m + 1, 6), np.nan) if Qk is None else Qk
            qa = _track(Pk, Rk, Qfix, qa, model, np.inf, np.full(m + 1, k - self.n_lead_in))[-1]
            Pa, Ra = Pk[-1], Rk[-1]
        self.pieces = pieces
        self.q_start = program.start.copy()

        n = len(prims)
        zone = np.zeros(n)
        for k in range(n - 1):
            if self.n_lead_in and k == 0:
                continue
            if program.lead_out is not None and k == n - 2:
                continue
            zone[k] = min(prims[k].zone, 0.5 * pieces[k].L, 0.5 * pieces[k + 1].L)
        self.zone = zone
        # True when every zone between true primitives is capped by segment length
        junctions = [k for k in range(n - 1) if prims[k].zone > 0 and not (self.n_lead_in and k == 0)
                     and not (program.lead_out is not None and k == n - 2)]
        self.zones_saturated = all(zone[k] < prims[k].zone for k in junctions)

        def caps(k):
            p = prims[k]
            if p.kind == MOVEJ:
                return np.inf, min(p.speed, 1.0), False
            return p.speed, 1.0, True

        sections = []
        stops = []
        s = 0.0
        for k in range(n):
            a = zone[k - 1] if k > 0 else 0.0
            b = pieces[k].L - zone[k]
            vc, jf, cart = caps(k)
            if b - a > 1e-12:
                sections.append(_Section(_Trim(pieces[k], a, b), s, b - a, k, False, vc, jf, cart))
                s += b - a
            if k == n - 1:
                break
            if zone[k] > 0:
                bl = _Blend(pieces[k], pieces[k + 1], zone[k], model)
                v2, j2, c2 = caps(k + 1)
                sections.append(_Section(bl, s, bl.L, k, True, min(vc, v2), min(jf, j2), cart or c2))
                s += bl.L
            elif self._corner(pieces[k], pieces[k + 1]):
                stops.append(s)
        self.sections = sections
        self.length = s
        self.stops = stops
        self._starts = np.array([x.start for x in sections])
        lead_len = pieces[0].L if self.n_lead_in else 0.0
        tail_len = pieces[-1].L if program.lead_out is not None else 0.0
        self.s_first = lead_len
        self.s_last = s - tail_len

    @staticmethod
    def _corner(pin, pout, delta=1e-3, tol=1e-3):
        Pa, Ra, Qa = pin.eval([pin.L - delta, pin.L])
        Pb, Rb, Qb = pout.eval([0.0, delta])
        if Qa is not None and Qb is not None:
            return np.abs((Qa[1] - Qa[0]) - (Qb[1] - Qb[0])).max() / delta > tol
        ta = (Pa[1] - Pa[0]) / delta
        tb = (Pb[1] - Pb[0]) / delta
        wa = Rotation.from_matrix(Ra[1] @ Ra[0].T).as_rotvec() / delta
        wb = Rotation.from_matrix(Rb[1] @ Rb[0].T).as_rotvec() / delta
        return np.linalg.norm(ta - tb) + 100.0 * np.linalg.norm(wa - wb) > tol

    def section_index(self, s):
        return np.clip(np.searchsorted(self._starts, s, side="right") - 1, 0, len(self.sections) - 1)

    def evaluate(self, s):
        """Poses (and joints where the path is joint-defined, else NaN) at arc lengths ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        idx = self.section_index(s)
        P = np.empty((len(s), 3))
        R = np.empty((len(s), 3, 3))
        Q = np.full((len(s), 6), np.nan)
        for i in np.unique(idx):
            m = idx == i
            sec = self.sections[i]
            Pi, Ri, Qi = sec.geom.eval(s[m] - sec.start)
            P[m], R[m] = Pi, Ri
            if Qi is not None:
                Q[m] = Qi
        return P, R, Q

    def blend_mask(self, s):
        idx = self.section_index(np.atleast_1d(s))
        return np.array([self.sections[i].blend for i in idx], dtype=bool)

    def segment_of(self, s):
        """Primitive index (lead-in -1, lead-out len(primitives)) at each arc length."""
        idx = self.section_index(np.atleast_1d(s))
        return np.array([self.sections[i].segment for i in idx]) - self.n_lead_in

    def joints(self, s, q_start=None):
        P, R, Q = self.evaluate(s)
        seg = self.segment_of(s)
        q0 = self.q_start if q_start is None else q_start
        return _track(P, R, Q, q0, self.model, self.cfg.jump_tol, seg)


# ---------------------------------------------------------------------------
# time scaling


def _u_bounds(q1, q2, acc, apath, x):
    """Bounds on path acceleration at nodes for squared speed ``x``."""
    x = np.asarray(x, dtype=float)
    xx = x[..., None] if x.ndim == q1.ndim - 1 else x
    moving = np.abs(q1) > 1e-12
    c = np.where(moving, q1, 1.0)
    b1 = (-acc - q2 * xx) / c
    b2 = (acc - q2 * xx) / c
    lo = np.where(moving, np.minimum(b1, b2), -np.inf).max(axis=-1)
    hi = np.where(moving, np.maximum(b1, b2), np.inf).min(axis=-1)
    lo = np.maximum(lo, -apath)
    hi = np.minimum(hi, apath)
    fixed_ok = np.all(moving | (np.abs(q2) * xx <= acc), axis=-1)
    return lo, hi, fixed_ok


def _accel_mvc(q1, q2, acc, apath, xcap):
    def feasible(x):
        lo, hi, ok = _u_bounds(q1, q2, acc, apath, x)
        return ok & (lo <= hi)

    out = xcap.copy()
    bad = ~feasible(xcap)
    if bad.any():
        lo = np.zeros(bad.sum())
        hi = xcap[bad]
        a1, a2, ac, ap = q1[bad], q2[bad], acc[bad], apath[bad]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            l, h, ok = _u_bounds(a1, a2, ac, ap, mid)
            f = ok & (l <= h)
            lo = np.where(f, mid, lo)
            hi = np.where(f, hi, mid)
        out[bad] = lo
    return out


def _time_scale(h, q1, q2, acc, apath, xcap):
    """Squared path speeds at the nodes of one run (rest at both ends)."""
    xmax = _accel_mvc(q1, q2, acc, apath, xcap)
    xmax[0] = xmax[-1] = 0.0
    n = len(xmax)
    x = xmax.copy()
    for i in range(n - 1):
        _, hi, _ = _u_bounds(q1[i], q2[i], acc[i], apath[i], x[i])
        x[i + 1] = min(xmax[i + 1], max(x[i] + 2 * h * hi, 0.0))
    for i in range(n - 2, -1, -1):
        lo, _, _ = _u_bounds(q1[i + 1], q2[i + 1], acc[i + 1], apath[i + 1], x[i + 1])
        x[i] = min(x[i], max(x[i + 1] - 2 * h * lo, 0.0))
    return x


# ---------------------------------------------------------------------------
# trace


@dataclass
class ExecutionTrace:
    t: np.ndarray
    q: np.ndarray
    s: np.ndarray = None  # path arc length of each sample
    blend: np.ndarray = None  # sample lies in a blend zone
    segment: np.ndarray = None  # primitive index; -1 lead-in, n lead-out
    interior: tuple = None  # sample range between first and last true waypoint
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def interior_slice(self) -> slice:
        if self.interior is None:
            return slice(0, len(self.t))
        return slice(self.interior[0], self.interior[1] + 1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for t, q in zip(self.t, self.q):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in q])

    @classmethod
    def from_csv(cls, path) -> "ExecutionTrace":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != TRACE_HEADER:
                raise ValueError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.append([float(x) for x in row])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric value") from None
        arr = np.array(rows).reshape(-1, 7)
        return cls(arr[:, 0], arr[:, 1:])


# ---------------------------------------------------------------------------
# program extension


def extension_length(speed, cfg: ExecutorConfig, accel=None) -> float:
    a = cfg.path_accel if accel is None else min(accel, cfg.path_accel)
    return max(cfg.min_extension, cfg.extension_margin * speed**2 / (2.0 * a))


def _effective_path_accel(pc, s_at, q_at, model, cfg, delta=1e-3):
    """Path acceleration bound at ``s_at`` from the joint acceleration limits
    (the joint rates per unit path length scale the limits)."""
    P, R, _ = pc.eval([s_at - delta, s_at + delta])
    w = Rotation.from_matrix(R[1] @ R[0].T).as_rotvec() / (2 * delta)
    t = (P[1] - P[0]) / (2 * delta)
    dq_ds = np.linalg.lstsq(kin.jacobian(q_at, model), np.concatenate([w, t]), rcond=None)[0]
    acc = cfg.acc_margin * joint_accel_limits(q_at[None], model, cfg)[0]
    with np.errstate(divide="ignore"):
        return float(np.min(np.where(np.abs(dq_ds) > 1e-12, acc / np.abs(dq_ds), np.inf)))


def _cartesian_extension(pc, s_at, direction, q_at, speed, model, cfg):
    """Extension length at the path end ``s_at``, extending in ``direction`` (+1/-1).

    The acceleration bound is taken at the waypoint and at the far end of a
    first estimate, since the limits change along the extension.
    """
    a = _effective_path_accel(pc, s_at, q_at, model, cfg)
    L = extension_length(speed, cfg, a)
    P, R, _ = pc.eval([s_at + direction * L])
    sols = kin.inv(Pose.from_matrix(P[0], R[0]), model, q_ref=q_at)
    if sols:
        d = [np.abs(kin.angle_diff(q, q_at)).max() for q in sols]
        q_far = sols[int(np.argmin(d))]
        a = min(a, _effective_path_accel(pc, s_at + direction * L, q_far, model, cfg))
        L = extension_length(speed, cfg, a)
    return L


def _waypoint_joints(program: MotionProgram, model: RobotModel):
    """Start pose/joints of every primitive, tracked from the program start."""
    P0, R0 = kin.fwd_batch(program.start[None], model)
    Pa, Ra, qa = P0[0], R0[0], program.start.copy()
    out = []
    for k, prim in enumerate(program.primitives):
        out.append((Pa, Ra, qa))
        try:
            pc = _piece(prim, Pa, Ra, qa, model)
        except ValueError as exc:
            raise ExecutionError(str(exc), k) from None
        m = max(8, int(pc.L / 20.0))
        Pk, Rk, Qk = pc.eval(np.linspace(0.0, pc.L, m + 1))
        Qfix = np.full((m + 1, 6), np.nan) if Qk is None else Qk
        qa = _track(Pk, Rk, Qfix, qa, model, np.inf, np.full(m + 1, k))[-1]
        Pa, Ra = Pk[-1], Rk[-1]
    out.append((Pa, Ra, qa))
    return out


def _joint_extension(prim_dq, speed, q_at, model, cfg):
    acc = joint_accel_limits(q_at[None], model, cfg)[0]
    need = cfg.extension_margin * (speed * model.dq_max) ** 2 / (2.0 * acc)
    big = np.abs(prim_dq).max()
    return prim_dq / big * max(need.max(), 1e-3)


def extend_program(program: MotionProgram, model: RobotModel, cfg: ExecutorConfig | None = None) -> MotionProgram:
    """Add lead-in and lead-out moves continuing the first and last primitive."""
    cfg = cfg or ExecutorConfig()
    prog = MotionProgram(program.start.copy(), [p for p in program.primitives], sample_rate=program.sample_rate,
                         meta=dict(program.meta))
    way = _waypoint_joints(prog, model)
    first, last = prog.primitives[0], prog.primitives[-1]
    n = len(prog.primitives)

    Pa, Ra, qa = way[0]
    start_pose = Pose.from_matrix(Pa, Ra)
    if first.kind == MOVEJ:
        step = _joint_extension(first.target - qa, first.speed, qa, model, cfg)
        q_new = qa - step
        if not model.within_limits(q_new):
            raise ExtensionError("lead-in leaves the joint range; use a shorter extension or a slower speed", 0)
        lead_in = Primitive(MOVEJ, qa.copy(), first.speed, 0.0)
    else:
        pc = _piece(first, Pa, Ra, qa, model)
        L = _cartesian_extension(pc, 0.0, -1.0, qa, first.speed, model, cfg)
        Ps, Rs, _ = pc.eval([-L, -0.5 * L])
        q_new = _reach(Ps[0], Rs[0], qa, model, "lead-in", 0)
        via = Pose.from_matrix(Ps[1], Rs[1]) if first.kind == MOVEC else None
        lead_in = Primitive(first.kind, start_pose, first.speed, 0.0, via)

    Pb, Rb, qb = way[n - 1]
    _, _, q_end = way[n]
    if last.kind == MOVEJ:
        step = _joint_extension(last.target - qb, last.speed, last.target, model, cfg)
        q_out = last.target + step
        if not model.within_limits(q_out):
            raise ExtensionError("lead-out leaves the joint range; use a shorter extension or a slower speed", n - 1)
        lead_out = Primitive(MOVEJ, q_out, last.speed, 0.0)
    else:
        pc = _piece(last, Pb, Rb, qb, model)
        L = _cartesian_extension(pc, pc.L, 1.0, q_end, last.speed, model, cfg)
        Pe, Re, _ = pc.eval([pc.L + L, pc.L + 0.5 * L])
        _reach(Pe[0], Re[0], q_end, model, "lead-out", n - 1)
        via = Pose.from_matrix(Pe[1], Re[1]) if last.kind == MOVEC else None
        lead_out = Primitive(last.kind, Pose.from_matrix(Pe[0], Re[0]), last.speed, 0.0, via)

    prog.start = q_new
    prog.lead_in = lead_in
    prog.lead_out = lead_out
    prog.meta["original_start"] = program.start.copy()
    return prog


def _reach(P, R, q_ref, model, what, seg):
    sols = kin.inv(Pose.from_matrix(P, R), model, q_ref=q_ref)
    if not sols:
        raise ExtensionError(f"{what} leaves the workspace; use a shorter extension or a slower speed", seg)
    d = [np.abs(kin.angle_diff(s, q_ref)).max() for s in sols]
    return sols[int(np.argmin(d))]


# ---------------------------------------------------------------------------
# execution


def plan(program: MotionProgram, model: RobotModel, cfg: ExecutorConfig | None = None, extend=True) -> PlannedPath:
    cfg = cfg or ExecutorConfig()
    if extend and not program.extended:
        program = extend_program(program, model, cfg)
    return PlannedPath(program, model, cfg)


def execute(program: MotionProgram, model: RobotModel, cfg: ExecutorConfig | None = None, seed=None,
            extend=True) -> ExecutionTrace:
    """Run a program through the virtual controller and return its joint trace.

    Programs without lead-in/lead-out moves are extended first unless
    ``extend`` is false (the motion then starts and ends at rest on the
    first and last waypoint).
    """
    cfg = cfg or ExecutorConfig()
    fs = cfg.sample_rate or program.sample_rate or 250.0
    path = plan(program, model, cfg, extend)
    h_target = cfg.grid_step
    cuts = [0.0] + list(path.stops) + [path.length]
    runs = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-12:
            continue
        n = max(2, int(np.ceil((b - a) / h_target)))
        runs.append(np.linspace(a, b, n + 1))

    q_prev = path.q_start
    t0 = 0.0
    run_data = []
    for s_nodes in runs:
        q = path.joints(s_nodes, q_prev)
        q_prev = q[-1]
        h = s_nodes[1] - s_nodes[0]
        q1 = np.gradient(q, h, axis=0, edge_order=2)
        q2 = np.gradient(q1, h, axis=0, edge_order=2)
        idx = path.section_index(s_nodes)
        secs = [path.sections[i] for i in idx]
        vcap = np.array([x.vcap for x in secs])
        jfrac = np.array([x.jfrac for x in secs])
        apath = np.array([cfg.path_accel if x.cartesian else np.inf for x in secs])
        acc = cfg.acc_margin * joint_accel_limits(q, model, cfg)
        dq_lim = np.minimum(jfrac, cfg.vel_margin)[:, None] * model.dq_max
        with np.errstate(divide="ignore"):
            xv = np.min(np.where(np.abs(q1) > 1e-12, (dq_lim / np.abs(q1)) ** 2, np.inf), axis=1)
        xcap = np.minimum(np.minimum(vcap**2, xv), 1e12)
        x = _time_scale(h, q1, q2, acc, apath, xcap)
        v = np.sqrt(x)
        vs = v[:-1] + v[1:]
        if np.any(vs <= 0):
            k = int(np.argmax(vs <= 0))
            raise ExecutionError("path speed drops to zero (singular configuration)",
                                 int(path.segment_of(s_nodes[k])[0]))
        dt = 2 * h / vs
        t_nodes = t0 + np.concatenate([[0.0], np.cumsum(dt)])
        u = (x[1:] - x[:-1]) / (2 * h)
        run_data.append((s_nodes, t_nodes, v, u))
        t0 = t_nodes[-1]

    T = t0
    # the last sample may fall after T; the robot then rests at the path end
    t = np.arange(int(np.ceil(T * fs - 1e-9)) + 1) / fs
    s = np.full_like(t, path.length)
    for s_nodes, t_nodes, v, u in run_data:
        m = (t >= t_nodes[0]) & (t <= t_nodes[-1])
        if not m.any():
            continue
        k = np.clip(np.searchsorted(t_nodes, t[m], side="right") - 1, 0, len(u) - 1)
        tau = t[m] - t_nodes[k]
        s[m] = np.minimum(s_nodes[k] + v[k] * tau + 0.5 * u[k] * tau * tau, s_nodes[k + 1])
    s = np.maximum.accumulate(np.clip(s, 0.0, path.length))
    q = path.joints(s)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        q = np.clip(q + rng.normal(0.0, cfg.noise_sigma, q.shape), model.q_min, model.q_max)
    inside = np.flatnonzero((s >= path.s_first - 1e-9) & (s <= path.s_last + 1e-9))
    interior = (int(inside[0]), int(inside[-1])) if inside.size else None
    return ExecutionTrace(
        t, q, s, path.blend_mask(s), path.segment_of(s), interior,
        meta={"duration_s": T, "path_length_mm": path.length, "stops": len(path.stops),
              "zones_saturated": path.zones_saturated},
    )


def tcp_speed(trace: ExecutionTrace, model: RobotModel):
    """TCP speed (mm/s) by central differences; one-sided at the ends."""
    P, _ = kin.fwd_batch(trace.q, model)
    return np.linalg.norm(np.gradient(P, trace.t, axis=0), axis=1)


def commanded_speed(program: MotionProgram) -> float:
    sp = [p.speed for p in program.primitives if p.kind != MOVEJ]
    return float(min(sp)) if sp else float("nan")


@dataclass
class ZoneCalibration:
    program: MotionProgram
    zone: float
    converged: bool
    history: list  # (zone, min interior speed / commanded)


def calibrate_zone(program: MotionProgram, model: RobotModel, z0=10.0, growth=5.0, cap=100.0, ratio=0.95,
                   cfg: ExecutorConfig | None = None) -> ZoneCalibration:
    """Smallest uniform zone whose trace keeps >= ``ratio`` of the commanded speed.

    Growth stops at ``cap`` or once every zone is limited by half the
    adjacent segment lengths; the best zone so far is then returned with
    ``converged`` false.
    """
    cfg = cfg or ExecutorConfig()
    base = MotionProgram(program.start.copy(), list(program.primitives), sample_rate=program.sample_rate,
                         meta=dict(program.meta))
    v_cmd = commanded_speed(base)
    history = []
    best = None
    z = float(z0)
    while True:
        prog = base.with_zone(z)
        tr = execute(prog, model, cfg)
        v = tcp_speed(tr, model)[tr.interior_slice()]
        r = float(v.min() / v_cmd) if v.size else 0.0
        history.append((z, r))
        if best is None or r > best[1] + 1e-12:
            best = (z, r, prog)
        if r >= ratio:
            return ZoneCalibration(prog, z, True, history)
        if z + growth > cap + 1e-9 or tr.meta["zones_saturated"]:
            # larger zones would not change the path any more
            break
        z += growth
    logger.warning("calibrate_zone: no convergence up to zone %.1f mm, best ratio %.3f at zone %.1f", z, best[1], best[0])
    prog = best[2]
    prog.meta["zone_converged"] = False
    return ZoneCalibration(prog, best[0], False, history)
