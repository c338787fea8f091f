"""Kinematics of a 6R arm with a spherical wrist.

The arm is described as a product of exponentials: every joint has a unit
axis and a point on that axis, both expressed in the base frame at the zero
configuration.  The flange frame at zero configuration sits on the joint-6
origin with base-aligned axes; the tool transform maps flange to TCP.

Lengths are millimetres, angles radians.  Most functions accept either a
single joint vector ``(6,)`` or a batch ``(N, 6)``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

BUNDLED_MODEL = Path(__file__).parent / "data" / "irb6640.yaml"

WRIST_SINGULAR_TOL = 1e-8
N_BRANCHES = 8


class ModelError(ValueError):
    """Raised when a robot-model file is malformed or violates invariants."""


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def beta_to_rotation(beta):
    """Angle-product (rotation vector) to rotation matrix; batches allowed."""
    return Rotation.from_rotvec(np.asarray(beta, dtype=float)).as_matrix()


def rotation_to_beta(R):
    """Rotation matrix to canonical angle-product vector with norm <= pi."""
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(R):
    """Angle of a rotation matrix, accurate near 0 and near pi."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(
        np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1),
        axis=-1,
    )
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def orientation_distance(R1, R2):
    """Angle of the relative rotation between two orientations (rad)."""
    return rotation_angle(np.swapaxes(R1, -1, -2) @ R2)


def unwrap_beta(beta, ref):
    """Equivalent angle-product vector of ``beta`` closest to ``ref``.

    Rotation vectors ``b`` and ``b - 2*pi*b/|b|`` describe the same rotation;
    linear interpolation between orientations needs consistent representatives.
    """
    beta = np.asarray(beta, dtype=float)
    n = np.linalg.norm(beta)
    if n < 1e-12:
        return beta.copy()
    axis = beta / n
    best = beta
    best_d = np.linalg.norm(beta - ref)
    for k in (-1, 1):
        cand = axis * (n + 2.0 * math.pi * k)
        d = np.linalg.norm(cand - ref)
        if d < best_d:
            best, best_d = cand, d
    return np.array(best, dtype=float)


@dataclass(frozen=True)
class Pose:
    """TCP pose: position ``p`` in mm and angle-product orientation ``beta``."""

    p: np.ndarray
    beta: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return beta_to_rotation(self.beta)

    @classmethod
    def from_matrix(cls, p, R) -> "Pose":
        return cls(np.asarray(p, dtype=float).copy(), rotation_to_beta(R))


@dataclass(frozen=True)
class AccelTable:
    """Acceleration limits of joints 1-3 on a regular (q2, q3) grid.

    ``values[i, j]`` holds the three limits (rad/s^2) at ``(q2_grid[i], q3_grid[j])``.
    """

    q2_grid: np.ndarray
    q3_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        q2 = np.atleast_1d(np.asarray(self.q2_grid, dtype=float))
        q3 = np.atleast_1d(np.asarray(self.q3_grid, dtype=float))
        vals = np.asarray(self.values, dtype=float).reshape(len(q2), len(q3), 3)
        object.__setattr__(self, "q2_grid", q2)
        object.__setattr__(self, "q3_grid", q3)
        object.__setattr__(self, "values", vals)
        if np.any(vals <= 0):
            raise ModelError("acceleration table entries must be positive")
        if np.any(np.diff(q2) <= 0) or np.any(np.diff(q3) <= 0):
            raise ModelError("acceleration table grid must be strictly increasing")

    @classmethod
    def constant(cls, limits) -> "AccelTable":
        return cls(np.array([0.0]), np.array([0.0]), np.asarray(limits, dtype=float).reshape(1, 1, 3))

    def lookup(self, q2, q3):
        """Bilinear interpolation; returns ``(limits, clamped)``.

        Queries outside the grid are clamped to the boundary and flagged.
        """
        q2 = np.asarray(q2, dtype=float)
        q3 = np.asarray(q3, dtype=float)
        scalar = q2.ndim == 0 and q3.ndim == 0
        q2, q3 = np.broadcast_arrays(np.atleast_1d(q2), np.atleast_1d(q3))
        c2 = np.clip(q2, self.q2_grid[0], self.q2_grid[-1])
        c3 = np.clip(q3, self.q3_grid[0], self.q3_grid[-1])
        clamped = (c2 != q2) | (c3 != q3)
        i, u = _cell(self.q2_grid, c2)
        j, w = _cell(self.q3_grid, c3)
        v = self.values
        i1 = np.minimum(i + 1, len(self.q2_grid) - 1)
        j1 = np.minimum(j + 1, len(self.q3_grid) - 1)
        u = u[:, None]
        w = w[:, None]
        out = (
            (1 - u) * (1 - w) * v[i, j]
            + u * (1 - w) * v[i1, j]
            + (1 - u) * w * v[i, j1]
            + u * w * v[i1, j1]
        )
        if scalar:
            return out[0], bool(clamped[0])
        return out, clamped

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["q2_rad", "q3_rad", "a1_rad_s2", "a2_rad_s2", "a3_rad_s2"])
            for i, a in enumerate(self.q2_grid):
                for j, b in enumerate(self.q3_grid):
                    writer.writerow([repr(float(a)), repr(float(b))] + [repr(float(x)) for x in self.values[i, j]])

    @classmethod
    def from_csv(cls, path) -> "AccelTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [h.strip() for h in header] != ["q2_rad", "q3_rad", "a1_rad_s2", "a2_rad_s2", "a3_rad_s2"]:
                raise ModelError(f"{path}: unexpected acceleration-table header {header}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    rows.append([float(x) for x in row])
                except ValueError as exc:
                    raise ModelError(f"{path}:{lineno}: {exc}") from None
        arr = np.array(rows)
        q2 = np.unique(arr[:, 0])
        q3 = np.unique(arr[:, 1])
        if len(arr) != len(q2) * len(q3):
            raise ModelError(f"{path}: grid is not complete")
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        return cls(q2, q3, arr[order, 2:].reshape(len(q2), len(q3), 3))


def _cell(grid, x):
    if len(grid) == 1:
        return np.zeros(len(x), dtype=int), np.zeros(len(x))
    i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    u = (x - grid[i]) / (grid[i + 1] - grid[i])
    return i, u


@dataclass(frozen=True)
class RobotModel:
    joint_axes: np.ndarray
    joint_origins: np.ndarray
    tool_R: np.ndarray
    tool_p: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    dq_max: np.ndarray
    ddq_wrist: np.ndarray
    accel_table: AccelTable
    name: str = "robot"
    wrist_center: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("joint_axes", "joint_origins", "tool_R", "tool_p", "q_min", "q_max", "dq_max", "ddq_wrist"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        h = self.joint_axes
        if h.shape != (6, 3) or self.joint_origins.shape != (6, 3):
            raise ModelError("joint_axes and joint_origins must be 6x3")
        if np.any(np.abs(np.linalg.norm(h, axis=1) - 1.0) > 1e-9):
            raise ModelError("joint axes must be unit vectors")
        if np.any(self.q_min >= self.q_max):
            raise ModelError("q_min must be below q_max")
        if np.any(self.dq_max <= 0) or np.any(self.ddq_wrist <= 0):
            raise ModelError("velocity and wrist acceleration limits must be positive")
        if abs(np.linalg.det(self.tool_R) - 1.0) > 1e-9:
            raise ModelError("tool rotation must be a proper rotation")
        w = _common_point(h[3:], self.joint_origins[3:])
        if w is None:
            raise ModelError("joints 4-6 do not intersect (spherical wrist required)")
        if np.linalg.norm(np.cross(h[1], h[2])) > 1e-9:
            raise ModelError("closed-form IK needs parallel joint-2 and joint-3 axes")
        object.__setattr__(self, "wrist_center", w)
        Ks = np.array([skew(a) for a in h])
        object.__setattr__(self, "_K", Ks)
        object.__setattr__(self, "_K2", Ks @ Ks)

    @property
    def flange_origin(self) -> np.ndarray:
        return self.joint_origins[5]

    @property
    def p_tcp0(self) -> np.ndarray:
        """TCP position at the zero configuration."""
        return self.joint_origins[5] + self.tool_p

    def within_limits(self, q, tol=0.0):
        q = np.asarray(q)
        return np.all((q >= self.q_min - tol) & (q <= self.q_max + tol), axis=-1)

    def accel_limits(self, q):
        """Per-joint acceleration limits (rad/s^2) at configuration(s) ``q``."""
        q = np.atleast_2d(q)
        a123, _ = self.accel_table.lookup(q[:, 1], q[:, 2])
        return np.hstack([a123, np.broadcast_to(self.ddq_wrist, (len(q), 3))])


def _common_point(axes, origins, tol=1e-6):
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for h, o in zip(axes, origins):
        P = np.eye(3) - np.outer(h, h)
        A += P
        b += P @ o
    try:
        w = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None
    for h, o in zip(axes, origins):
        d = (w - o) - h * np.dot(h, w - o)
        if np.linalg.norm(d) > tol:
            return None
    return w


def load_model(path=None) -> RobotModel:
    """Load a robot-model YAML file (defaults to the bundled IRB6640-class arm)."""
    path = Path(path) if path is not None else BUNDLED_MODEL
    if not path.exists():
        raise ModelError(f"robot model not found: {path}")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    try:
        tool = doc["tool"]
        tool_R = beta_to_rotation(tool.get("rotation_rotvec_rad", [0, 0, 0]))
        acc = doc["accel_table"]
        if "csv" in acc:
            table = AccelTable.from_csv(path.parent / acc["csv"])
        elif "constant_rad_s2" in acc:
            table = AccelTable.constant(acc["constant_rad_s2"])
        else:
            table = AccelTable(acc["q2_grid_rad"], acc["q3_grid_rad"], acc["values_rad_s2"])
        axes = np.array(doc["joint_axes"], dtype=float)
        return RobotModel(
            joint_axes=axes / np.linalg.norm(axes, axis=1, keepdims=True),
            joint_origins=doc["joint_origins_mm"],
            tool_R=tool_R,
            tool_p=tool["position_mm"],
            q_min=doc["q_min_rad"],
            q_max=doc["q_max_rad"],
            dq_max=doc["dq_max_rad_s"],
            ddq_wrist=doc["ddq_wrist_rad_s2"],
            accel_table=table,
            name=doc.get("name", path.stem),
        )
    except KeyError as exc:
        raise ModelError(f"{path}: missing field {exc}") from None


def with_accel_table(model: RobotModel, table: AccelTable) -> RobotModel:
    return RobotModel(
        model.joint_axes, model.joint_origins, model.tool_R, model.tool_p, model.q_min,
        model.q_max, model.dq_max, model.ddq_wrist, table, model.name,
    )


# ---------------------------------------------------------------------------
# forward kinematics


_I3 = np.eye(3)


def _rot_batch(h, theta, K=None, K2=None):
    if K is None:
        K = skew(h)
        K2 = K @ K
    s = np.sin(theta)[:, None, None]
    c = np.cos(theta)[:, None, None]
    return _I3 + s * K + (1.0 - c) * K2


def cross(a, b):
    """Cross product along the last axis (faster than np.cross for small batches)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _chain(model: RobotModel, Q):
    """Return per-joint accumulated rotations/translations and the TCP frame."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = len(Q)
    R = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    p = np.zeros((n, 3))
    axes = np.empty((n, 6, 3))
    points = np.empty((n, 6, 3))
    for i in range(6):
        h = model.joint_axes[i]
        o = model.joint_origins[i]
        axes[:, i] = R @ h
        points[:, i] = p + R @ o
        Ri = _rot_batch(h, Q[:, i], model._K[i], model._K2[i])
        p = p + np.einsum("nij,nj->ni", R, o - Ri @ o)
        R = R @ Ri
    p_tcp = p + R @ model.p_tcp0
    R_tcp = R @ model.tool_R
    return axes, points, p_tcp, R_tcp


def fwd_batch(Q, model: RobotModel):
    """Forward kinematics for ``(N, 6)`` joints: returns ``(p (N,3), R (N,3,3))``."""
    _, _, p, R = _chain(model, Q)
    return p, R


def fwd(q, model: RobotModel) -> Pose:
    q = np.asarray(q, dtype=float)
    if not model.within_limits(q, 1e-9):
        logger.warning("fwd: configuration outside joint limits: %s", q)
    p, R = fwd_batch(q[None], model)
    return Pose(p[0], rotation_to_beta(R[0]))


def ez(q, model: RobotModel):
    """Unit z-axis of the TCP frame in the base frame."""
    _, R = fwd_batch(q, model)
    out = R[:, :, 2]
    return out[0] if np.ndim(q) == 1 else out


def jacobian(q, model: RobotModel):
    """Spatial Jacobian at the TCP: rows 0-2 angular (rad/s), rows 3-5 linear (mm/s)."""
    axes, points, p, _ = _chain(model, q)
    w = axes
    v = cross(w, p[:, None, :] - points)
    J = np.concatenate([w, v], axis=2).transpose(0, 2, 1)
    return J[0] if np.ndim(q) == 1 else J


def manipulability(q, model: RobotModel):
    """Yoshikawa measure sqrt(det(J J^T)) with the linear rows scaled to metres."""
    J = np.array(jacobian(q, model), dtype=float)
    J[..., 3:, :] *= 1e-3
    d = np.linalg.det(J @ np.swapaxes(J, -1, -2))
    return np.sqrt(np.maximum(d, 0.0))


# ---------------------------------------------------------------------------
# inverse kinematics (Paden-Kahan subproblems, vectorised)


def _perp(k, x):
    return x - np.outer(x @ k, k) if x.ndim == 2 else x - k * (x @ k)


def _sp1(k, a, b):
    """Angle rotating ``a`` onto ``b`` about ``k`` (components along k ignored)."""
    ap = _perp(k, a)
    bp = _perp(k, b)
    return np.arctan2(np.cross(ap, bp) @ k, np.sum(ap * bp, axis=-1))


def _sp3(k, p, q, delta):
    """Both angles with ``|rot(k, t) p - q|_perp = delta``; NaN when unreachable."""
    pp = _perp(k, p)
    qp = _perp(k, q)
    npp = np.linalg.norm(pp, axis=-1)
    nqp = np.linalg.norm(qp, axis=-1)
    t0 = np.arctan2(np.cross(pp, qp) @ k, np.sum(pp * qp, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (npp**2 + nqp**2 - delta**2) / (2 * npp * nqp)
    c = np.where(np.abs(c) <= 1.0 + 1e-10, np.clip(c, -1.0, 1.0), np.nan)
    phi = np.arccos(c)
    return t0 + phi, t0 - phi


def _sp4(k, h, p, d):
    """Both angles with ``h . rot(k, t) p = d``; NaN when no solution."""
    p = np.atleast_2d(p)
    pp = _perp(k, p)
    A = pp @ h
    B = np.cross(np.broadcast_to(k, pp.shape), pp) @ h
    C = d - (p @ k) * (k @ h)
    r = np.hypot(A, B)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = C / r
    c = np.where(np.abs(c) <= 1.0 + 1e-10, np.clip(c, -1.0, 1.0), np.nan)
    base = np.arctan2(B, A)
    phi = np.arccos(c)
    return base + phi, base - phi


def _wrap(x):
    return x - 2 * np.pi * np.ceil((x - np.pi) / (2 * np.pi))


def _rodrigues(k, t):
    return _rot_batch(k, np.asarray(t, dtype=float))


def inv_branches(P, R, model: RobotModel, q4_ref=None):
    """All eight closed-form branches for ``N`` target poses.

    Returns an ``(N, 8, 6)`` array with NaN rows for branches that do not exist.
    Branch index is ``4*shoulder + 2*elbow + wrist``.  Angles lie in (-pi, pi].
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    n = len(P)
    h = model.joint_axes
    o = model.joint_origins
    W0 = model.wrist_center
    Rg = R @ model.tool_R.T  # R1..R6
    W = P - Rg @ (model.p_tcp0 - W0)
    if q4_ref is None:
        q4_ref = np.zeros(n)
    else:
        q4_ref = np.broadcast_to(np.asarray(q4_ref, dtype=float), (n,))

    out = np.full((n, N_BRANCHES, 6), np.nan)
    d1 = h[1] @ (W0 - o[0])
    q1a, q1b = _sp4(h[0], h[1], W - o[0], np.full(n, d1))
    for i1, t1 in enumerate((q1a, q1b)):
        q1 = -t1
        R1 = _rodrigues(h[0], np.nan_to_num(q1))
        X = np.einsum("nji,nj->ni", R1, W - o[0]) + o[0]
        delta = np.linalg.norm(_perp(h[1], X - o[1]), axis=-1)
        q3s = _sp3(h[2], np.broadcast_to(W0 - o[2], (n, 3)), np.broadcast_to(o[1] - o[2], (n, 3)), delta)
        for i3, q3 in enumerate(q3s):
            R3 = _rodrigues(h[2], np.nan_to_num(q3))
            Y = R3 @ (W0 - o[2]) + o[2]
            q2 = _sp1(h[1], Y - o[1], X - o[1])
            R2 = _rodrigues(h[1], q2)
            R123 = R1 @ R2 @ R3
            Rw = np.swapaxes(R123, 1, 2) @ Rg
            d5 = np.einsum("i,nij,j->n", h[3], Rw, h[5])
            q5s = _sp4(h[4], h[3], np.broadcast_to(h[5], (n, 3)), d5)
            for i5, q5 in enumerate(q5s):
                R5 = _rodrigues(h[4], np.nan_to_num(q5))
                a = R5 @ h[5]
                b = Rw @ h[5]
                ap = _perp(h[3], a)
                singular = np.linalg.norm(ap, axis=-1) < WRIST_SINGULAR_TOL
                q4 = np.where(singular, q4_ref, _sp1(h[3], a, b))
                R4 = _rodrigues(h[3], q4)
                R6 = np.swapaxes(R4 @ R5, 1, 2) @ Rw
                v = _perp(h[5], h[4] if np.linalg.norm(np.cross(h[4], h[5])) > 1e-6 else h[3])
                v = v / np.linalg.norm(v)
                q6 = _sp1(h[5], np.broadcast_to(v, (n, 3)), R6 @ v)
                idx = 4 * i1 + 2 * i3 + i5
                out[:, idx] = np.stack([q1, q2, q3, q4, q5, q6], axis=1)
    out = np.where(np.isnan(out).any(axis=-1, keepdims=True), np.nan, out)
    return _wrap(out)


def _polish(q, p, R, model, iters=3):
    for _ in range(iters):
        pc, Rc = fwd_batch(q[None], model)
        e_rot = rotation_to_beta(R @ Rc[0].T)
        e = np.concatenate([e_rot, p - pc[0]])
        if np.linalg.norm(e[:3]) < 1e-13 and np.linalg.norm(e[3:]) < 1e-10:
            break
        J = jacobian(q, model)
        if np.linalg.cond(J) > 1e8:
            break
        q = q + np.linalg.solve(J, e)
    return q


def nearest_representation(q, q_ref, model: RobotModel):
    """Shift each joint by multiples of 2*pi towards ``q_ref`` while staying in limits."""
    q = np.array(q, dtype=float)
    k = np.round((q_ref - q) / (2 * np.pi))
    cand = q + 2 * np.pi * k
    ok = (cand >= model.q_min - 1e-12) & (cand <= model.q_max + 1e-12)
    return np.where(ok, cand, q)


def canonical_in_limits(q, model: RobotModel):
    """Prefer the (-pi, pi] angle; fall back to +-2*pi when that is out of limits."""
    q = np.array(q, dtype=float)
    for shift in (2 * np.pi, -2 * np.pi):
        bad = (q < model.q_min - 1e-12) | (q > model.q_max + 1e-12)
        cand = q + shift
        fix = bad & (cand >= model.q_min - 1e-12) & (cand <= model.q_max + 1e-12)
        q = np.where(fix, cand, q)
    return q


def inv(pose: Pose, model: RobotModel, q_ref=None, keep_out_of_limits=False, dedup_tol=1e-7):
    """All inverse-kinematics solutions (at most eight) for a TCP pose.

    Unreachable poses give an empty list.  Out-of-limit branches are dropped
    unless ``keep_out_of_limits`` is set.  With ``q_ref`` given, joints with a
    range wider than 2*pi are unwrapped towards it and, at a wrist singularity,
    joint 4 keeps ``q_ref[3]``.
    """
    R = pose.R
    p = np.asarray(pose.p, dtype=float)
    q4_ref = 0.0 if q_ref is None else float(q_ref[3])
    branches = inv_branches(p[None], R[None], model, q4_ref=q4_ref)[0]
    sols = []
    for q in branches:
        if np.isnan(q).any():
            continue
        q = _polish(q, p, R, model)
        q = _wrap(q)
        pc, Rc = fwd_batch(q[None], model)
        if np.linalg.norm(pc[0] - p) > 1e-6 or orientation_distance(Rc[0], R) > 1e-8:
            continue
        q = canonical_in_limits(q, model) if q_ref is None else nearest_representation(q, np.asarray(q_ref), model)
        if not keep_out_of_limits and not model.within_limits(q, 1e-12):
            continue
        if any(np.max(np.abs(_wrap(q - s))) < dedup_tol for s in sols):
            continue
        sols.append(q)
    return sols


def angle_diff(a, b):
    """Elementwise wrapped difference ``a - b`` in (-pi, pi]."""
    return _wrap(np.asarray(a) - np.asarray(b))
