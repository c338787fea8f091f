"""Redundancy resolution: tool roll along the path, curve placement, arm branch.

The roll about the tool z-axis is resolved point by point with a damped,
box-constrained QP on the reduced Jacobian followed by a line search.  The
resulting joint path yields a traversal-speed profile, and the placement of
the curve plus the initial IK branch are chosen by differential evolution to
maximise the slowest point of that profile.
"""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from .curves import Curve, CurvePoint, CurvePose, transform_curve
from .qp import InfeasibleBox, solve_box_qp

logger = logging.getLogger(__name__)

DEFAULT_W_Q = 0.01
POS_TOL = 0.01  # mm
NORMAL_TOL = 1e-4  # rad
# internal convergence targets; tighter than the acceptance tolerances so the
# joint path is smooth enough for second differences
_POS_TIGHT = 1e-6
_NORMAL_TIGHT = 1e-9
LINE_SEARCH_ALPHAS = (1.0, 0.5, 0.25, 0.125, 0.0625)

# documented mid-workspace placement used by the baseline
BASELINE_P_CURVE = np.array([1800.0, 0.0, 600.0])


class InvalidState(ValueError):
    pass


class PathFollowError(RuntimeError):
    def __init__(self, index, reason):
        super().__init__(f"path following failed at point {index}: {reason}")
        self.index = index
        self.reason = reason


class InfeasibleSearch(RuntimeError):
    def __init__(self, histogram):
        super().__init__(f"every candidate was infeasible: {dict(histogram)}")
        self.histogram = dict(histogram)


@dataclass
class JointPath:
    q: np.ndarray

    def __len__(self):
        return len(self.q)


@dataclass
class SpeedProfile:
    v: np.ndarray
    dt: np.ndarray

    @property
    def min_speed(self) -> float:
        return float(np.min(self.v))


# ---------------------------------------------------------------------------
# per-point QP


def reduced_jacobian(J, e_z):
    """Map joint increments to (normal increment, position increment)."""
    J = np.asarray(J)
    e_z = np.asarray(e_z)
    if J.ndim == 2:
        return np.vstack([-kin.skew(e_z) @ J[:3], J[3:]])
    # -(e_z x w_i) for every column i
    top = -np.swapaxes(kin.cross(e_z[:, None, :], np.swapaxes(J[:, :3, :], 1, 2)), 1, 2)
    return np.concatenate([top, J[:, 3:]], axis=1)


def qp_step(q_prev, target: CurvePoint, model: kin.RobotModel, W_q=DEFAULT_W_Q, return_problem=False):
    """Joint increment towards ``target`` from ``q_prev``.

    Minimises ``|J_r dq - nu|^2 + W_q |dq|^2`` inside the joint box, with
    ``nu = (n* - e_z, p* - p)``.
    """
    q_prev = np.asarray(q_prev, dtype=float)
    if not model.within_limits(q_prev, 1e-9):
        raise InvalidState(f"q_prev outside joint limits: {q_prev}")
    p, R = kin.fwd_batch(q_prev[None], model)
    e_z = R[0, :, 2]
    J = kin.jacobian(q_prev, model)
    Jr = reduced_jacobian(J, e_z)
    nu = np.concatenate([target.n_star - e_z, target.p_star - p[0]])
    H = Jr.T @ Jr + W_q * np.eye(6)
    g = -Jr.T @ nu
    lo = np.minimum(model.q_min - q_prev, 0.0)
    hi = np.maximum(model.q_max - q_prev, 0.0)
    try:
        dq = solve_box_qp(H, g, lo, hi)
    except InfeasibleBox as exc:
        raise InvalidState(str(exc)) from None
    if return_problem:
        return dq, (H, g, lo, hi)
    return dq


def _normal_angle(e, n):
    return np.arctan2(np.linalg.norm(kin.cross(e, n), axis=-1), np.sum(e * n, axis=-1))


def follow_curve_batch(Q0, P, N, model: kin.RobotModel, W_q=DEFAULT_W_Q, pos_tol=POS_TOL, normal_tol=NORMAL_TOL,
                       max_iter=8, step_cap=0.2):
    """Follow ``B`` curves at once.

    ``Q0`` is ``(B, 6)``, ``P`` and ``N`` are ``(B, K, 3)``.  Returns the joint
    paths ``(B, K, 6)`` and, per curve, the first failing index (-1 on success).
    Failed curves keep NaN beyond the failing index.
    """
    Q0 = np.atleast_2d(np.asarray(Q0, dtype=float))
    P = np.asarray(P, dtype=float)
    N = np.asarray(N, dtype=float)
    B, K = P.shape[:2]
    out = np.full((B, K, 6), np.nan)
    fail = np.full(B, -1)
    reasons = [""] * B
    p0, R0 = kin.fwd_batch(Q0, model)
    ok0 = (np.linalg.norm(p0 - P[:, 0], axis=1) < 1e-3) & (_normal_angle(R0[:, :, 2], N[:, 0]) < 1e-3)
    for b in np.flatnonzero(~ok0):
        fail[b] = 0
        reasons[b] = "start configuration does not match the first point"
    out[ok0, 0] = Q0[ok0]
    alphas = np.array(LINE_SEARCH_ALPHAS)
    eye = np.eye(6)
    for k in range(1, K):
        live = np.flatnonzero(fail < 0)
        if live.size == 0:
            break
        q = out[live, k - 1].copy()
        pt = P[live, k]
        nt = N[live, k]
        p, R = kin.fwd_batch(q, model)
        ez = R[:, :, 2]
        res = np.sqrt(np.sum((ez - nt) ** 2, axis=1) + np.sum((p - pt) ** 2, axis=1))
        done = (np.linalg.norm(p - pt, axis=1) < _POS_TIGHT) & (_normal_angle(ez, nt) < _NORMAL_TIGHT)
        stalled = np.zeros(len(live), dtype=bool)
        for _ in range(max_iter):
            act = np.flatnonzero(~done & ~stalled)
            if act.size == 0:
                break
            qa = q[act]
            J = kin.jacobian(qa, model)
            if J.ndim == 2:
                J = J[None]
            Jr = reduced_jacobian(J, ez[act])
            nu = np.concatenate([nt[act] - ez[act], pt[act] - p[act]], axis=1)
            H = np.einsum("bki,bkj->bij", Jr, Jr) + W_q * eye
            g = np.einsum("bki,bk->bi", Jr, nu)
            dq = np.linalg.solve(H, g[:, :, None])[:, :, 0]
            lo = np.minimum(model.q_min - qa, 0.0)
            hi = np.maximum(model.q_max - qa, 0.0)
            viol = np.flatnonzero(np.any((dq < lo - 1e-15) | (dq > hi + 1e-15), axis=1))
            for i in viol:
                dq[i] = solve_box_qp(H[i], -g[i], lo[i], hi[i])
            cand = qa[:, None, :] + alphas[None, :, None] * dq[:, None, :]
            pc, Rc = kin.fwd_batch(cand.reshape(-1, 6), model)
            pc = pc.reshape(len(act), len(alphas), 3)
            ezc = Rc[:, :, 2].reshape(len(act), len(alphas), 3)
            rc = np.sqrt(np.sum((ezc - nt[act, None]) ** 2, axis=2) + np.sum((pc - pt[act, None]) ** 2, axis=2))
            best = np.argmin(rc, axis=1)
            rbest = rc[np.arange(len(act)), best]
            improved = rbest < res[act]
            sel = act[improved]
            bi = best[improved]
            q[sel] = cand[improved, bi]
            p[sel] = pc[improved, bi]
            ez[sel] = ezc[improved, bi]
            res[sel] = rbest[improved]
            stalled[act[~improved]] = True
            done = (np.linalg.norm(p - pt, axis=1) < _POS_TIGHT) & (_normal_angle(ez, nt) < _NORMAL_TIGHT)
        perr = np.linalg.norm(p - pt, axis=1)
        nerr = _normal_angle(ez, nt)
        jump = np.max(np.abs(q - out[live, k - 1]), axis=1)
        bad = (perr >= pos_tol) | (nerr >= normal_tol) | (jump > step_cap)
        for i in np.flatnonzero(bad):
            b = live[i]
            fail[b] = k
            if jump[i] > step_cap:
                reasons[b] = f"joint step {jump[i]:.3g} rad exceeds cap"
            else:
                reasons[b] = f"residual {perr[i]:.3g} mm / {nerr[i]:.3g} rad above tolerance"
        good = live[~bad]
        out[good, k] = q[~bad]
    return out, fail, reasons


def follow_curve(q_0, curve: Curve, model: kin.RobotModel, W_q=DEFAULT_W_Q, **kw) -> JointPath:
    """Resolve the tool roll along ``curve`` starting from ``q_0``."""
    out, fail, reasons = follow_curve_batch(np.asarray(q_0)[None], curve.p[None], curve.n[None], model, W_q, **kw)
    if fail[0] >= 0:
        raise PathFollowError(int(fail[0]), reasons[0])
    return JointPath(out[0])


# ---------------------------------------------------------------------------
# traversal speed


def accel_lookup(q2, q3, table: kin.AccelTable):
    """Bilinear lookup of joint 1-3 acceleration limits; returns ``(limits, clamped)``."""
    return table.lookup(q2, q3)


def traversal_speed_batch(Qpath, P, model: kin.RobotModel, v_d=1000.0):
    """Per-point path-speed limits for ``(B, K, 6)`` joint paths over ``(B, K, 3)`` points."""
    Qpath = np.asarray(Qpath, dtype=float)
    P = np.asarray(P, dtype=float)
    B, K = Qpath.shape[:2]
    if K < 2:
        return np.full((B, K), np.inf), np.zeros((B, K))
    ds = np.linalg.norm(np.diff(P, axis=1), axis=2)  # (B, K-1)
    ds = _fill_zero_steps(ds)
    dt = ds / v_d
    qd = np.diff(Qpath, axis=1) / dt[:, :, None]  # realized joint velocity at v_d
    with np.errstate(divide="ignore", invalid="ignore"):
        r_vel = np.min(np.where(np.abs(qd) > 0, model.dq_max / np.abs(qd), np.inf), axis=2)
        acc = model.accel_limits(Qpath[:, 1:].reshape(-1, 6)).reshape(B, K - 1, 6)
        dqd = np.abs(np.diff(qd, axis=1))  # (B, K-2, 6)
        r_acc = np.min(np.where(dqd > 0, np.sqrt(dt[:, 1:, None] * acc[:, 1:] / dqd), np.inf), axis=2)
    ratio = r_vel.copy()
    ratio[:, 1:] = np.minimum(ratio[:, 1:], r_acc)
    v = np.empty((B, K))
    v[:, 1:] = v_d * ratio
    v[:, 0] = v[:, 1]
    dt_full = np.concatenate([dt[:, :1], dt], axis=1)
    return v, dt_full


def _fill_zero_steps(ds):
    ds = ds.copy()
    for b in range(ds.shape[0]):
        zero = np.flatnonzero(ds[b] <= 0)
        if zero.size:
            logger.warning("traversal_speed: %d zero-length steps; reusing previous step", zero.size)
        for i in zero:
            prev = ds[b, :i][ds[b, :i] > 0]
            ds[b, i] = prev[-1] if prev.size else 1.0
    return ds


def traversal_speed(path: JointPath, curve: Curve, model: kin.RobotModel, v_d=1000.0) -> SpeedProfile:
    """Highest path speed at every point before any joint saturates.

    At each point the realized joint velocity is capped by the velocity limit
    and by what the acceleration limit allows starting from the previous
    point's velocity; both caps are evaluated at the speed they permit, so the
    result does not depend on ``v_d``.
    """
    v, dt = traversal_speed_batch(path.q[None], curve.p[None], model, v_d)
    return SpeedProfile(v[0], dt[0])


# ---------------------------------------------------------------------------
# initial configuration helpers


def tool_frames(curve: Curve):
    """Tool frames with z along the normal and x along the projected tangent."""
    z = curve.n
    t = curve.tangents()
    x = t - np.sum(t * z, axis=1, keepdims=True) * z
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=2)


def start_branches(curve: Curve, model: kin.RobotModel):
    """The eight IK branches at the first point (tangent-aligned roll); NaN rows if missing."""
    R = tool_frames(curve.slice(0, min(1, len(curve) - 1)))[0]
    br = kin.inv_branches(curve.p[:1], R[None], model)[0]
    out = np.full((kin.N_BRANCHES, 6), np.nan)
    for i, q in enumerate(br):
        if np.isnan(q).any():
            continue
        q = kin.canonical_in_limits(q, model)
        if model.within_limits(q, 1e-12):
            out[i] = q
    return out


def _follow_track(Qpath, start, tracked, model):
    """Branch-continuous IK sequence through precomputed branch sets."""
    q = start
    out = [q]
    for k in range(1, len(tracked)):
        cands = tracked[k]
        valid = ~np.isnan(cands).any(axis=1)
        if not valid.any():
            return None, k
        c = np.array([kin.nearest_representation(x, q, model) for x in cands[valid]])
        inlim = model.within_limits(c, 1e-12)
        if not inlim.any():
            return None, k
        c = c[inlim]
        d = np.max(np.abs(c - q), axis=1)
        q = c[np.argmin(d)]
        out.append(q)
    return np.array(out), -1


def baseline_orientation(curve: Curve):
    """Rotation putting the mean surface normal on +z and the chord on +y.

    This is the usual way a part is presented to the robot: surface facing
    up, path running across the front of the robot.
    """
    n = curve.n.mean(axis=0)
    n /= np.linalg.norm(n)
    t = curve.p[-1] - curve.p[0]
    t = t - (t @ n) * n
    if np.linalg.norm(t) < 1e-9:
        t = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    t /= np.linalg.norm(t)
    A = np.stack([np.cross(t, n), t, n], axis=1)
    return kin.rotation_to_beta(A.T)


def baseline_resolve(curve: Curve, model: kin.RobotModel, p_curve=None, beta_curve=None, step_cap=0.2):
    """Industry-practice placement: curve centred mid-workspace, tool x along the curve.

    The default orientation comes from :func:`baseline_orientation`.

    Returns ``(pose, path, branch)`` where the branch at the first point is the
    in-limit IK solution with the largest manipulability.
    """
    pose = CurvePose(
        np.array(BASELINE_P_CURVE if p_curve is None else p_curve, dtype=float),
        np.array(baseline_orientation(curve) if beta_curve is None else beta_curve, dtype=float),
    )
    c = transform_curve(curve, pose)
    R = tool_frames(c)
    tracked = kin.inv_branches(c.p, R, model)
    first = start_branches(c, model)
    valid = np.flatnonzero(~np.isnan(first).any(axis=1))
    if valid.size == 0:
        raise PathFollowError(0, "no in-limit IK branch at the first point")
    mu = kin.manipulability(first[valid], model)
    if np.ndim(mu) == 0:
        mu = np.array([mu])
    order = valid[np.argsort(-mu, kind="stable")]
    branch = int(order[0])
    q, bad = _follow_track(None, first[branch], tracked, model)
    if q is None:
        raise PathFollowError(bad, "point unreachable along the baseline branch")
    jumps = np.max(np.abs(np.diff(q, axis=0)), axis=1)
    if np.any(jumps > step_cap):
        k = int(np.argmax(jumps > step_cap)) + 1
        raise PathFollowError(k, "branch discontinuity")
    logger.info("baseline branch %d (manipulability %.4g)", branch, float(mu.max()))
    return pose, JointPath(q), branch


# ---------------------------------------------------------------------------
# differential evolution over placement and branch


@dataclass
class DEConfig:
    population: int = 20
    generations: int = 50
    F: float = 0.8
    CR: float = 0.9
    seed: int = 0
    p_lo: tuple = (1300.0, -600.0, 0.0)
    p_hi: tuple = (2400.0, 600.0, 1200.0)
    beta_lim: float = np.pi
    W_q: float = DEFAULT_W_Q

    def bounds(self):
        lo = np.array([*self.p_lo, -self.beta_lim, -self.beta_lim, -self.beta_lim, 0.0])
        hi = np.array([*self.p_hi, self.beta_lim, self.beta_lim, self.beta_lim, kin.N_BRANCHES - 1e-9])
        return lo, hi


@dataclass
class DEResult:
    pose: CurvePose
    q0: np.ndarray
    branch: int
    objective: float
    path: JointPath
    history: list = field(default_factory=list)  # (gen, best, mean, worst)
    failures: dict = field(default_factory=dict)
    initial_objectives: np.ndarray = None


def decode(x):
    return CurvePose(np.array(x[:3], dtype=float), np.array(x[3:6], dtype=float)), int(np.floor(x[6]))


def evaluate_candidates(X, curve: Curve, model: kin.RobotModel, W_q=DEFAULT_W_Q):
    """Objective ``min_k v_k`` for each row of ``X``; -inf when infeasible.

    Returns ``(objectives, paths, reasons)``.
    """
    X = np.atleast_2d(X)
    B = len(X)
    obj = np.full(B, -np.inf)
    reasons = ["" for _ in range(B)]
    paths = [None] * B
    Ps, Ns, Q0s, idx = [], [], [], []
    for i, x in enumerate(X):
        pose, branch = decode(x)
        c = transform_curve(curve, pose)
        q0 = start_branches(c, model)[min(max(branch, 0), kin.N_BRANCHES - 1)]
        if np.isnan(q0).any():
            reasons[i] = "ik_branch"
            continue
        Ps.append(c.p)
        Ns.append(c.n)
        Q0s.append(q0)
        idx.append(i)
    if idx:
        Qp, fail, _ = follow_curve_batch(np.array(Q0s), np.array(Ps), np.array(Ns), model, W_q)
        okb = fail < 0
        if okb.any():
            v, _ = traversal_speed_batch(Qp[okb], np.array(Ps)[okb], model)
            vmin = v.min(axis=1)
        j = 0
        for b, i in enumerate(idx):
            if okb[b]:
                obj[i] = vmin[j]
                paths[i] = JointPath(Qp[b])
                j += 1
            else:
                reasons[i] = "follow_curve"
    return obj, paths, reasons


def _evaluate_parallel(X, curve, model, W_q, pool, jobs):
    if pool is None:
        return evaluate_candidates(X, curve, model, W_q)
    chunks = [c for c in np.array_split(X, jobs) if len(c)]
    parts = list(pool.map(evaluate_candidates, chunks, [curve] * len(chunks), [model] * len(chunks),
                          [W_q] * len(chunks)))
    obj = np.concatenate([p[0] for p in parts])
    paths = [q for p in parts for q in p[1]]
    reasons = [r for p in parts for r in p[2]]
    return obj, paths, reasons


def de_optimize(curve: Curve, model: kin.RobotModel, config: DEConfig = None, seeds=None, log=None,
                jobs=1) -> DEResult:
    """rand/1/bin differential evolution maximising the slowest traversal speed.

    ``seeds`` are optional gene vectors placed into the initial population
    (e.g. the baseline placement).  Fitness of a generation is evaluated as
    one batch, split over ``jobs`` worker processes when ``jobs > 1``; the
    result does not depend on ``jobs``.
    """
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return _de(curve, model, config, seeds, log, pool, jobs)
    return _de(curve, model, config, seeds, log, None, 1)


def _de(curve, model, config, seeds, log, pool, jobs):
    cfg = config or DEConfig()
    lo, hi = cfg.bounds()
    rng = np.random.default_rng(cfg.seed)
    NP = cfg.population
    pop = lo + rng.random((NP, len(lo))) * (hi - lo)
    if seeds is not None:
        seeds = np.atleast_2d(seeds)
        pop[: len(seeds)] = np.clip(seeds, lo, hi)
    fit, paths, reasons = _evaluate_parallel(pop, curve, model, cfg.W_q, pool, jobs)
    hist = Counter(r for r in reasons if r)
    initial = fit.copy()
    history = [_gen_stats(0, fit)]
    if log:
        log(history[-1])
    for gen in range(1, cfg.generations + 1):
        trials = np.empty_like(pop)
        for i in range(NP):
            choices = [j for j in range(NP) if j != i]
            a, b, c = rng.choice(choices, 3, replace=False)
            mutant = pop[a] + cfg.F * (pop[b] - pop[c])
            mutant = np.where(mutant < lo, lo + rng.random(len(lo)) * (pop[i] - lo), mutant)
            mutant = np.where(mutant > hi, hi - rng.random(len(lo)) * (hi - pop[i]), mutant)
            cross = rng.random(len(lo)) < cfg.CR
            cross[rng.integers(len(lo))] = True
            trials[i] = np.where(cross, mutant, pop[i])
        tfit, tpaths, treasons = _evaluate_parallel(trials, curve, model, cfg.W_q, pool, jobs)
        hist.update(r for r in treasons if r)
        better = tfit >= fit
        better &= np.isfinite(tfit) | ~np.isfinite(fit)
        pop[better] = trials[better]
        fit[better] = tfit[better]
        for i in np.flatnonzero(better):
            paths[i] = tpaths[i]
        history.append(_gen_stats(gen, fit))
        if log:
            log(history[-1])
    if not np.isfinite(fit).any():
        raise InfeasibleSearch(hist)
    best = int(np.argmax(fit))
    pose, branch = decode(pop[best])
    return DEResult(pose, paths[best].q[0].copy(), branch, float(fit[best]), paths[best], history, dict(hist), initial)


def _gen_stats(gen, fit):
    finite = fit[np.isfinite(fit)]
    if finite.size == 0:
        return (gen, -np.inf, -np.inf, -np.inf)
    return (gen, float(fit.max()), float(finite.mean()), float(fit.min()))


def resolve_objective(curve: Curve, model: kin.RobotModel, pose: CurvePose, path: JointPath) -> float:
    c = transform_curve(curve, pose)
    return traversal_speed(path, c, model).min_speed


# ---------------------------------------------------------------------------
# acceleration table identification


def estimate_accel_table(model: kin.RobotModel, execute_fn=None, q2_grid=None, q3_grid=None, step=0.3,
                         n_grid=10, exec_config=None) -> kin.AccelTable:
    """Identify joint 1-3 acceleration limits on a (q2, q3) grid.

    At every node each of joints 1-3 is commanded through a full-speed joint
    move of ``step`` rad from the node; the peak second difference of that
    joint over the first half of the move (the acceleration phase, still
    close to the node) is recorded.  ``execute_fn(program, model, cfg)``
    defaults to the bundled executor without lead moves.
    """
    from . import executor as ex
    from .program import MOVEJ, MotionProgram, Primitive

    if execute_fn is None:
        def execute_fn(prog, mdl, c):
            return ex.execute(prog, mdl, c, extend=False)
    cfg = exec_config or ex.ExecutorConfig()
    margin = 0.05
    if q2_grid is None:
        q2_grid = np.linspace(model.q_min[1] + margin, model.q_max[1] - margin, n_grid)
    if q3_grid is None:
        q3_grid = np.linspace(model.q_min[2] + margin, model.q_max[2] - margin, n_grid)
    q2_grid = np.asarray(q2_grid, dtype=float)
    q3_grid = np.asarray(q3_grid, dtype=float)
    values = np.zeros((len(q2_grid), len(q3_grid), 3))
    for i, a in enumerate(q2_grid):
        for j, b in enumerate(q3_grid):
            node = np.array([0.0, a, b, 0.0, 0.5, 0.0])
            for jt in range(3):
                target = node.copy()
                d = step if node[jt] + step <= model.q_max[jt] else -step
                target[jt] += d
                prog = MotionProgram(node, [Primitive(MOVEJ, target, 1.0, 0.0)], sample_rate=cfg.sample_rate or 250.0)
                tr = execute_fn(prog, model, cfg)
                qj = tr.q[:, jt]
                acc = np.abs(np.diff(qj, 2)) / tr.dt**2
                near = np.abs(qj[1:-1] - node[jt]) < 0.5 * abs(d)
                values[i, j, jt] = acc[near].max()
    return kin.AccelTable(q2_grid, q3_grid, values)
