"""Tracking errors, speed statistics and the accuracy/uniformity specification."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kinematics as kin
from .curves import Curve, resample
from .executor import ExecutionTrace

logger = logging.getLogger(__name__)

P_ERR_MAX = 0.5  # mm
N_ERR_MAX = 3.0  # deg
SPEED_STD_MAX = 5.0  # percent of mean
REPORT_HEADER = ["max_p_err_mm", "max_n_err_deg", "mean_v_mms", "std_v_mms"]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class SpecThresholds:
    p_err: float = P_ERR_MAX
    n_err_deg: float = N_ERR_MAX
    std_pct: float = SPEED_STD_MAX


@dataclass
class TrackingReport:
    max_p_err: float  # mm
    max_n_err: float  # deg
    mean_v: float  # mm/s
    std_v: float  # mm/s
    passed: dict = field(default_factory=dict)

    @property
    def std_v_pct(self) -> float:
        return 100.0 * self.std_v / self.mean_v if self.mean_v > 0 else float("inf")

    @property
    def ok(self) -> bool:
        return bool(self.passed) and all(self.passed.values())

    def csv_row(self) -> str:
        return ",".join(repr(float(x)) for x in (self.max_p_err, self.max_n_err, self.mean_v, self.std_v))

    def summary(self) -> str:
        flags = " ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in self.passed.items())
        return (f"max_p_err={self.max_p_err:.4f} mm  max_n_err={self.max_n_err:.4f} deg  "
                f"mean_v={self.mean_v:.2f} mm/s  std_v={self.std_v:.2f} mm/s ({self.std_v_pct:.2f}%)  {flags}")


# ---------------------------------------------------------------------------
# nearest points


def nearest_points(X, Y, window=50, tree=None):
    """Exact nearest row of ``Y`` for every row of ``X``.

    Consecutive queries search a window of ``2*window+1`` points around the
    previous match (shifted by the previous advance); a full search replaces
    the window result when the minimum sits on the window edge or when a
    k-d tree finds a strictly closer point.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    tree = tree if tree is not None else cKDTree(Y)
    nY = len(Y)
    idx = np.empty(len(X), dtype=int)
    dist = np.empty(len(X))
    prev, adv = None, 0
    for i, x in enumerate(X):
        if prev is None:
            d, j = tree.query(x)
        else:
            c = min(max(prev + adv, 0), nY - 1)
            lo, hi = max(0, c - window), min(nY, c + window + 1)
            dd = np.linalg.norm(Y[lo:hi] - x, axis=1)
            j = lo + int(np.argmin(dd))
            d = dd[j - lo]
            if (j == lo and lo > 0) or (j == hi - 1 and hi < nY):
                d, j = tree.query(x)
            elif d > 0:
                d2, j2 = tree.query(x, distance_upper_bound=d)
                if d2 < d:
                    d, j = d2, j2
        j = int(j)
        if prev is not None:
            adv = j - prev
        prev = j
        idx[i] = j
        dist[i] = d
    return idx, dist


def brute_force_nearest(X, Y):
    d = np.linalg.norm(np.asarray(X)[:, None, :] - np.asarray(Y)[None, :, :], axis=2)
    j = d.argmin(axis=1)
    return j, d[np.arange(len(X)), j]


class ErrorEvaluator:
    """Reusable tracking-error evaluation against a (possibly densified) curve."""

    def __init__(self, curve: Curve, model: kin.RobotModel, spacing=None, window=50):
        self.curve = resample(curve, spacing) if spacing else curve
        self.model = model
        self.window = window
        self._ptree = cKDTree(self.curve.p)
        self._ntree = cKDTree(self.curve.n)

    def errors(self, Q):
        """Per-sample ``(p_err mm, n_err rad, nearest curve index)``."""
        P, R = kin.fwd_batch(np.atleast_2d(Q), self.model)
        idx, p_err = nearest_points(P, self.curve.p, self.window, self._ptree)
        ez = R[:, :, 2]
        dn, _ = self._ntree.query(ez)
        # chord length on the unit sphere -> angle
        n_err = 2.0 * np.arcsin(np.clip(dn / 2.0, 0.0, 1.0))
        return p_err, n_err, idx


def tracking_errors(trace: ExecutionTrace, curve: Curve, model: kin.RobotModel, spacing=None, window=50):
    """Per-sample position error (mm) and normal error (rad).

    ``p_err_i = min_k |p(q_i) - p*_k|`` and ``n_err_i = min_k angle(e_z(q_i), n*_k)``
    over the curve points (densified to ``spacing`` mm when given).
    """
    if len(trace.q) == 0:
        raise MetricsError("empty trace")
    p_err, n_err, _ = ErrorEvaluator(curve, model, spacing, window).errors(trace.q)
    return p_err, n_err


# ---------------------------------------------------------------------------
# speed


def tcp_positions(trace: ExecutionTrace, model: kin.RobotModel):
    return kin.fwd_batch(trace.q, model)[0]


def speed_profile(trace: ExecutionTrace, model: kin.RobotModel):
    """Central-difference TCP speed on the interior samples; returns ``(v, mean, std)``.

    The interior is the stretch between the first and last true waypoint
    (whole trace when unknown), without the first and last sample.
    """
    if len(trace.t) < 3:
        raise MetricsError("insufficient samples")
    P = tcp_positions(trace, model)
    dt = np.diff(trace.t)
    v = np.full(len(P), np.nan)
    v[1:-1] = np.linalg.norm(P[2:] - P[:-2], axis=1) / (dt[1:] + dt[:-1])
    sl = trace.interior_slice()
    i0 = max(sl.start, 1)
    i1 = min(sl.stop, len(P) - 1)
    vin = v[i0:i1]
    if vin.size == 0:
        raise MetricsError("insufficient samples")
    return v, float(vin.mean()), float(vin.std())


def check_spec(report: TrackingReport, thresholds: SpecThresholds = SpecThresholds()) -> TrackingReport:
    """Fill ``report.passed``; thresholds are strict upper bounds."""
    report.passed = {
        "p_err": report.max_p_err < thresholds.p_err,
        "n_err": report.max_n_err < thresholds.n_err_deg,
        "speed_std": report.std_v_pct < thresholds.std_pct,
    }
    return report


def make_report(trace: ExecutionTrace, curve: Curve, model: kin.RobotModel, spacing=None,
                thresholds: SpecThresholds = SpecThresholds(), evaluator: ErrorEvaluator = None) -> TrackingReport:
    """Tracking report over the interior of ``trace``."""
    ev = evaluator or ErrorEvaluator(curve, model, spacing)
    sl = trace.interior_slice()
    p_err, n_err, _ = ev.errors(trace.q[sl])
    _, mean_v, std_v = speed_profile(trace, model)
    rep = TrackingReport(float(p_err.max()), float(np.degrees(n_err.max())), mean_v, std_v)
    return check_spec(rep, thresholds)


# ---------------------------------------------------------------------------
# speed search and averaging


@dataclass
class BisectResult:
    speed: float
    report: TrackingReport
    feasible: bool
    history: list  # (speed, passed, report)
    trace: ExecutionTrace = None
    program: object = None


def bisect_speed(run, v_lo, v_hi, resolution=1.0, thresholds: SpecThresholds = SpecThresholds(),
                 probes=0) -> BisectResult:
    """Largest commanded speed in ``[v_lo, v_hi]`` whose run passes the spec.

    ``run(speed)`` executes the program at ``speed`` and returns
    ``(report, trace, program)``.  Pass/fail is assumed monotone in speed.
    Bisection samples alone can never contradict that, so ``probes`` extra
    speeds spread below the result are run as a check and any failure among
    them is logged.
    """
    history = []

    def attempt(v):
        rep, tr, prog = run(v)
        check_spec(rep, thresholds)
        history.append((v, rep.ok, rep))
        logger.info("bisect_speed: v=%.1f %s", v, rep.summary())
        return rep, tr, prog

    rep_hi, tr_hi, prog_hi = attempt(v_hi)
    if rep_hi.ok:
        return BisectResult(v_hi, rep_hi, True, history, tr_hi, prog_hi)
    rep_lo, tr_lo, prog_lo = attempt(v_lo)
    if not rep_lo.ok:
        return BisectResult(v_lo, rep_lo, False, history, tr_lo, prog_lo)
    good = (v_lo, rep_lo, tr_lo, prog_lo)
    lo, hi = v_lo, v_hi
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        rep, tr, prog = attempt(mid)
        if rep.ok:
            lo, good = mid, (mid, rep, tr, prog)
        else:
            hi = mid
    for v in np.linspace(v_lo, lo, probes + 2)[1:-1]:
        attempt(float(v))
    passed = sorted((v, ok) for v, ok, _ in history)
    for (v1, ok1), (v2, ok2) in zip(passed[:-1], passed[1:]):
        if ok2 and not ok1:
            logger.warning("bisect_speed: non-monotone pass/fail (%.1f fails, %.1f passes)", v1, v2)
    v, rep, tr, prog = good
    return BisectResult(v, rep, True, history, tr, prog)


def average_traces(traces) -> ExecutionTrace:
    """Average joint traces of repeated runs on a common normalised-time grid."""
    traces = list(traces)
    if len(traces) < 2:
        raise MetricsError("need >= 2 traces")
    dur = np.array([tr.t[-1] - tr.t[0] for tr in traces])
    if dur.max() > 1.05 * dur.min():
        raise MetricsError("traces differ in duration by more than 5%; not the same program")
    ref = traces[0]
    T = float(dur.mean())
    dt = ref.dt
    n = int(np.floor(T / dt + 1e-9)) + 1
    t = np.arange(n) * dt
    u = t / T
    Q = np.zeros((n, 6))
    for tr in traces:
        ut = (tr.t - tr.t[0]) / (tr.t[-1] - tr.t[0])
        Q += np.stack([np.interp(u, ut, tr.q[:, j]) for j in range(6)], axis=1)
    Q /= len(traces)
    interior = None
    if ref.interior is not None:
        scale = (n - 1) / max(len(ref.t) - 1, 1)
        interior = (int(np.ceil(ref.interior[0] * scale)), int(np.floor(ref.interior[1] * scale)))
    return ExecutionTrace(t, Q, interior=interior, meta={"averaged": len(traces)})
