"""Acceptance suite: one test (or group) per criterion, summarised at the end of the run.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints one
pass/fail line per criterion together with the logged numbers.
"""
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from curvetrack import adjust as adj
from curvetrack import cli
from curvetrack import executor as ex
from curvetrack import fitting as ft
from curvetrack import kinematics as kin
from curvetrack import metrics as met
from curvetrack import qp
from curvetrack import redundancy as rd
from curvetrack.curves import CurvePoint, transform_curve
from curvetrack.kinematics import Pose
from curvetrack.program import MOVEC, MOVEL
from conftest import line_curve, random_q
from test_metrics import report
from test_redundancy import qp_instances, skew

C1 = pytest.mark.criterion(1, "kinematics oracle suite")
C2 = pytest.mark.criterion(2, "QP optimality")
C3 = pytest.mark.criterion(3, "path-following tolerance")
C4 = pytest.mark.criterion(4, "greedy-fit dominance")
C5 = pytest.mark.criterion(5, "executor soundness")
C6 = pytest.mark.criterion(6, "adjustment convergence")
C7 = pytest.mark.criterion(7, "end-to-end speedup")
C8 = pytest.mark.criterion(8, "DE dominance")
C9 = pytest.mark.criterion(9, "metrics exactness")


@pytest.fixture(scope="module")
def placed(model, curve1, curve2):
    """Both analogue curves at their baseline placement, with the joint paths."""
    out = {}
    for name, c in (("curve1", curve1), ("curve2", curve2)):
        pose, path, branch = rd.baseline_resolve(c, model)
        out[name] = (c, transform_curve(c, pose), pose, path, branch)
    return out


# ---------------------------------------------------------------------------
# 1. kinematics


def fd_jacobian(q, model, h=1e-6):
    """Central differences; angular rows from the relative rotation, linear rows from the TCP."""
    J = np.zeros((6, 6))
    for i in range(6):
        dq = np.zeros(6)
        dq[i] = h
        (pp, pm), (Rp, Rm) = kin.fwd_batch(np.array([q + dq, q - dq]), model)
        J[:3, i] = Rotation.from_matrix(Rp @ Rm.T).as_rotvec() / (2 * h)
        J[3:, i] = (pp - pm) / (2 * h)
    return J


@C1
def test_kinematics_oracles(model, record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    Q = random_q(model, rng, 1000, margin=1e-3)
    rel = np.array([np.linalg.norm(kin.jacobian(q, model) - fd_jacobian(q, model))
                    / np.linalg.norm(kin.jacobian(q, model)) for q in Q])
    P, R = kin.fwd_batch(Q, model)
    worst = 0.0
    checked = 0
    for q, p, Rq in zip(Q, P, R):
        J = kin.jacobian(q, model)
        if np.linalg.svd(J, compute_uv=False)[-1] < 1e-3:
            continue  # singular: branch identity is not defined
        sols = kin.inv(Pose.from_matrix(p, Rq), model)
        err = min(np.abs(kin.angle_diff(s, q)).max() for s in sols)
        worst = max(worst, err)
        checked += 1
    # every branch is exercised: the closed-form branch that reproduces each q
    raw = kin.inv_branches(P, R, model, q4_ref=Q[:, 3])
    hit = np.abs(kin.angle_diff(raw, Q[:, None, :])).max(axis=2) < 1e-6
    covered = np.unique(np.argmax(hit, axis=1)[hit.any(axis=1)])
    runtime = time.perf_counter() - t0
    record_property("branches_hit", len(covered))
    record_property("jac_rel_max", f"{rel.max():.1e}")
    record_property("roundtrip_max_rad", f"{worst:.1e}")
    record_property("nonsingular", checked)
    record_property("runtime_s", f"{runtime:.1f}")
    assert rel.max() < 1e-5
    assert checked > 900 and worst < 1e-9
    assert len(covered) == kin.N_BRANCHES
    assert runtime < 10.0


# ---------------------------------------------------------------------------
# 2. QP


@C2
def test_qp_kkt_and_normal_equations(model, record_property):
    worst = 0.0
    active = 0
    for q, tgt in qp_instances(model, 500, seed=11):
        dq, (H, g, lo, hi) = rd.qp_step(q, tgt, model, return_problem=True)
        worst = max(worst, qp.kkt_residual(H, g, lo, hi, dq))
        active += bool(np.any((dq <= lo) | (dq >= hi)))
    record_property("kkt_max", f"{worst:.1e}")
    record_property("with_active_bounds", active)
    assert worst < 1e-8 and active > 100

    rng = np.random.default_rng(12)
    dev = 0.0
    interior = 0
    for q in random_q(model, rng, 200, margin=0.5):
        p, R = kin.fwd_batch(q[None], model)
        e = R[0, :, 2]
        n = e + rng.normal(size=3) * 0.01
        n /= np.linalg.norm(n)
        tgt = CurvePoint(p[0] + rng.normal(size=3) * 0.5, n)
        dq = rd.qp_step(q, tgt, model)
        J = kin.jacobian(q, model)
        Jr = np.vstack([-skew(e) @ J[:3], J[3:]])
        nu = np.concatenate([n - e, tgt.p_star - p[0]])
        ref = np.linalg.solve(Jr.T @ Jr + rd.DEFAULT_W_Q * np.eye(6), Jr.T @ nu)
        if np.all(q + ref > model.q_min) and np.all(q + ref < model.q_max):
            dev = max(dev, np.abs(dq - ref).max())
            interior += 1
    record_property("interior_dev_max", f"{dev:.1e}")
    assert interior > 150 and dev < 1e-10


# ---------------------------------------------------------------------------
# 3. path following


@C3
@pytest.mark.parametrize("which", ["curve1", "curve2"])
def test_follow_curve_tolerance(model, placed, which, record_property):
    _, c, _, path, _ = placed[which]
    assert len(c) == 1000
    t0 = time.perf_counter()
    out = rd.follow_curve(path.q[0], c, model)
    runtime = time.perf_counter() - t0
    P, R = kin.fwd_batch(out.q, model)
    p_res = np.linalg.norm(P - c.p, axis=1).max()
    n_res = np.arccos(np.clip(np.sum(R[:, :, 2] * c.n, axis=1), -1.0, 1.0)).max()
    record_property(f"{which}_p_res_mm", f"{p_res:.1e}")
    record_property(f"{which}_n_res_rad", f"{n_res:.1e}")
    record_property(f"{which}_runtime_s", f"{runtime:.2f}")
    assert p_res < 0.01 and n_res < 1e-4
    assert runtime < 30.0


# ---------------------------------------------------------------------------
# 4. greedy fit


@C4
def test_greedy_beats_uniform(model, placed, record_property):
    _, c, _, path, _ = placed["curve1"]
    segs = ft.greedy_fit(c, path, 0.3, model, kinds=(MOVEL, MOVEC))
    r_greedy = ft.max_residual(segs)
    n_uniform, r_uniform = ft.uniform_count_for(c, r_greedy)
    record_property("greedy_segments", len(segs))
    record_property("greedy_residual_mm", f"{r_greedy:.3f}")
    record_property("uniform_segments", n_uniform)
    record_property("uniform_residual_mm", f"{r_uniform:.3f}")
    record_property("published_reference", "17 vs 30 segments at 1.47 mm (different curve)")
    assert r_greedy <= 0.3
    assert len(segs) < n_uniform


# ---------------------------------------------------------------------------
# 5. executor


def _endpoints(prog, model):
    """Start point of each primitive of the extended program (lead-in first)."""
    P0 = kin.fwd_batch(prog.start[None], model)[0][0]
    ends = [p.target.p for p in prog.all_primitives()]
    return [P0] + ends[:-1]


def geometry_distance(P, prim, pa):
    """Distance of ``P`` to the commanded line segment or arc of ``prim`` starting at ``pa``."""
    pb = prim.target.p
    if prim.kind == MOVEL:
        return ft.point_segment_distance(P, pa, pb)
    # circle through three points: centre from the perpendicular bisector equations
    pv = prim.via.p
    nrm = np.cross(pv - pa, pb - pa)
    nrm /= np.linalg.norm(nrm)
    A = np.array([pv - pa, pb - pa, nrm])
    b = np.array([(pv @ pv - pa @ pa) / 2, (pb @ pb - pa @ pa) / 2, nrm @ pa])
    centre = np.linalg.solve(A, b)
    r = np.linalg.norm(pa - centre)
    d = P - centre
    h = d @ nrm
    rho = np.linalg.norm(d - h[:, None] * nrm, axis=1)
    return np.hypot(rho - r, h)


def shipped_programs(model, placed):
    """Baseline (equally spaced MoveL) and greedy (MoveL/MoveC) programs for both analogues."""
    out = []
    for which in ("curve1", "curve2"):
        _, c, _, path, _ = placed[which]
        n, _ = ft.uniform_count_for(c, 0.3)
        uniform = ft.uniform_movel(c, n, path, model)
        greedy = ft.greedy_fit(c, path, 0.3, model, kinds=(MOVEL, MOVEC))
        for kind, segs in (("uniform", uniform), ("greedy", greedy)):
            for speed, zone in ((300.0, 10.0), (1000.0, 5.0)):
                out.append((f"{which}-{kind}-{speed:.0f}", ft.to_program(segs, path, model, speed=speed, zone=zone)))
    return out


@pytest.fixture(scope="module")
def programs(model, placed):
    return shipped_programs(model, placed)


@C5
def test_executor_soundness(model, programs, record_property):
    cfg = ex.ExecutorConfig()
    v_ratio = a_ratio = geo = 0.0
    for name, prog in programs:
        runs = [ex.execute(prog, model, cfg) for _ in range(3)]
        tr = runs[0]
        for other in runs[1:]:
            assert np.array_equal(other.q, tr.q) and np.array_equal(other.t, tr.t), name
        dq = np.diff(tr.q, axis=0) / tr.dt
        ddq = np.diff(tr.q, 2, axis=0) / tr.dt**2
        lim = ex.joint_accel_limits(tr.q[1:-1], model, cfg)
        v_ratio = max(v_ratio, (np.abs(dq) / model.dq_max).max())
        a_ratio = max(a_ratio, (np.abs(ddq) / lim).max())

        ext = ex.extend_program(prog, model, cfg)
        starts = _endpoints(ext, model)
        prims = ext.all_primitives()
        P = kin.fwd_batch(tr.q, model)[0]
        off = ~tr.blend
        for k in np.unique(tr.segment[off]):
            sel = off & (tr.segment == k)
            geo = max(geo, geometry_distance(P[sel], prims[k + 1], starts[k + 1]).max())
    record_property("programs", len(programs))
    record_property("max_v_ratio", f"{v_ratio:.4f}")
    record_property("max_a_ratio", f"{a_ratio:.4f}")
    record_property("off_blend_geometry_mm", f"{geo:.1e}")
    assert v_ratio <= 1.01
    assert a_ratio <= 1.05
    assert geo < 1e-6


# ---------------------------------------------------------------------------
# 6. adjustment


@C6
def test_single_peak_descent(model, record_property):
    line = line_curve()
    pose, path, _ = rd.baseline_resolve(line, model)
    c = transform_curve(line, pose)
    prog = ft.to_program(ft.uniform_movel(c, 8, path, model), path, model, speed=200.0, zone=0.0)
    t = prog.primitives[3].target
    side = np.cross(c.tangents()[0], c.n[0])
    prog.primitives[3].target = Pose.from_matrix(t.p + 2.0 * side, t.R)
    ev = met.ErrorEvaluator(c, model, spacing=0.02)
    st = adj.multipeak_descent(prog, c, model, adj.AdjustConfig(max_iters=10), evaluator=ev)
    record_property("initial_mm", f"{st.initial_p_err:.3f}")
    record_property("best_mm", f"{st.best_p_err:.3f}")
    record_property("iterations", st.iteration)
    assert st.iteration <= 10
    assert st.best_p_err <= 0.5 * st.initial_p_err


# ---------------------------------------------------------------------------
# 7. full pipeline (also feeds the best-iterate part of 6)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    cfg = cli.PipelineConfig(out_dir=str(tmp_path_factory.mktemp("pipeline"))).validate()
    t0 = time.perf_counter()
    summary = cli.run_pipeline(cfg, jobs=1)
    return summary, time.perf_counter() - t0


@C6
def test_best_iterate_on_pipeline_runs(pipeline, record_property):
    summary, _ = pipeline
    _, opt = summary["_stages"]
    runs = opt.extra["adjust_runs"]
    assert runs
    for v, st in runs.items():
        executed = [r[1] for r in st.log]
        assert st.best_p_err == min(executed), v
        assert st.best_p_err <= st.initial_p_err, v
    record_property("pipeline_adjust_runs", len(runs))


@C7
def test_end_to_end_speedup(pipeline, record_property):
    summary, runtime = pipeline
    base, opt = summary["_stages"]
    ratio = opt.report.mean_v / base.search.speed
    record_property("baseline_speed_mms", f"{base.search.speed:.1f}")
    record_property("optimized_mean_v_mms", f"{opt.report.mean_v:.1f}")
    record_property("ratio", f"{ratio:.2f}")
    record_property("stretch_2x", "met" if ratio >= 2.0 else "not met")
    record_property("max_p_err_mm", f"{opt.report.max_p_err:.3f}")
    record_property("max_n_err_deg", f"{opt.report.max_n_err:.3f}")
    record_property("std_v_pct", f"{opt.report.std_v_pct:.2f}")
    record_property("runtime_s", f"{runtime:.0f}")
    assert opt.report.max_p_err < 0.5
    assert opt.report.max_n_err < 3.0
    assert opt.report.std_v_pct < 5.0
    assert ratio >= 1.5
    assert runtime < 15 * 60


# ---------------------------------------------------------------------------
# 8. DE dominance


@C8
@pytest.mark.parametrize("seed", [1, 2, 3])
@pytest.mark.parametrize("which", ["curve1", "curve2"])
def test_de_dominates_baseline(model, placed, which, seed, record_property):
    c0, c, pose, path, branch = placed[which]
    base = rd.traversal_speed(path, c, model).min_speed
    res = rd.de_optimize(c0, model, rd.DEConfig(seed=seed))
    record_property(f"{which}_seed{seed}", f"{res.objective:.0f}/{base:.0f}")
    assert res.objective >= base


# ---------------------------------------------------------------------------
# 9. metrics


@C9
def test_windowed_search_exact(record_property):
    rng = np.random.default_rng(9)
    pairs = 10_000
    mismatched = 0
    for _ in range(pairs):
        n = int(rng.integers(20, 200))
        # random smooth space curve: a cumulative sum of slowly turning steps
        steps = np.cumsum(rng.normal(0, 0.3, (n, 3)), axis=0)
        steps /= np.linalg.norm(steps, axis=1, keepdims=True) + 1e-12
        Y = np.cumsum(steps * rng.uniform(0.5, 5.0), axis=0)
        m = int(rng.integers(5, 30))
        k = np.sort(rng.integers(0, n, m))
        if rng.random() < 0.3:
            k = rng.permutation(k)
        X = Y[k] + rng.normal(0, rng.choice([0.01, 1.0, 20.0]), (m, 3))
        _, d = met.nearest_points(X, Y, window=int(rng.integers(1, 60)))
        _, d_ref = met.brute_force_nearest(X, Y)
        mismatched += not np.array_equal(d, d_ref)
    record_property("pairs", pairs)
    record_property("mismatched", mismatched)
    assert mismatched == 0


@C9
def test_check_spec_examples():
    assert report(0.49, 0.18, 0.82).ok
    assert report(0.50, 3.0, 5.0).passed == {"p_err": False, "n_err": False, "speed_std": False}
    assert report(0.0, 0.0, 0.0).ok
