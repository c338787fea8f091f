import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvetrack import curves as cv
from curvetrack.curves import CurvePose


def test_flat_straight_curve():
    c = cv.gen_curve1(amplitudes=(), frequencies=(), length=500, parabola_coeff=0.0, samples=50)
    assert np.allclose(c.p[:, 1:], 0.0)
    assert np.allclose(c.n, [0, 0, 1])
    assert c.length == pytest.approx(500.0)


def test_planar_sine_has_vertical_normals():
    c = cv.gen_curve1(amplitudes=(30.0,), frequencies=(2.0,), parabola_coeff=0.0)
    assert np.allclose(c.n, [0, 0, 1])
    assert np.ptp(c.p[:, 1]) > 50


def test_curve1_on_surface_with_surface_normals():
    c = cv.gen_curve1()
    coef = 1.0 / 2000.0
    assert np.allclose(c.p[:, 2], coef * c.p[:, 0] ** 2, atol=1e-12)
    # central-difference surface normal of z = c x^2: (-dz/dx, -dz/dy, 1)
    h = 1e-4
    x = c.p[:, 0]
    dzdx = (coef * (x + h) ** 2 - coef * (x - h) ** 2) / (2 * h)
    n = np.stack([-dzdx, np.zeros_like(x), np.ones_like(x)], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert np.abs(n - c.n).max() < 1e-6
    assert len(c) == 1000
    assert 900 < np.ptp(c.p[:, 0]) < 1100


def test_curve2_edge_radius():
    c = cv.gen_curve2_analogue()
    a, b, d = c.p[:-2], c.p[1:-1], c.p[2:]
    ab = np.linalg.norm(b - a, axis=1)
    bd = np.linalg.norm(d - b, axis=1)
    ad = np.linalg.norm(d - a, axis=1)
    area2 = np.linalg.norm(np.cross(b - a, d - a), axis=1)
    R = ab * bd * ad / (2 * area2)
    assert np.abs(R - 2000.0).max() < 1e-6 * 2000.0 + 1e-6
    assert np.allclose(np.linalg.norm(c.n, axis=1), 1.0, atol=1e-9)


def test_curve2_degenerate_cases():
    c = cv.gen_curve2_analogue(span=0)
    assert len(c) == 1000
    centre = c.p - 0.04 * 300 * c.n
    assert np.allclose(centre, centre[0], atol=1e-9)
    assert len(cv.gen_curve2_analogue(samples=2)) == 2


def test_transform_identity_and_translation():
    c = cv.gen_curve1()
    same = cv.transform_curve(c, CurvePose(c.centroid, np.zeros(3)))
    assert np.allclose(same.p, c.p, atol=1e-9) and np.allclose(same.n, c.n)
    moved = cv.transform_curve(c, CurvePose(c.centroid + [10, -5, 3], np.zeros(3)))
    assert np.abs(moved.n - c.n).max() < 1e-15


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2000, 2000), min_size=3, max_size=3), st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_transform_is_isometry(p, beta):
    c = cv.gen_curve1(samples=60)
    t = cv.transform_curve(c, CurvePose(np.array(p), np.array(beta)))
    d0 = np.linalg.norm(c.p[:, None] - c.p[None], axis=2)
    d1 = np.linalg.norm(t.p[:, None] - t.p[None], axis=2)
    assert np.abs(d0 - d1).max() < 1e-9
    assert np.allclose(np.linalg.norm(t.n, axis=1), 1.0, atol=1e-9)
    assert np.allclose(t.centroid, p, atol=1e-9)


def test_resample():
    c = cv.gen_curve1()
    r = cv.resample(c, 1.0)
    step = np.linalg.norm(np.diff(r.p, axis=0), axis=1)
    assert np.abs(step - step.mean()).max() < 0.01 * step.mean()
    assert np.array_equal(r.p[0], c.p[0]) and np.array_equal(r.p[-1], c.p[-1])
    ends = cv.resample(c, c.length)
    assert len(ends) == 2
    line = cv.gen_curve1(amplitudes=(), frequencies=(), length=100, parabola_coeff=0.0, samples=7)
    rl = cv.resample(line, 10.0)
    assert np.allclose(np.diff(rl.p[:, 0]), 10.0)
    with pytest.raises(cv.CurveError):
        cv.resample(c, 0.0)


def test_csv_round_trip(tmp_path):
    c = cv.gen_curve2_analogue()
    cv.save_csv(c, tmp_path / "c.csv")
    d = cv.load_csv(tmp_path / "c.csv")
    assert np.abs(d.p - c.p).max() < 1e-9 and np.abs(d.n - c.n).max() < 1e-9


@pytest.mark.parametrize("body, msg", [
    ("x_mm,y_mm,z_mm,nx,ny,nz\n0,0,0,0,0,1\n1,0,0,0,0,2\n", ":3: normal is not unit"),
    ("x_mm,y_mm,z_mm,nx,ny,nz\n0,0,0,0,0,1\n1,0,0,0,1\n", ":3: expected 6 columns"),
    ("x_mm,y_mm,z_mm,nx,ny,nz\n0,0,0,0,0,1\n1,a,0,0,0,1\n", ":3: non-numeric"),
    ("x,y,z,nx,ny,nz\n0,0,0,0,0,1\n", ":1: expected header"),
    ("x_mm,y_mm,z_mm,nx,ny,nz\n0,0,0,0,0,1\n0,0,0,0,0,1\n", ":3: repeated point"),
])
def test_csv_errors(tmp_path, body, msg):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(cv.CurveError, match=msg):
        cv.load_csv(f)


def test_csv_small_normal_deviation_renormalised(tmp_path):
    f = tmp_path / "c.csv"
    f.write_text("x_mm,y_mm,z_mm,nx,ny,nz\n0,0,0,0,0,1.0005\n1,0,0,0,0,1\n")
    c = cv.load_csv(f)
    assert np.allclose(np.linalg.norm(c.n, axis=1), 1.0, atol=1e-12)
