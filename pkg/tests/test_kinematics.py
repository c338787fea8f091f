import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvetrack import kinematics as kin
from conftest import random_q


def chain_oracle(q, model):
    """Straight-line product of 4x4 homogeneous joint transforms."""
    T = np.eye(4)
    for h, o, t in zip(model.joint_axes, model.joint_origins, q):
        K = np.array([[0, -h[2], h[1]], [h[2], 0, -h[0]], [-h[1], h[0], 0]])
        R = np.eye(3) + np.sin(t) * K + (1 - np.cos(t)) * K @ K
        A = np.eye(4)
        A[:3, :3] = R
        A[:3, 3] = o - R @ o
        T = T @ A
    tool = np.eye(4)
    tool[:3, :3] = model.tool_R
    tool[:3, 3] = model.p_tcp0
    T = T @ tool
    return T[:3, 3], T[:3, :3]


def test_zero_configuration(model):
    p, R = kin.fwd_batch(np.zeros((1, 6)), model)
    assert np.allclose(p[0], [2112.5, 0, 2055])
    assert np.allclose(p[0], model.p_tcp0)
    assert np.allclose(R[0], model.tool_R)


def test_fwd_matches_chain_oracle(model):
    rng = np.random.default_rng(0)
    Q = random_q(model, rng, 200)
    P, R = kin.fwd_batch(Q, model)
    for q, p, r in zip(Q, P, R):
        po, ro = chain_oracle(q, model)
        assert np.linalg.norm(p - po) < 1e-9
        assert np.abs(r - ro).max() < 1e-12


def test_joint1_rotates_about_base_z(model):
    th = 0.7
    p = kin.fwd(np.array([th, 0, 0, 0, 0, 0]), model).p
    Rz = kin.beta_to_rotation([0, 0, th])
    assert np.allclose(p, Rz @ model.p_tcp0, atol=1e-9)


def test_ez_unit_and_column(model):
    rng = np.random.default_rng(1)
    Q = random_q(model, rng, 50)
    E = kin.ez(Q, model)
    _, R = kin.fwd_batch(Q, model)
    assert np.allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-12)
    assert np.abs(E - R[:, :, 2]).max() < 1e-12
    assert np.allclose(kin.ez(np.zeros(6), model), model.tool_R[:, 2])


def test_jacobian_joint1_screw_at_zero(model):
    J = kin.jacobian(np.zeros(6), model)
    z = np.array([0.0, 0.0, 1.0])
    assert np.allclose(J[:3, 0], z)
    assert np.allclose(J[3:, 0], np.cross(z, model.p_tcp0))


def test_jacobian_singular_when_stretched(model):
    # wrist singularity: joint 5 at zero aligns joints 4 and 6
    s = np.linalg.svd(kin.jacobian(np.array([0.1, 0.2, -0.3, 0.4, 0.0, 0.5]), model), compute_uv=False)
    assert s[-1] < 1e-9 * s[0]


def test_inverse_unreachable_is_empty(model):
    assert kin.inv(kin.Pose(np.array([1e5, 0, 0]), np.zeros(3)), model) == []


def test_inverse_all_branches_map_back(model):
    rng = np.random.default_rng(2)
    for q in random_q(model, rng, 20):
        pose = kin.fwd(q, model)
        sols = kin.inv(pose, model)
        assert sols
        for s in sols:
            pc, Rc = kin.fwd_batch(s[None], model)
            assert np.linalg.norm(pc[0] - pose.p) < 1e-6
            assert kin.orientation_distance(Rc[0], pose.R) < 1e-8


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_beta_round_trip(beta):
    beta = np.array(beta)
    if np.linalg.norm(beta) >= np.pi - 1e-6:
        beta *= (np.pi - 1e-3) / np.linalg.norm(beta)
    R = kin.beta_to_rotation(beta)
    assert np.allclose(kin.rotation_to_beta(R), beta, atol=1e-12)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_beta_examples():
    assert np.allclose(kin.beta_to_rotation(np.zeros(3)), np.eye(3))
    Rx = kin.beta_to_rotation([np.pi / 2, 0, 0])
    assert np.allclose(Rx, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    rng = np.random.default_rng(3)
    for _ in range(20):
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        Q *= np.sign(np.linalg.det(Q))
        assert np.abs(kin.beta_to_rotation(kin.rotation_to_beta(Q)) - Q).max() < 1e-12
        assert np.linalg.norm(kin.rotation_to_beta(Q)) <= np.pi + 1e-12


def test_accel_table_interpolation():
    q2 = np.array([0.0, 1.0, 2.0])
    q3 = np.array([-1.0, 0.0])
    vals = np.arange(18, dtype=float).reshape(3, 2, 3) + 1.0
    t = kin.AccelTable(q2, q3, vals)
    a, clamped = t.lookup(1.0, 0.0)
    assert np.array_equal(a, vals[1, 1]) and not clamped
    a, _ = t.lookup(0.5, -0.5)
    assert np.allclose(a, vals[:2, :2].reshape(4, 3).mean(axis=0))
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, y = rng.uniform(0, 1), rng.uniform(-1, 0)
        u, w = x, y + 1
        ref = (1 - u) * (1 - w) * vals[0, 0] + u * (1 - w) * vals[1, 0] + (1 - u) * w * vals[0, 1] + u * w * vals[1, 1]
        assert np.allclose(t.lookup(x, y)[0], ref, atol=1e-12)
    _, clamped = t.lookup(5.0, 0.0)
    assert clamped


def test_accel_table_csv_round_trip(tmp_path, model):
    t = model.accel_table
    t.to_csv(tmp_path / "a.csv")
    t2 = kin.AccelTable.from_csv(tmp_path / "a.csv")
    assert np.array_equal(t.values, t2.values)


def test_bundled_table_covers_limits(model):
    t = model.accel_table
    assert t.values.shape == (10, 10, 3)
    assert np.all(t.values > 0)


def test_model_validation(tmp_path):
    import yaml
    doc = yaml.safe_load(open(kin.BUNDLED_MODEL))
    doc["joint_origins_mm"][5] = [1662.5, 0, 2100]  # wrist axes no longer intersect
    doc["accel_table"] = {"csv": str(kin.BUNDLED_MODEL.parent / "irb6640_accel.csv")}
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(doc))
    with pytest.raises(kin.ModelError):
        kin.load_model(p)
