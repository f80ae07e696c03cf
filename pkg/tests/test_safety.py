import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_jacobian, random_input, random_state, rel_err
from safepush.adaptive import TrackingReference, composite_error, reference_motion
from safepush.model import (
    ContactConfig,
    contact_arrays,
    dynamics,
    dynamics_with_jacobians,
    regressor,
    wrench_from_inputs,
)
from safepush.safety import (
    CbfGains,
    Limits,
    Obstacle,
    PenaltyParams,
    bound_constraints,
    cbf_robot,
    clf_constraint,
    clf_terms,
    ecbf_object,
    ecbf_roots,
    object_barrier,
    object_ecbf_terms,
    penalty,
    robot_barrier,
    robot_cbf_terms,
    validate_ecbf_gains,
)

GAINS = CbfGains()
K_D = 3.0 * np.eye(3)


# ---------------------------------------------------------------- penalty


def test_penalty_examples():
    p = PenaltyParams(1.0, 0.5)
    assert penalty(1.0, p)[0] == pytest.approx(0.0, abs=1e-15)
    assert penalty(0.0, p)[0] == pytest.approx(1.5 + math.log(2.0), abs=1e-12)
    assert penalty(0.0, p)[0] == pytest.approx(2.1931, abs=1e-4)


def test_penalty_c1_at_threshold():
    for rho, eps in [(0.8, 0.5), (1.0, 0.05), (0.1, 0.01), (3.0, 2.0)]:
        p = PenaltyParams(rho, eps)
        # closed forms of both branches evaluated at h = eps
        log_val, log_d1 = -rho * math.log(eps), -rho / eps
        z = -1.0
        quad_val = 0.5 * rho * (z * z - 1.0) - rho * math.log(eps)
        quad_d1 = rho * z / eps
        assert abs(log_val - quad_val) < 1e-12 and abs(log_d1 - quad_d1) < 1e-12
        v, d1, _ = penalty(np.array([eps, np.nextafter(eps, 0.0)]), p)
        assert abs(v[0] - v[1]) < 1e-12
        assert abs(d1[0] - d1[1]) < 1e-12 * max(1.0, abs(d1[0]))


def test_penalty_convex_on_grid():
    h = np.linspace(-5.0, 5.0, 20001)
    for p in (PenaltyParams(0.8, 0.5), PenaltyParams(1.0, 0.05)):
        v, d1, d2 = penalty(h, p)
        assert np.all(d2 > 0)
        assert np.all(np.diff(d1) >= 0)
        # second differences of the value are non-negative as well
        assert np.all(np.diff(v, 2) >= -1e-12)


@given(st.floats(-3.0, 3.0), st.floats(0.1, 2.0), st.floats(0.01, 1.0))
def test_penalty_derivatives_fd(h, rho, eps):
    p = PenaltyParams(rho, eps)
    step = 1e-6
    if abs(h - eps) < 2 * step:
        return
    v, d1, d2 = penalty(h, p)
    fd1 = (penalty(h + step, p)[0] - penalty(h - step, p)[0]) / (2 * step)
    fd2 = (penalty(h + step, p)[1] - penalty(h - step, p)[1]) / (2 * step)
    assert fd1 == pytest.approx(float(d1), rel=1e-5, abs=1e-6)
    assert fd2 == pytest.approx(float(d2), rel=1e-5, abs=1e-6)


def test_penalty_params_validation():
    with pytest.raises(ValueError):
        PenaltyParams(0.0, 0.5)
    with pytest.raises(ValueError):
        PenaltyParams(1.0, -0.1)


# ---------------------------------------------------------------- gains


def test_ecbf_gain_roots():
    np.testing.assert_allclose(np.sort(ecbf_roots(4.0, 4.0).real), [-2.0, -2.0], atol=1e-7)
    validate_ecbf_gains(4.0, 4.0)
    with pytest.raises(ValueError, match="complex"):
        validate_ecbf_gains(5.0, 2.0)
    with pytest.raises(ValueError):
        CbfGains(5.0, 2.0)
    with pytest.raises(ValueError):
        CbfGains(4.0, 4.0, 0.0)


# ---------------------------------------------------------------- object barrier


def test_object_barrier_examples():
    obs = Obstacle((3.0, 2.0), 1.0, 0.9)
    assert object_barrier(np.zeros(8), obs) == pytest.approx(math.sqrt(13) - 1.0)
    x = np.zeros(8)
    x[:2] = (2.0, 2.0)
    assert object_barrier(x, obs) == pytest.approx(0.0)
    x[:2] = (2.5, 2.0)
    assert object_barrier(x, obs) < 0


def test_ecbf_at_rest(nominal, contacts):
    obs = Obstacle((3.0, 2.0), 1.0, 0.9)
    x = np.zeros(8)
    h = ecbf_object(x, np.zeros(4), np.zeros(4), obs, GAINS, nominal, contacts)
    assert h == pytest.approx(GAINS.alpha_m * object_barrier(x, obs))


def test_ecbf_constant_closing_speed(nominal, contacts):
    obs = Obstacle((3.0, 0.0), 1.0, 0.9)
    v = 0.4
    x = np.zeros(8)
    x[3] = v  # heading straight at the obstacle, no input, no friction
    h = ecbf_object(x, np.zeros(4), np.zeros(4), obs, GAINS, nominal, contacts)
    assert h == pytest.approx(-GAINS.beta_m * v + GAINS.alpha_m * 2.0)


def test_ecbf_moving_obstacle_uses_relative_velocity(nominal, contacts):
    x = np.zeros(8)
    x[3] = 0.4
    still = Obstacle((3.0, 0.0), 1.0, 0.9)
    # an obstacle moving with the object sees no closing speed
    moving = Obstacle((3.0, 0.0), 1.0, 0.9, velocity=(0.4, 0.0))
    h0 = ecbf_object(x, np.zeros(4), np.zeros(4), still, GAINS, nominal, contacts)
    h1 = ecbf_object(x, np.zeros(4), np.zeros(4), moving, GAINS, nominal, contacts)
    assert h1 == pytest.approx(GAINS.alpha_m * 2.0)
    assert h1 - h0 == pytest.approx(GAINS.beta_m * 0.4)


def test_ecbf_degenerate_center(nominal, contacts):
    obs = Obstacle((0.0, 0.0), 1.0, 0.9)
    with pytest.raises(ValueError):
        ecbf_object(np.zeros(8), np.zeros(4), np.zeros(4), obs, GAINS, nominal, contacts)


def _affine_in_u(fn, rng):
    u1, u2 = random_input(rng), random_input(rng)
    lhs = fn(u1 + u2) - fn(u2)
    rhs = fn(u1) - fn(np.zeros_like(u1))
    return abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_constraints_affine_in_u(nominal, contacts, rng):
    obs = Obstacle((2.5, 1.5), 1.0, 0.7, velocity=(0.1, -0.2))
    ref = TrackingReference(np.array([0.5, 0.2, 0.1]), np.array([0.3, 0.1, 0.0]))
    for _ in range(50):
        x = random_state(rng)
        psi = np.array([1.0, 0.05, 20.0, 3.0])
        assert _affine_in_u(lambda u: ecbf_object(x, u, psi, obs, GAINS, nominal, contacts), rng)
        assert _affine_in_u(lambda u: cbf_robot(x, u, 1, obs, GAINS, contacts), rng)
        assert _affine_in_u(lambda u: clf_constraint(x, u, psi, ref, K_D, nominal, contacts), rng)


def test_object_ecbf_gradients_fd(nominal, contacts, rng):
    ca = contact_arrays(contacts)
    center, vel = np.array([2.5, 1.5]), np.array([0.1, -0.2])

    def h_of(x, u, psi):
        xd, A, B = dynamics_with_jacobians(x, u, psi, ca, nominal)
        return object_ecbf_terms(x, xd, A, B, center, vel, 1.0, GAINS)

    worst = 0.0
    for _ in range(100):
        x, u = random_state(rng), random_input(rng)
        psi = np.array([rng.uniform(-2, 2), rng.uniform(-0.2, 0.2), rng.uniform(0, 40),
                        rng.uniform(0, 10)])
        _, gx, gu = h_of(x, u, psi)
        fx = central_jacobian(lambda xx: h_of(xx, u, psi)[0], x)
        fu = central_jacobian(lambda uu: h_of(x, uu, psi)[0], u)
        worst = max(worst, rel_err(gx, fx), rel_err(gu, fu))
    assert worst < 1e-5


# ---------------------------------------------------------------- robot barrier


def test_robot_barrier_examples():
    c = ContactConfig((-0.5, 0.0), (1.0, 0.0), (0.0, 1.0), -0.3, 0.3, 0.35)
    obs = Obstacle((1.0, 0.0), 2.0, 0.9)
    x = np.zeros(7)
    assert robot_barrier(x, 0, obs, [c]) == pytest.approx(0.95)
    on_boundary = Obstacle((1.0, 0.0), 2.0, 1.85)
    assert robot_barrier(x, 0, on_boundary, [c]) == pytest.approx(0.0, abs=1e-12)


def test_robot_barrier_decreases_when_sliding_toward_obstacle():
    c = ContactConfig((-0.5, 0.0), (1.0, 0.0), (0.0, 1.0), -0.4, 0.4, 0.35)
    obs = Obstacle((-0.85, 2.0), 2.0, 0.5)
    vals = []
    for d in np.linspace(-0.4, 0.4, 9):
        x = np.zeros(7)
        x[6] = d
        vals.append(robot_barrier(x, 0, obs, [c]))
    assert np.all(np.diff(vals) < 0)


def test_robot_cbf_examples():
    c = ContactConfig((-0.5, 0.0), (1.0, 0.0), (0.0, 1.0), -0.4, 0.4, 0.35)
    obs = Obstacle((-0.85, -2.0), 2.0, 0.5)
    x = np.zeros(7)
    B = robot_barrier(x, 0, obs, [c])
    assert cbf_robot(x, np.zeros(2), 0, obs, GAINS, [c]) == pytest.approx(GAINS.alpha_r * B)
    # sliding along +t moves the agent straight away from the obstacle
    w = 0.3
    h = cbf_robot(x, np.array([0.0, w]), 0, obs, GAINS, [c])
    assert h == pytest.approx(w + GAINS.alpha_r * B)
    with pytest.raises(IndexError):
        cbf_robot(x, np.zeros(2), 1, obs, GAINS, [c])


def test_robot_cbf_gradients_fd(contacts, rng):
    ca = contact_arrays(contacts)
    center, vel = np.array([1.5, -1.0]), np.array([-0.3, 0.2])
    worst = 0.0
    for _ in range(100):
        x, u = random_state(rng), random_input(rng)
        for i in range(2):
            _, gx, gu = robot_cbf_terms(x, u, ca, i, center, vel, 0.7, 4.0)
            fx = central_jacobian(lambda xx: robot_cbf_terms(xx, u, ca, i, center, vel, 0.7, 4.0)[0], x)
            fu = central_jacobian(lambda uu: robot_cbf_terms(x, uu, ca, i, center, vel, 0.7, 4.0)[0], u)
            worst = max(worst, rel_err(gx, fx), rel_err(gu, fu))
    assert worst < 1e-5


# ---------------------------------------------------------------- CLF


def test_clf_zero_on_sliding_surface(nominal, contacts, rng):
    ref = TrackingReference(np.array([0.2, 0.1, 0.0]), np.array([0.3, 0.0, 0.0]))
    x = np.zeros(8)
    x[:3] = ref.q_d
    x[3:6] = ref.qdot_d
    for _ in range(5):
        assert clf_constraint(x, random_input(rng), np.zeros(4), ref, K_D, nominal,
                              contacts) == pytest.approx(0.0, abs=1e-12)


def test_clf_feedback_linearizing_wrench(nominal):
    # three pushers give an invertible wrench map at theta = 0
    cs = [ContactConfig.on_face(nominal, "-x", 0.2), ContactConfig.on_face(nominal, "-x", -0.2),
          ContactConfig.on_face(nominal, "-y", 0.0)]
    psi = np.array([1.5, 0.1, 12.0, 2.0])
    ref = TrackingReference(np.array([0.0, 0.0, 0.0]), np.array([0.4, 0.3, 0.0]))
    x = np.zeros(9)
    x[:3] = (-0.05, -0.02, 0.01)
    x[3:6] = (0.1, 0.05, -0.02)
    s = composite_error(x[:3], x[3:6], ref)
    qd_r, qdd_r = reference_motion(x[:3], x[3:6], ref)
    Y = regressor(x[:3], x[3:6], qd_r, qdd_r)
    tau_star = np.diag([6.0, 6.0, 0.64]) @ qdd_r + Y @ psi - K_D @ s
    cols = []
    for i in range(3):
        w = wrench_from_inputs(x, np.eye(6)[i], cs)
        cols.append(np.r_[w.force, w.moment])
    f = np.linalg.solve(np.column_stack(cols), tau_star)
    u = np.concatenate([f, np.zeros(3)])
    h = clf_constraint(x, u, psi, ref, K_D, nominal, cs)
    assert h == pytest.approx(0.5 * s @ K_D @ s, rel=1e-10)


def test_clf_no_actuation(nominal, contacts):
    # zero reference motion and no estimate: q_d = q and qdot_d chosen so that qdot_r = 0
    x = np.zeros(8)
    x[3:6] = (0.2, -0.1, 0.05)
    ref = TrackingReference(np.zeros(3), np.zeros(3), lam=3.0)
    s = composite_error(x[:3], x[3:6], ref)
    qd_r, qdd_r = reference_motion(x[:3], x[3:6], ref)
    np.testing.assert_allclose(qd_r, 0.0)
    # q_ddot_r = -lam qdot is non-zero here, so compare against the formula with that term
    h = clf_constraint(x, np.zeros(4), np.zeros(4), ref, K_D, nominal, contacts)
    expected = s @ (np.diag([6.0, 6.0, 0.64]) @ qdd_r) - 0.5 * s @ K_D @ s
    assert h == pytest.approx(expected)
    # at rest with only position error, every term but the damping vanishes
    x = np.zeros(8)
    ref = TrackingReference(np.array([-0.1, 0.0, 0.0]), np.zeros(3), lam=3.0)
    s = composite_error(x[:3], x[3:6], ref)
    h = clf_constraint(x, np.zeros(4), np.zeros(4), ref, K_D, nominal, contacts)
    assert h == pytest.approx(-0.5 * s @ K_D @ s)
    assert h < 0


def test_clf_gradients_fd(nominal, contacts, rng):
    ca = contact_arrays(contacts)
    worst = 0.0
    for _ in range(100):
        x, u = random_state(rng), random_input(rng)
        psi = np.array([rng.uniform(-2, 2), rng.uniform(-0.2, 0.2), rng.uniform(0, 40),
                        rng.uniform(0, 10)])
        q_ref, qd_ref = rng.normal(size=3), rng.normal(size=3) * 0.3

        def h(xx, uu):
            return clf_terms(xx, uu, ca, psi, q_ref, qd_ref, 3.0, K_D, nominal)

        _, gx, gu = h(x, u)
        fx = central_jacobian(lambda xx: h(xx, u)[0], x)
        fu = central_jacobian(lambda uu: h(x, uu)[0], u)
        worst = max(worst, rel_err(gx, fx), rel_err(gu, fu))
    assert worst < 1e-5


def test_clf_matches_dynamics_form(nominal, contacts, rng):
    # h = -s^T H_eff (qdd - qdd_r) - s^T K_D s / 2 with qdd from the planner dynamics
    for _ in range(20):
        x, u = random_state(rng), random_input(rng)
        psi = np.array([0.5, 0.05, 10.0, 2.0])
        ref = TrackingReference(rng.normal(size=3), rng.normal(size=3) * 0.2)
        s = composite_error(x[:3], x[3:6], ref)
        _, qdd_r = reference_motion(x[:3], x[3:6], ref)
        qdd = dynamics(x, u, psi, contacts, nominal)[3:6]
        H_eff = np.diag([6.5, 6.5, 0.69])
        expected = -s @ H_eff @ (qdd - qdd_r) - 0.5 * s @ K_D @ s
        h = clf_constraint(x, u, psi, ref, K_D, nominal, contacts)
        assert h == pytest.approx(expected, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- bounds


def test_bound_examples(contacts):
    lim = Limits(0.7, 1.0)
    ca = contact_arrays(contacts)
    x = np.zeros(8)
    u = np.array([0.35, 0.0, 0.0, 0.0])
    h = bound_constraints(x, u, lim, contacts).reshape(2, 6)
    assert h[0, 0] == pytest.approx(0.35) and h[0, 1] == pytest.approx(0.35)
    x[6] = ca.d_upper[0]
    h = bound_constraints(x, u, lim, contacts).reshape(2, 6)
    assert h[0, 3] == 0.0
    u[2] = 1.2
    h = bound_constraints(x, u, lim, contacts).reshape(2, 6)
    assert h[0, 4] == pytest.approx(-0.2)
    assert h[0, 5] == pytest.approx(2.2)


def test_limits_validation():
    with pytest.raises(ValueError):
        Limits(0.0, 1.0)


def test_obstacle_validation():
    with pytest.raises(ValueError):
        Obstacle((0, 0), 0.0, 1.0)
    with pytest.raises(ValueError):
        Obstacle((0, 0), 1.0, 1.0, waypoints=((1.0, 0, 0), (1.0, 1, 1)))
    o = Obstacle((1.0, 2.0), 1.0, 1.0, velocity=(0.5, 0.0))
    np.testing.assert_allclose(o.predicted(np.array([0.0, 2.0])), [[1, 2], [2, 2]])
