import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safepush.reference import Goal, heading_error, subgoals, time_to_goal

coord = st.floats(-10, 10, allow_nan=False)


def test_goal_validation():
    with pytest.raises(ValueError):
        Goal((1.0, 1.0), v_avg=0.0)
    with pytest.raises(ValueError):
        Goal((1.0, 1.0), omega_avg=-1.0)


def test_time_to_goal_examples():
    g = Goal((5.0, 5.0), 0.0, 0.5)
    assert time_to_goal(np.array([5.0, 5.0, 0.0]), g) == 0.0
    assert time_to_goal(np.zeros(3), g) == pytest.approx(math.sqrt(50) / 0.5)
    assert time_to_goal(np.zeros(3), Goal((0.0, 0.0), math.pi, omega_avg=0.8)) == \
        pytest.approx(math.pi / 0.8)


def test_heading_error_shortest_arc():
    g = Goal((0.0, 0.0), 0.1)
    assert heading_error(2 * math.pi + 0.05, g) == pytest.approx(0.05)
    assert heading_error(-0.2, g) == pytest.approx(0.3)


def test_subgoals_at_goal():
    g = Goal((1.0, 2.0), 0.3)
    q, qd = subgoals(np.array([1.0, 2.0, 0.3]), g, 0.1, 10)
    np.testing.assert_allclose(q, np.tile([1.0, 2.0, 0.3], (11, 1)))
    np.testing.assert_array_equal(qd, np.zeros((11, 3)))


def test_subgoals_straight_line_long_trip():
    g = Goal((10.0, 0.0), 0.0, 0.5)
    q, qd = subgoals(np.zeros(3), g, 0.1, 50)
    assert q.shape == (51, 3) and qd.shape == (51, 3)
    np.testing.assert_allclose(q[-1], [0.5 * 5.0, 0.0, 0.0])
    np.testing.assert_allclose(qd[:, 0], 0.5)


def test_subgoals_clamp_after_arrival():
    g = Goal((1.0, 0.0), 0.0, 0.5)
    q, qd = subgoals(np.zeros(3), g, 0.1, 50)
    np.testing.assert_allclose(q[20:], np.tile([1.0, 0.0, 0.0], (31, 1)))
    np.testing.assert_array_equal(qd[20:], 0.0)


def test_subgoals_validation():
    with pytest.raises(ValueError):
        subgoals(np.zeros(3), Goal((1.0, 0.0)), 0.0, 5)
    with pytest.raises(ValueError):
        subgoals(np.zeros(3), Goal((1.0, 0.0)), 0.1, 0)


@given(coord, coord, st.floats(-3, 3), coord, coord, st.floats(-3, 3))
def test_subgoals_properties(x, y, th, gx, gy, gth):
    g = Goal((gx, gy), gth, 0.5, 0.8)
    q0 = np.array([x, y, th])
    q, qd = subgoals(q0, g, 0.1, 30)
    # positions on the segment toward the goal
    seg = np.array([gx - x, gy - y])
    L2 = seg @ seg
    for p in q[:, :2]:
        rel = p - q0[:2]
        if L2 > 0:
            t = rel @ seg / L2
            assert -1e-9 <= t <= 1 + 1e-9
            assert np.linalg.norm(rel - t * seg) <= 1e-9 * max(1.0, math.sqrt(L2))
        else:
            assert np.linalg.norm(rel) <= 1e-12
    # speed limits per axis
    assert np.all(np.abs(qd[:, :2]) <= 0.5 + 1e-9)
    assert np.all(np.abs(qd[:, 2]) <= 0.8 + 1e-9)


def test_subgoals_time_shift_consistency():
    g = Goal((4.0, 3.0), 1.0, 0.5, 0.8)
    q, _ = subgoals(np.zeros(3), g, 0.1, 40)
    q_shift, _ = subgoals(q[10], g, 0.1, 30)
    np.testing.assert_allclose(q_shift, q[10:], atol=1e-12)
