"""Straight-line subgoal trajectories toward the user goal."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Goal:
    position: tuple[float, float]
    theta: float = 0.0
    v_avg: float = 0.5
    omega_avg: float = 0.8

    def __post_init__(self):
        if not self.v_avg > 0 or not self.omega_avg > 0:
            raise ValueError("v_avg and omega_avg must be positive")


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def heading_error(theta: float, goal: Goal) -> float:
    """Signed shortest arc from ``theta`` to the goal heading."""
    return float(_wrap(goal.theta - theta))


def time_to_goal(q, goal: Goal) -> float:
    q = np.asarray(q, dtype=float)
    dist = float(np.hypot(*(np.asarray(goal.position) - q[:2])))
    return max(dist / goal.v_avg, abs(heading_error(q[2], goal)) / goal.omega_avg)


def subgoals(q, goal: Goal, dt: float, n_steps: int):
    """Reference configurations and velocities at ``t_k = k dt``, ``k = 0..n_steps``.

    Translation and rotation share one arrival time so both finish together.
    Velocities are the mean slope over ``[t_k, t_k + dt]``, which is zero
    once the goal is reached.  ``theta`` keeps the caller's unwrapped branch.
    """
    if not dt > 0 or n_steps < 1:
        raise ValueError("need dt > 0 and n_steps >= 1")
    q = np.asarray(q, dtype=float)
    delta = np.array([goal.position[0] - q[0], goal.position[1] - q[1], heading_error(q[2], goal)])
    t_arrive = time_to_goal(q, goal)
    t = dt * np.arange(n_steps + 2)
    frac = np.ones_like(t) if t_arrive == 0.0 else np.minimum(t / t_arrive, 1.0)
    path = q + frac[:, None] * delta
    q_ref = path[:-1]
    qdot_ref = (path[1:] - path[:-1]) / dt
    return q_ref, qdot_ref
