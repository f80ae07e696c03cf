"""Ground-truth plant, scripted obstacles and the closed planning loop.

The plant carries the true inertial parameters, including a COM that may be
offset from ``p``, and regularized Coulomb friction.  None of this is known
to the planner, which only sees measured states and adapts ``psi``.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adaptive import (
    TrackingReference,
    UncertaintyEstimate,
    adaptation_step,
    composite_error,
    reference_motion,
)
from .model import (
    DEFAULT_V_EPS,
    ContactConfig,
    ObjectParams,
    agent_offsets,
    contact_arrays,
    mass_matrix,
    regressor,
    rotation2,
    wrench_terms,
)
from .nmpc import HorizonSolution, OcpWeights, PlannerConfig, SolverSettings, mpc_step
from .reference import Goal, heading_error, subgoals
from .safety import CbfGains, Limits, Obstacle, Penalties, clf_terms

GRAVITY = 9.81
ADAPTATION_TARGETS = ("plan", "subgoal")


@dataclass(frozen=True)
class TruePlant:
    params: ObjectParams
    mu: float = 0.4
    c_rot: float = 8.0
    g: float = GRAVITY
    v_stop: float = 0.01

    def __post_init__(self):
        if self.mu < 0 or self.c_rot < 0:
            raise ValueError("friction coefficients must be non-negative")
        if not self.v_stop > 0 or not self.g > 0:
            raise ValueError("v_stop and g must be positive")

    @property
    def breakaway_force(self) -> float:
        return self.mu * self.params.mass * self.g


def true_dynamics(state, force, moment: float, plant: TruePlant) -> np.ndarray:
    """``d/dt (q, qdot)`` for a world force and a moment about ``p``.

    Solves ``H q'' = tau + tau_friction - C q'`` with the true COM offset.
    Friction acts at the COM and is smoothed below ``v_stop``.
    """
    x, y, th, vx, vy, w = (float(v) for v in state)
    prm = plant.params
    m, Ip = prm.mass, prm.inertia
    c, s = math.cos(th), math.sin(th)
    rpx, rpy = prm.com_offset
    # a = R r_p, so the COM sits at p - a
    ax, ay = c * rpx - s * rpy, s * rpx + c * rpy
    # COM velocity: p' - w S a
    gx, gy = vx + w * ay, vy - w * ax
    speed = math.hypot(gx, gy)
    k = plant.mu * m * plant.g / max(speed, plant.v_stop)
    ffx, ffy = -k * gx, -k * gy
    # moment of the COM friction force about p: cross(-a, F_f)
    m_fric = -(ax * ffy - ay * ffx) - plant.c_rot * w / max(abs(w), plant.v_stop)
    # right-hand side tau + friction - C qdot, C[:2, 2] = m w a
    bx = float(force[0]) + ffx - m * w * w * ax
    by = float(force[1]) + ffy - m * w * w * ay
    bt = float(moment) + m_fric
    # H = [[m I, h], [h^T, Ip]] with h = -m S a = m (ay, -ax)
    hx, hy = m * ay, -m * ax
    # Schur complement on the rotational row
    schur = Ip - (hx * hx + hy * hy) / m
    wdot = (bt - (hx * bx + hy * by) / m) / schur
    return np.array([vx, vy, w, (bx - hx * wdot) / m, (by - hy * wdot) / m, wdot])


def integrate(state, force, moment: float, plant: TruePlant, dt_sim: float = 1e-3) -> np.ndarray:
    """One classical RK4 step with the wrench held."""
    if not dt_sim > 0:
        raise ValueError("dt_sim must be positive")
    state = np.asarray(state, dtype=float)
    k1 = true_dynamics(state, force, moment, plant)
    k2 = true_dynamics(state + 0.5 * dt_sim * k1, force, moment, plant)
    k3 = true_dynamics(state + 0.5 * dt_sim * k2, force, moment, plant)
    k4 = true_dynamics(state + dt_sim * k3, force, moment, plant)
    return state + dt_sim / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def kinetic_energy(state, params: ObjectParams) -> float:
    qd = np.asarray(state, dtype=float)[3:6]
    return 0.5 * float(qd @ mass_matrix(params, float(state[2])) @ qd)


def obstacle_update(obs: Obstacle, t: float) -> Obstacle:
    """Position and velocity of a scripted obstacle at time ``t``."""
    if not obs.waypoints:
        return obs
    wp = np.asarray(obs.waypoints, dtype=float)
    if wp.shape[0] == 1 or t <= wp[0, 0] or t >= wp[-1, 0]:
        end = wp[0] if t <= wp[0, 0] else wp[-1]
        return replace(obs, center=(float(end[1]), float(end[2])), velocity=(0.0, 0.0))
    j = int(np.searchsorted(wp[:, 0], t, side="right")) - 1
    t0, t1 = wp[j, 0], wp[j + 1, 0]
    vel = (wp[j + 1, 1:] - wp[j, 1:]) / (t1 - t0)
    pos = wp[j, 1:] + (t - t0) * vel
    return replace(obs, center=(float(pos[0]), float(pos[1])),
                   velocity=(float(vel[0]), float(vel[1])))


def apply_agents(u, d, limits: Limits, contacts, dt: float):
    """Saturate commands and advance the contact offsets.

    Returns the realized input ``(f, d_dot)`` and the new offsets; ``d_dot``
    is zeroed where the offset is pinned at a bound.
    """
    ca = contact_arrays(contacts)
    u = np.asarray(u, dtype=float)
    n = ca.n
    f = np.clip(u[:n], 0.0, limits.f_max)
    dd = np.clip(u[n:], -limits.v_max, limits.v_max)
    d_next = np.clip(np.asarray(d, dtype=float) + dt * dd, ca.d_lower, ca.d_upper)
    return np.concatenate([f, (d_next - d) / dt]), d_next


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: TruePlant
    nominal: ObjectParams
    contacts: tuple[ContactConfig, ...]
    goal: Goal
    q0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    d0: tuple[float, ...] | None = None
    obstacles: tuple[Obstacle, ...] = ()
    weights: OcpWeights | None = None
    penalties: Penalties = Penalties()
    gains: CbfGains = CbfGains()
    lam: float = 3.0
    K_D: np.ndarray = field(default_factory=lambda: 3.0 * np.eye(3))
    adaptation: UncertaintyEstimate = field(default_factory=UncertaintyEstimate)
    limits: Limits = Limits()
    settings: SolverSettings = SolverSettings()
    time_limit: float = 120.0
    control_period: float = 0.02
    dt_sim: float = 1e-3
    position_tol: float = 0.1
    heading_tol: float = 0.1
    hold_time: float = 1.0
    measurement_noise: float = 0.0
    seed: int = 0
    v_eps: float = DEFAULT_V_EPS
    regressor_v_eps: float = DEFAULT_V_EPS
    adaptation_target: str = "plan"
    adaptation_window: float = 0.5
    implicit_friction: bool = True
    adaptive_enabled: bool = True
    robot_cbf_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(self.contacts))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "K_D", np.asarray(self.K_D, dtype=float))
        if not self.contacts:
            raise ValueError("at least one agent is required")
        if self.d0 is not None and len(self.d0) != len(self.contacts):
            raise ValueError("d0 must give one offset per agent")
        for name in ("time_limit", "control_period", "dt_sim", "position_tol", "heading_tol",
                     "v_eps", "regressor_v_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.adaptation_target not in ADAPTATION_TARGETS:
            raise ValueError(f"adaptation_target must be one of {ADAPTATION_TARGETS}")
        if self.adaptation_window < self.control_period:
            raise ValueError("adaptation_window must be at least one control period")
        if self.hold_time < 0 or self.measurement_noise < 0:
            raise ValueError("hold_time and measurement_noise must be non-negative")
        if self.dt_sim > self.control_period:
            raise ValueError("dt_sim must not exceed control_period")
        if self.K_D.shape != (3, 3) or np.linalg.eigvalsh(0.5 * (self.K_D + self.K_D.T)).min() <= 0:
            raise ValueError("K_D must be 3x3 positive definite")

    @property
    def n_agents(self) -> int:
        return len(self.contacts)

    def initial_d(self) -> np.ndarray:
        return np.zeros(self.n_agents) if self.d0 is None else np.asarray(self.d0, dtype=float)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            nominal=self.nominal, contacts=self.contacts, limits=self.limits,
            weights=self.weights, penalties=self.penalties, gains=self.gains, lam=self.lam,
            K_D=self.K_D, settings=self.settings, robot_cbf_enabled=self.robot_cbf_enabled,
            v_eps=self.v_eps, implicit_friction=self.implicit_friction)


# ---------------------------------------------------------------- closed loop


@dataclass
class TrajectoryLog:
    """Per-tick samples; row ``k`` is the state at ``t[k]`` and the input applied after it."""

    n_agents: int
    n_obstacles: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    b_obj: list = field(default_factory=list)
    b_robot: list = field(default_factory=list)
    h_clf: list = field(default_factory=list)
    lyapunov: list = field(default_factory=list)
    sqp_iters: list = field(default_factory=list)
    solve_ms: list = field(default_factory=list)
    obstacle_centers: list = field(default_factory=list)
    success: bool = False
    failed: bool = False
    message: str = ""

    def __len__(self) -> int:
        return len(self.t)

    def arrays(self) -> dict[str, np.ndarray]:
        n, j = self.n_agents, self.n_obstacles
        k = len(self.t)
        return {
            "t": np.asarray(self.t, dtype=float),
            "x": np.asarray(self.x, dtype=float).reshape(k, 6 + n),
            "u": np.asarray(self.u, dtype=float).reshape(k, 2 * n),
            "psi": np.asarray(self.psi, dtype=float).reshape(k, 4),
            "b_obj": np.asarray(self.b_obj, dtype=float).reshape(k, j),
            "b_robot": np.asarray(self.b_robot, dtype=float).reshape(k, n, j),
            "h_clf": np.asarray(self.h_clf, dtype=float),
            "lyapunov": np.asarray(self.lyapunov, dtype=float),
            "sqp_iters": np.asarray(self.sqp_iters, dtype=int),
            "solve_ms": np.asarray(self.solve_ms, dtype=float),
            "obstacle_centers": np.asarray(self.obstacle_centers, dtype=float).reshape(k, j, 2),
        }


def barrier_values(x, obstacles: Sequence[Obstacle], contacts, nominal_offsets=None):
    """Object barriers ``(J,)`` and agent barriers ``(N, J)`` at state ``x``."""
    ca = contact_arrays(contacts)
    x = np.asarray(x, dtype=float)
    if not obstacles:
        return np.zeros(0), np.zeros((ca.n, 0))
    centers = np.array([o.center for o in obstacles], dtype=float)
    b_obj = np.linalg.norm(centers - x[:2], axis=1) - np.array([o.radius_object for o in obstacles])
    agents = x[:2] + agent_offsets(x[6:], ca) @ rotation2(x[2]).T
    dist = np.linalg.norm(agents[:, None, :] - centers[None], axis=2)
    return b_obj, dist - np.array([o.radius_agent for o in obstacles])[None]


def _at_goal(q, goal: Goal, sc: Scenario) -> bool:
    pos_err = math.hypot(q[0] - goal.position[0], q[1] - goal.position[1])
    return pos_err < sc.position_tol and abs(heading_error(q[2], goal)) < sc.heading_tol


def _planned_reference(plan: HorizonSolution | None, elapsed: float, dt: float, x, lam: float
                       ) -> TrackingReference:
    """Desired motion at ``elapsed`` seconds into the previous plan.

    Without a plan the measured state itself is the reference (``s = 0``).
    """
    if plan is None or plan.stats.failed:
        return TrackingReference(x[:3].copy(), x[3:6].copy(), lam=lam)
    X = plan.X
    n = X.shape[0] - 1
    tau = min(elapsed / dt, float(n))
    k = min(int(tau), n - 1)
    a = tau - k
    xd = (1.0 - a) * X[k] + a * X[k + 1]
    qdd = (X[k + 1, 3:6] - X[k, 3:6]) / dt
    return TrackingReference(xd[:3], xd[3:6], qdd, lam=lam)


def run_closed_loop(sc: Scenario) -> TrajectoryLog:
    """Simulate the planner against the true plant until success or the time limit."""
    cfg = sc.planner_config()
    ca = contact_arrays(sc.contacts)
    st = sc.settings
    rng = np.random.default_rng(sc.seed)
    n_sub = int(round(sc.control_period / sc.dt_sim))
    if not math.isclose(n_sub * sc.dt_sim, sc.control_period, rel_tol=1e-9):
        raise ValueError("control_period must be an integer multiple of dt_sim")
    n_ticks = int(math.floor(sc.time_limit / sc.control_period + 1e-9))
    hold_ticks = int(math.ceil(sc.hold_time / sc.control_period - 1e-9))
    nominal_h = np.diag([sc.nominal.mass, sc.nominal.mass, sc.nominal.inertia])

    plant_state = np.array([*sc.q0, 0.0, 0.0, 0.0], dtype=float)
    d = sc.initial_d().copy()
    est = sc.adaptation
    prev: HorizonSolution | None = None
    log = TrajectoryLog(sc.n_agents, len(sc.obstacles))
    held = 0
    # plans from the last ``lag`` ticks; the oldest one predicts the current state
    lag = max(1, int(round(sc.adaptation_window / sc.control_period)))
    plans: deque = deque(maxlen=lag)

    for tick in range(n_ticks + 1):
        t = tick * sc.control_period
        obstacles = [obstacle_update(o, t) for o in sc.obstacles]
        x_true = np.concatenate([plant_state, d])
        x_meas = x_true.copy()
        if sc.measurement_noise > 0:
            x_meas[:6] += sc.measurement_noise * rng.standard_normal(6)

        held = held + 1 if _at_goal(x_true[:3], sc.goal, sc) else 0
        done = held > hold_ticks or tick == n_ticks

        # tracking error against the motion the previous plan predicted for now
        if sc.adaptation_target == "plan":
            # compare against the plan made ``lag`` ticks ago
            old = plans[0] if len(plans) == lag else None
            if old is None:
                ref = _planned_reference(prev, sc.control_period, st.dt, x_meas, sc.lam)
            else:
                ref = _planned_reference(old, lag * sc.control_period, st.dt, x_meas, sc.lam)
        else:
            q_ref, qdot_ref = subgoals(x_meas[:3], sc.goal, st.dt, 1)
            ref = TrackingReference(q_ref[0], qdot_ref[0], lam=sc.lam)
        s = composite_error(x_meas[:3], x_meas[3:6], ref)
        if sc.adaptive_enabled and tick > 0:
            qdot_r, qddot_r = reference_motion(x_meas[:3], x_meas[3:6], ref)
            Y = regressor(x_meas[:3], x_meas[3:6], qdot_r, qddot_r, sc.regressor_v_eps)
            est = adaptation_step(est, Y, s, sc.control_period)

        if done:
            u_cmd, iters, ms = np.zeros(2 * sc.n_agents), 0, 0.0
        else:
            t0 = time.perf_counter()
            u_cmd, prev = mpc_step(x_meas, est.psi, sc.goal, cfg, obstacles, prev,
                                   sc.control_period)
            ms = 1e3 * (time.perf_counter() - t0)
            iters = prev.stats.iterations
            plans.append(prev)
            if prev.stats.failed:
                log.failed = True
                log.message = prev.stats.message
        u_real, d_next = apply_agents(u_cmd, d, sc.limits, ca, sc.control_period)

        b_obj, b_rob = barrier_values(x_true, obstacles, sc.contacts)
        q_ref, qdot_ref = subgoals(x_meas[:3], sc.goal, st.dt, 1)
        h_clf, _, _ = clf_terms(x_meas, u_real, ca, est.psi, q_ref[0], qdot_ref[0], sc.lam,
                                sc.K_D, sc.nominal, cfg.v_eps)
        log.t.append(t)
        log.x.append(x_true)
        log.u.append(u_real)
        log.psi.append(est.psi.copy())
        log.b_obj.append(b_obj)
        log.b_robot.append(b_rob)
        log.h_clf.append(float(h_clf))
        log.lyapunov.append(0.5 * float(s @ nominal_h @ s))
        log.sqp_iters.append(iters)
        log.solve_ms.append(ms)
        log.obstacle_centers.append([o.center for o in obstacles])

        if done:
            log.success = held > hold_ticks
            break
        if not np.all(np.isfinite(u_cmd)):
            log.failed, log.message = True, "non-finite command"
            break

        # hold forces, slide contacts linearly within the tick
        n = sc.n_agents
        d_rate = u_real[n:]
        for _ in range(n_sub):
            xw = np.concatenate([plant_state, d])
            F, M, *_ = wrench_terms(xw, u_real, ca)
            plant_state = integrate(plant_state, F, float(M), sc.plant, sc.dt_sim)
            d = np.clip(d + sc.dt_sim * d_rate, ca.d_lower, ca.d_upper)
        d = d_next
        if not np.all(np.isfinite(plant_state)):
            log.failed, log.message = True, "plant state diverged"
            break
    return log


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Summary:
    success: bool
    failed: bool
    final_position_error: float
    final_heading_error: float
    time_to_goal: float | None
    path_length: float
    peak_force: float
    mean_solve_ms: float
    min_object_barrier: tuple[float, ...]
    min_robot_barrier: tuple[tuple[float, ...], ...]
    side_of_diagonal: float
    duration: float

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "failed": self.failed,
            "final_position_error": self.final_position_error,
            "final_heading_error": self.final_heading_error,
            "time_to_goal": self.time_to_goal,
            "path_length": self.path_length,
            "peak_force": self.peak_force,
            "mean_solve_ms": self.mean_solve_ms,
            "min_object_barrier": list(self.min_object_barrier),
            "min_robot_barrier": [list(r) for r in self.min_robot_barrier],
            "side_of_diagonal": self.side_of_diagonal,
            "duration": self.duration,
        }


def metrics(log: TrajectoryLog, goal: Goal, position_tol: float = 0.1,
            heading_tol: float = 0.1) -> Summary:
    if len(log) == 0:
        raise ValueError("empty trajectory log")
    a = log.arrays()
    x, t = a["x"], a["t"]
    n = log.n_agents
    pos_err = np.hypot(x[:, 0] - goal.position[0], x[:, 1] - goal.position[1])
    head_err = np.abs([heading_error(th, goal) for th in x[:, 2]])
    inside = (pos_err < position_tol) & (head_err < heading_tol)
    # start of the final stretch spent inside the goal region
    if log.success and inside[-1]:
        k = len(inside) - 1
        while k > 0 and inside[k - 1]:
            k -= 1
        reached = float(t[k])
    else:
        reached = None
    solve = a["solve_ms"][a["sqp_iters"] > 0]
    return Summary(
        success=bool(log.success),
        failed=bool(log.failed),
        final_position_error=float(pos_err[-1]),
        final_heading_error=float(head_err[-1]),
        time_to_goal=reached,
        path_length=float(np.sum(np.hypot(*np.diff(x[:, :2], axis=0).T))),
        peak_force=float(a["u"][:, :n].max(initial=0.0)),
        mean_solve_ms=float(solve.mean()) if solve.size else 0.0,
        min_object_barrier=tuple(float(v) for v in a["b_obj"].min(0)) if log.n_obstacles else (),
        min_robot_barrier=tuple(tuple(float(v) for v in row) for row in a["b_robot"].min(0))
        if log.n_obstacles else tuple(() for _ in range(n)),
        side_of_diagonal=float(np.mean((x[:, 1] - x[:, 0]) / math.sqrt(2.0))),
        duration=float(t[-1]),
    )
