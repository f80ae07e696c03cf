"""Stability and safety constraints, written as ``h(x, u) >= 0``.

Every constraint has a scalar public form and a batched ``*_terms`` form
that returns ``(h, dh/dx, dh/du)`` over a horizon for the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptive import TrackingReference
from .model import (
    DEFAULT_V_EPS,
    ContactArrays,
    ObjectParams,
    agent_offsets,
    agent_world_position,
    contact_arrays,
    dynamics_with_jacobians,
    friction_wrench,
    wrench_terms,
)

_DEGENERATE = 1e-9


@dataclass(frozen=True)
class Obstacle:
    """Circular obstacle, optionally following a piecewise-linear script.

    ``waypoints`` holds ``(t, x, y)`` rows; when given, ``center`` and
    ``velocity`` describe the obstacle at the current time (see
    :func:`safepush.sim.obstacle_update`).
    """

    center: tuple[float, float]
    radius_object: float
    radius_agent: float
    velocity: tuple[float, float] = (0.0, 0.0)
    waypoints: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if not self.radius_object > 0 or not self.radius_agent > 0:
            raise ValueError("barrier radii must be positive")
        times = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")

    def predicted(self, dt_ahead):
        """Constant-velocity centres at ``dt_ahead`` seconds, shape ``(..., 2)``."""
        t = np.asarray(dt_ahead, dtype=float)[..., None]
        return np.asarray(self.center) + t * np.asarray(self.velocity)


@dataclass(frozen=True)
class CbfGains:
    alpha_m: float = 4.0
    beta_m: float = 4.0
    alpha_r: float = 4.0

    def __post_init__(self):
        validate_ecbf_gains(self.alpha_m, self.beta_m)
        if not self.alpha_r > 0:
            raise ValueError("alpha_r must be positive")


def ecbf_roots(alpha: float, beta: float) -> np.ndarray:
    """Roots of ``s^2 + beta s + alpha``."""
    return np.roots([1.0, beta, alpha])


def validate_ecbf_gains(alpha: float, beta: float) -> None:
    if not alpha > 0:
        raise ValueError(f"ECBF alpha must be positive, got {alpha}")
    if beta * beta < 4.0 * alpha:
        raise ValueError(
            f"ECBF gains (alpha={alpha}, beta={beta}) give complex roots; need beta^2 >= 4 alpha")
    if not beta > 0:
        raise ValueError(f"ECBF beta must be positive, got {beta}")


@dataclass(frozen=True)
class PenaltyParams:
    rho: float
    eps: float

    def __post_init__(self):
        if not self.rho > 0 or not self.eps > 0:
            raise ValueError("penalty rho and eps must be positive")


@dataclass(frozen=True)
class Penalties:
    cbf: PenaltyParams = PenaltyParams(0.8, 0.5)
    clf: PenaltyParams = PenaltyParams(1.0, 0.5)
    bound: PenaltyParams = PenaltyParams(0.1, 0.01)


@dataclass(frozen=True)
class Limits:
    f_max: float = 40.0
    v_max: float = 1.0

    def __post_init__(self):
        if not self.f_max > 0 or not self.v_max > 0:
            raise ValueError("f_max and v_max must be positive")


def penalty(h, p: PenaltyParams):
    """Relaxed log barrier: ``(value, d/dh, d2/dh2)``, elementwise."""
    h = np.asarray(h, dtype=float)
    rho, eps = p.rho, p.eps
    log_side = h >= eps
    hs = np.where(log_side, h, eps)
    z = (h - 2.0 * eps) / eps
    value = np.where(log_side, -rho * np.log(hs), 0.5 * rho * (z * z - 1.0) - rho * np.log(eps))
    d1 = np.where(log_side, -rho / hs, rho * z / eps)
    d2 = np.where(log_side, rho / (hs * hs), rho / (eps * eps))
    return value, d1, d2


def _project_out(v, n):
    """``(I - n n^T) v`` for unit ``n``."""
    return v - n * np.sum(n * v, -1, keepdims=True)


def _unit(e):
    r = np.linalg.norm(e, axis=-1)
    if np.any(r <= _DEGENERATE):
        raise ValueError("barrier undefined: obstacle centre coincides with the tracked point")
    return r, e / r[..., None]


# ---------------------------------------------------------------- object barrier

def object_barrier(x, obs: Obstacle) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.linalg.norm(np.asarray(obs.center) - x[:2]) - obs.radius_object)


def object_ecbf_terms(x, xdot, A, B, center, velocity, radius, gains: CbfGains):
    """Degree-2 ECBF ``B'' + beta B' + alpha B`` with gradients.

    ``xdot, A, B`` are the planner dynamics and Jacobians at ``(x, u)``;
    pass ``A=None`` for the value only.
    """
    r, n = _unit(x[..., :2] - center)
    w = x[..., 3:5] - velocity
    a = xdot[..., 3:5]
    nw = np.sum(n * w, -1)
    g = np.sum(w * w, -1) - nw * nw
    alpha, beta = gains.alpha_m, gains.beta_m
    h = np.sum(n * a, -1) + g / r + beta * nw + alpha * (r - radius)
    if A is None:
        return h, None, None

    Pw = _project_out(w, n)
    Pa = _project_out(a, n)
    rr = r[..., None]
    dh_dx = np.einsum("...i,...ij->...j", n, A[..., 3:5, :])
    dh_dx[..., :2] += (Pa - 2.0 * nw[..., None] * Pw / rr - g[..., None] * n / rr) / rr \
        + beta * Pw / rr + alpha * n
    dh_dx[..., 3:5] += 2.0 * Pw / rr + beta * n
    dh_du = np.einsum("...i,...ij->...j", n, B[..., 3:5, :])
    return h, dh_dx, dh_du


def ecbf_object(x, u, psi, obs: Obstacle, gains: CbfGains, nominal: ObjectParams, contacts,
                v_eps: float = DEFAULT_V_EPS) -> float:
    ca = contact_arrays(contacts)
    x = np.asarray(x, dtype=float)
    xdot, A, B = dynamics_with_jacobians(x, np.asarray(u, dtype=float), psi, ca, nominal, v_eps)
    h, _, _ = object_ecbf_terms(x, xdot, A, B, np.asarray(obs.center, dtype=float),
                                np.asarray(obs.velocity, dtype=float), obs.radius_object, gains)
    return float(h)


# ---------------------------------------------------------------- agent barriers

def robot_barrier(x, i: int, obs: Obstacle, contacts) -> float:
    pos = agent_world_position(x, i, contacts)
    return float(np.linalg.norm(np.asarray(obs.center) - pos) - obs.radius_agent)


def robot_cbf_batch(x, u, ca: ContactArrays, centers, velocities, radii, alpha: float):
    """Degree-1 CBF ``B' + alpha B`` for every (obstacle, agent) pair.

    ``x (K, nx)``, ``u (K, nu)``, ``centers (J, K, 2)``, ``velocities (J, 2)``
    and ``radii (J,)``.  Returns ``h (K, J, N)`` and gradients
    ``(K, J, N, nx)``, ``(K, J, N, nu)``.
    """
    n_ag = ca.n
    K = x.shape[0]
    centers = np.asarray(centers, dtype=float)
    J = centers.shape[0]
    theta, omega = x[:, 2], x[:, 5]
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    rho = agent_offsets(x[:, 6:6 + n_ag], ca)                       # (K, N, 2)
    t = ca.tangent[None]                                            # (1, N, 2)
    Rrho = np.stack([c[..., 0] * rho[..., 0] - s[..., 0] * rho[..., 1],
                     s[..., 0] * rho[..., 0] + c[..., 0] * rho[..., 1]], -1)
    Rt = np.stack([c[..., 0] * t[..., 0] - s[..., 0] * t[..., 1],
                   s[..., 0] * t[..., 0] + c[..., 0] * t[..., 1]], -1)
    SRrho = np.stack([-Rrho[..., 1], Rrho[..., 0]], -1)
    SRt = np.stack([-Rt[..., 1], Rt[..., 0]], -1)
    d_dot = u[:, n_ag:, None]                                       # (K, N, 1)
    om = omega[:, None, None]

    vel_pt = x[:, None, 3:5] + om * SRrho + d_dot * Rt              # (K, N, 2)
    e = (x[:, None, None, :2] + Rrho[:, None]) - centers.transpose(1, 0, 2)[:, :, None]
    r, n = _unit(e)                                                 # (K, J, N)
    w = vel_pt[:, None] - np.asarray(velocities, dtype=float)[None, :, None]
    h = np.sum(n * w, -1) + alpha * (r - np.asarray(radii, dtype=float)[None, :, None])

    q = _project_out(w, n) / r[..., None]
    qa = q + alpha * n
    dA_dth = (-om * Rrho + d_dot * SRt)[:, None]
    dh_dx = np.zeros((K, J, n_ag, x.shape[-1]))
    dh_dx[..., :2] = qa
    dh_dx[..., 2] = np.sum(qa * SRrho[:, None] + n * dA_dth, -1)
    dh_dx[..., 3:5] = n
    dh_dx[..., 5] = np.sum(n * SRrho[:, None], -1)
    idx = np.arange(n_ag)
    dh_dx[..., idx, 6 + idx] = np.sum(qa * Rt[:, None] + om[:, None] * n * SRt[:, None], -1)
    dh_du = np.zeros((K, J, n_ag, u.shape[-1]))
    dh_du[..., idx, n_ag + idx] = np.sum(n * Rt[:, None], -1)
    return h, dh_dx, dh_du


def robot_cbf_terms(x, u, ca: ContactArrays, i: int, center, velocity, radius, alpha: float):
    """Degree-1 CBF for agent ``i`` and one obstacle; leading axes of ``x`` are kept."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    lead = x.shape[:-1]
    xf = x.reshape(-1, x.shape[-1])
    uf = u.reshape(-1, u.shape[-1])
    centers = np.broadcast_to(np.asarray(center, dtype=float), lead + (2,)).reshape(1, -1, 2)
    h, gx, gu = robot_cbf_batch(xf, uf, ca, centers, np.asarray(velocity, dtype=float)[None],
                                np.array([radius], dtype=float), alpha)
    return (h[:, 0, i].reshape(lead), gx[:, 0, i].reshape(lead + (x.shape[-1],)),
            gu[:, 0, i].reshape(lead + (u.shape[-1],)))


def cbf_robot(x, u, i: int, obs: Obstacle, gains: CbfGains, contacts) -> float:
    ca = contact_arrays(contacts)
    if not 0 <= i < ca.n:
        raise IndexError(f"agent index {i} out of range for {ca.n} agents")
    h, _, _ = robot_cbf_terms(np.asarray(x, dtype=float), np.asarray(u, dtype=float), ca, i,
                              np.asarray(obs.center, dtype=float),
                              np.asarray(obs.velocity, dtype=float), obs.radius_agent,
                              gains.alpha_r)
    return float(h)


# ---------------------------------------------------------------- CLF

def clf_terms(x, u, ca: ContactArrays, psi, q_ref, qdot_ref, lam: float, K_D,
              nominal: ObjectParams, v_eps: float = DEFAULT_V_EPS):
    """``h = s^T(-tau + H_bar qdd_r + Y_r psi) - s^T K_D s / 2`` with gradients.

    The reference acceleration is zero (piecewise-linear subgoals) and the
    nominal Coriolis term vanishes because the nominal COM is at ``p``.
    """
    n_ag = ca.n
    psi = np.asarray(psi, dtype=float)
    K_D = np.asarray(K_D, dtype=float)
    F, M, dF_dth, dM_dd, Rn, arm = wrench_terms(x, u, ca)
    tau = np.concatenate([F, M[..., None]], -1)
    v_err = x[..., 3:6] - qdot_ref
    s = v_err + lam * (x[..., :3] - q_ref)
    qdd_r = -lam * v_err
    m_eff = np.array([nominal.mass + psi[0], nominal.mass + psi[0], nominal.inertia + psi[1]])
    fric, dfric = friction_wrench(x[..., 3:6], psi, v_eps)
    g = -tau + m_eff * qdd_r + fric
    Ks = s @ K_D.T
    h = np.sum(s * (g - 0.5 * Ks), -1)

    gk = g - Ks
    dh_dx = np.zeros(x.shape)
    dh_dx[..., :3] = lam * gk
    dh_dx[..., 2] -= np.sum(s[..., :2] * dF_dth, -1)
    dh_dx[..., 3:6] = gk + np.einsum("...i,...ij->...j", s, dfric) - lam * m_eff * s
    dh_dx[..., 6:6 + n_ag] = -s[..., 2:3] * dM_dd
    dh_du = np.zeros(u.shape)
    dh_du[..., :n_ag] = -(np.einsum("...i,...in->...n", s[..., :2], Rn) + s[..., 2:3] * arm)
    return h, dh_dx, dh_du


def clf_constraint(x, u, psi, ref: TrackingReference, K_D, nominal: ObjectParams, contacts,
                   v_eps: float = DEFAULT_V_EPS) -> float:
    ca = contact_arrays(contacts)
    h, _, _ = clf_terms(np.asarray(x, dtype=float), np.asarray(u, dtype=float), ca, psi,
                        np.asarray(ref.q_d, dtype=float), np.asarray(ref.qdot_d, dtype=float),
                        ref.lam, K_D, nominal, v_eps)
    return float(h)


# ---------------------------------------------------------------- bounds

def bound_terms(x, u, ca: ContactArrays, limits: Limits):
    """Per agent ``[f, F_max - f, d - d_lo, d_hi - d, v_max - dd, v_max + dd]``.

    Returns ``h (..., 6N)`` and constant gradients ``(6N, nx)``, ``(6N, nu)``.
    """
    n = ca.n
    f = u[..., :n]
    dd = u[..., n:]
    d = x[..., 6:6 + n]
    h = np.stack([f, limits.f_max - f, d - ca.d_lower, ca.d_upper - d,
                  limits.v_max - dd, limits.v_max + dd], -1)
    h = h.reshape(h.shape[:-2] + (6 * n,))
    gx = np.zeros((n, 6, x.shape[-1]))
    gu = np.zeros((n, 6, u.shape[-1]))
    idx = np.arange(n)
    gu[idx, 0, idx] = 1.0
    gu[idx, 1, idx] = -1.0
    gx[idx, 2, 6 + idx] = 1.0
    gx[idx, 3, 6 + idx] = -1.0
    gu[idx, 4, n + idx] = -1.0
    gu[idx, 5, n + idx] = 1.0
    return h, gx.reshape(6 * n, -1), gu.reshape(6 * n, -1)


def bound_constraints(x, u, limits: Limits, contacts) -> np.ndarray:
    h, _, _ = bound_terms(np.asarray(x, dtype=float), np.asarray(u, dtype=float),
                          contact_arrays(contacts), limits)
    return h
