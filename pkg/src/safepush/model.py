"""Planar rigid-body model of the pushed object.

Configuration is ``q = (x_p, y_p, theta)`` for a body-fixed reference point
``p``.  Planner state is ``x = (q, qdot, d_1..d_N)`` and planner input is
``u = (f_1..f_N, ddot_1..ddot_N)``: one normal force magnitude and one
tangential slide rate per agent.

All vector functions broadcast over leading axes, so a whole horizon can be
evaluated in one call with ``x`` of shape ``(K, nx)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# +90 degree rotation; R(theta) @ S == S @ R(theta) and dR/dtheta == R @ S
S = np.array([[0.0, -1.0], [1.0, 0.0]])

DEFAULT_V_EPS = 0.01
MIN_MASS_FRACTION = 0.1


def cross2(a, b):
    """Scalar 2D cross product a_x b_y - a_y b_x (broadcasts)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def rotation2(theta):
    """Body-to-world rotation; shape ``(..., 2, 2)`` for array input."""
    c = np.cos(theta)
    s = np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def state_dim(n_agents: int) -> int:
    return 6 + n_agents


def input_dim(n_agents: int) -> int:
    return 2 * n_agents


@dataclass(frozen=True)
class ObjectParams:
    """Inertial parameters of the object.

    ``com_offset`` is the body-frame position of the reference point ``p``
    relative to the centre of mass, so the COM sits at ``x_p - R(theta) r_p``.
    The rectangular footprint is centred on ``p``.
    """

    mass: float
    inertia: float
    com_offset: tuple[float, float] = (0.0, 0.0)
    half_extents: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not self.inertia > 0:
            raise ValueError(f"inertia must be positive, got {self.inertia}")
        if min(self.half_extents) <= 0:
            raise ValueError("half_extents must be positive")
        if np.hypot(*self.com_offset) >= min(self.half_extents):
            raise ValueError("com_offset must lie inside the footprint")

    @property
    def r_p(self) -> np.ndarray:
        return np.asarray(self.com_offset, dtype=float)

    @property
    def circumradius(self) -> float:
        return float(np.hypot(*self.half_extents))


@dataclass(frozen=True)
class ContactConfig:
    """One agent's contact frame on a flat face, all vectors in body frame."""

    origin: tuple[float, float]
    normal: tuple[float, float]
    tangent: tuple[float, float]
    d_lower: float
    d_upper: float
    standoff: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        t = np.asarray(self.tangent, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12 or abs(np.linalg.norm(t) - 1.0) > 1e-12:
            raise ValueError("contact normal and tangent must be unit vectors")
        if abs(n @ t) > 1e-12:
            raise ValueError("contact normal and tangent must be orthogonal")
        if self.d_lower > self.d_upper:
            raise ValueError("d_lower must not exceed d_upper")
        if not self.standoff > 0:
            raise ValueError("standoff must be positive")

    @classmethod
    def on_face(cls, params: ObjectParams, face: str, offset: float = 0.0,
                standoff: float = 0.35, margin: float = 0.05) -> "ContactConfig":
        """Contact on one face of the rectangular footprint.

        ``face`` is one of ``-x``, ``+x``, ``-y``, ``+y`` (the face whose
        outward normal is that axis); ``offset`` is the starting position
        along the face.  Slide bounds keep the contact ``margin`` away from
        the corners.
        """
        hx, hy = params.half_extents
        # footprint is centred on p; only the COM location is uncertain
        if face == "-x":
            origin, normal, tangent, half = (-hx, offset), (1.0, 0.0), (0.0, 1.0), hy
        elif face == "+x":
            origin, normal, tangent, half = (hx, offset), (-1.0, 0.0), (0.0, 1.0), hy
        elif face == "-y":
            origin, normal, tangent, half = (offset, -hy), (0.0, 1.0), (1.0, 0.0), hx
        elif face == "+y":
            origin, normal, tangent, half = (offset, hy), (0.0, -1.0), (1.0, 0.0), hx
        else:
            raise ValueError(f"unknown face {face!r}")
        return cls(origin=tuple(map(float, origin)), normal=normal, tangent=tangent,
                   d_lower=-half + margin - offset, d_upper=half - margin - offset,
                   standoff=standoff)


class ContactArrays(NamedTuple):
    """Contacts stacked into arrays of shape ``(N, 2)`` / ``(N,)``."""

    origin: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    d_lower: np.ndarray
    d_upper: np.ndarray
    standoff: np.ndarray

    @property
    def n(self) -> int:
        return self.origin.shape[0]


def contact_arrays(contacts) -> ContactArrays:
    if isinstance(contacts, ContactArrays):
        return contacts
    contacts = list(contacts)
    if not contacts:
        raise ValueError("at least one contact is required")
    return ContactArrays(
        origin=np.array([c.origin for c in contacts], dtype=float),
        normal=np.array([c.normal for c in contacts], dtype=float),
        tangent=np.array([c.tangent for c in contacts], dtype=float),
        d_lower=np.array([c.d_lower for c in contacts], dtype=float),
        d_upper=np.array([c.d_upper for c in contacts], dtype=float),
        standoff=np.array([c.standoff for c in contacts], dtype=float),
    )


@dataclass
class ObjectState:
    q: np.ndarray = field(default_factory=lambda: np.zeros(3))
    qdot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(3)
        self.qdot = np.asarray(self.qdot, dtype=float).reshape(3)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])


@dataclass
class PlannerState:
    object: ObjectState
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float).reshape(-1)

    def __array__(self, dtype=None, copy=None):
        return np.concatenate([self.object.to_vector(), self.d]).astype(dtype or float)

    @classmethod
    def from_vector(cls, x) -> "PlannerState":
        x = np.asarray(x, dtype=float)
        return cls(ObjectState(x[:3], x[3:6]), x[6:])


@dataclass
class PlannerInput:
    forces: np.ndarray
    d_dot: np.ndarray

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=float).reshape(-1)
        self.d_dot = np.asarray(self.d_dot, dtype=float).reshape(-1)
        if self.forces.shape != self.d_dot.shape:
            raise ValueError("forces and d_dot must have the same length")

    def __array__(self, dtype=None, copy=None):
        return np.concatenate([self.forces, self.d_dot]).astype(dtype or float)

    @classmethod
    def from_vector(cls, u) -> "PlannerInput":
        u = np.asarray(u, dtype=float)
        n = u.shape[-1] // 2
        return cls(u[:n], u[n:])


class Wrench(NamedTuple):
    force: np.ndarray  # world frame
    moment: float | np.ndarray  # about p


def mass_matrix(params: ObjectParams, theta: float) -> np.ndarray:
    m = params.mass
    c = rotation2(theta) @ params.r_p
    off = -m * (S @ c)
    H = np.diag([m, m, params.inertia])
    H[:2, 2] = off
    H[2, :2] = off
    return H


def coriolis_matrix(params: ObjectParams, theta: float, theta_dot: float) -> np.ndarray:
    C = np.zeros((3, 3))
    C[:2, 2] = params.mass * theta_dot * (rotation2(theta) @ params.r_p)
    return C


def contact_points(d, ca: ContactArrays):
    """Body-frame contact points relative to p, shape ``(..., N, 2)``."""
    return ca.origin + d[..., :, None] * ca.tangent


def wrench_terms(x, u, ca: ContactArrays):
    """World force, moment about p and their partials.

    Returns ``F (...,2), M (...), dF_dtheta (...,2), dM_dd (...,N),
    dF_df (...,2,N), dM_df (...,N)``.
    """
    n = ca.n
    theta = x[..., 2]
    d = x[..., 6:6 + n]
    f = u[..., :n]
    R = rotation2(theta)
    Rn = np.einsum("...ij,nj->...in", R, ca.normal)  # (...,2,N)
    F = np.einsum("...in,...n->...i", Rn, f)
    r = contact_points(d, ca)
    arm = cross2(r, ca.normal)  # (...,N)
    M = np.einsum("...n,...n->...", arm, f)
    dF_dtheta = np.stack([-F[..., 1], F[..., 0]], -1)
    dM_dd = f * cross2(ca.tangent, ca.normal)
    return F, M, dF_dtheta, dM_dd, Rn, arm


def wrench_from_inputs(x, u, contacts) -> Wrench:
    ca = contact_arrays(contacts)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    F, M, *_ = wrench_terms(x, u, ca)
    return Wrench(F, M)


def agent_offsets(d, ca: ContactArrays):
    """Body-frame agent centres relative to p, shape ``(..., N, 2)``."""
    return contact_points(d, ca) - ca.standoff[:, None] * ca.normal


def agent_world_position(x, i: int, contacts) -> np.ndarray:
    ca = contact_arrays(contacts)
    if not 0 <= i < ca.n:
        raise IndexError(f"agent index {i} out of range for {ca.n} agents")
    x = np.asarray(x, dtype=float)
    rho = agent_offsets(x[..., 6:6 + ca.n], ca)[..., i, :]
    return x[..., :2] + np.einsum("...ij,...j->...i", rotation2(x[..., 2]), rho)


def smooth_sign(v, v_eps: float = DEFAULT_V_EPS):
    return np.tanh(np.asarray(v, dtype=float) / v_eps)


def smooth_sign_grad(v, v_eps: float = DEFAULT_V_EPS):
    t = np.tanh(np.asarray(v, dtype=float) / v_eps)
    return (1.0 - t * t) / v_eps


def isotropic_gain(speed, v_eps: float = DEFAULT_V_EPS):
    """``g(s) = tanh(s / v_eps) / s`` and ``g'(s) / s``, both smooth at ``s = 0``.

    ``g(|v|) v`` is the smoothed unit vector ``v / |v|``.
    """
    a = np.asarray(speed, dtype=float) / v_eps
    small = a < 1e-2
    a2 = a * a
    a_safe = np.where(small, 1.0, a)
    t = np.tanh(a_safe)
    h = np.where(small, 1.0 - a2 / 3.0 + 2.0 * a2 * a2 / 15.0, t / a_safe)
    dh_over_a = np.where(small, -2.0 / 3.0 + 8.0 * a2 / 15.0 - 34.0 * a2 * a2 / 105.0,
                         (a_safe * (1.0 - t * t) - t) / a_safe ** 3)
    return h / v_eps, dh_over_a / v_eps ** 3


def regressor(q, qdot, qdot_r, qddot_r, v_eps: float = DEFAULT_V_EPS) -> np.ndarray:
    """Uncertainty regressor ``Y`` with ``Y @ psi`` the unmodelled wrench.

    Parameters are ``psi = (mass error, inertia error, translational
    friction, rotational friction)``.  ``q`` and ``qdot_r`` are accepted for
    signature completeness; with the COM-at-p nominal model they drop out.
    """
    if v_eps <= 0:
        raise ValueError("v_eps must be positive")
    qdot = np.asarray(qdot, dtype=float)
    qddot_r = np.asarray(qddot_r, dtype=float)
    gain, _ = isotropic_gain(np.linalg.norm(qdot[..., :2], axis=-1), v_eps)
    Y = np.zeros(qdot.shape[:-1] + (3, 4))
    Y[..., 0, 0] = qddot_r[..., 0]
    Y[..., 1, 0] = qddot_r[..., 1]
    Y[..., 2, 1] = qddot_r[..., 2]
    Y[..., :2, 2] = gain[..., None] * qdot[..., :2]
    Y[..., 2, 3] = smooth_sign(qdot[..., 2], v_eps)
    return Y


def effective_inertia(nominal: ObjectParams, psi) -> np.ndarray:
    """Diagonal of ``H_bar + H_tilde(psi)``, floored to stay positive."""
    psi = np.asarray(psi, dtype=float)
    m = max(nominal.mass + psi[0], MIN_MASS_FRACTION * nominal.mass)
    inertia = max(nominal.inertia + psi[1], MIN_MASS_FRACTION * nominal.inertia)
    return np.array([m, m, inertia])


def _check_nominal(nominal: ObjectParams):
    if nominal.com_offset[0] != 0.0 or nominal.com_offset[1] != 0.0:
        raise ValueError("planner nominal model requires com_offset == (0, 0)")


def friction_wrench(qdot, psi, v_eps: float = DEFAULT_V_EPS):
    """Modelled friction ``(c_t sig(|v|) v/|v|, c_r sig(w))`` and its Jacobian ``(..., 3, 3)``."""
    psi = np.asarray(psi, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    v = qdot[..., :2]
    gain, slope = isotropic_gain(np.linalg.norm(v, axis=-1), v_eps)
    fric = np.empty(qdot.shape)
    fric[..., :2] = psi[2] * gain[..., None] * v
    fric[..., 2] = psi[3] * smooth_sign(qdot[..., 2], v_eps)
    J = np.zeros(qdot.shape + (3,))
    J[..., :2, :2] = psi[2] * (gain[..., None, None] * np.eye(2)
                               + slope[..., None, None] * v[..., :, None] * v[..., None, :])
    J[..., 2, 2] = psi[3] * smooth_sign_grad(qdot[..., 2], v_eps)
    return fric, J


def dynamics(x, u, psi, contacts, nominal: ObjectParams, v_eps: float = DEFAULT_V_EPS):
    """Adaptive planner dynamics ``xdot = f(x, psi) + g(x) u``.

    The mass and inertia columns of the regressor multiply the realised
    acceleration, so they are moved to the left-hand side and solved with
    the diagonal nominal inertia; friction columns enter as a wrench.
    """
    _check_nominal(nominal)
    ca = contact_arrays(contacts)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = ca.n
    F, M, *_ = wrench_terms(x, u, ca)
    tau = np.concatenate([F, M[..., None]], -1)
    fric, _ = friction_wrench(x[..., 3:6], psi, v_eps)
    qdd = (tau - fric) / effective_inertia(nominal, psi)
    return np.concatenate([x[..., 3:6], qdd, u[..., n:2 * n]], -1)


def dynamics_with_jacobians(x, u, psi, ca: ContactArrays, nominal: ObjectParams,
                            v_eps: float = DEFAULT_V_EPS):
    """``(xdot, A, B)`` with ``A = dxdot/dx`` and ``B = dxdot/du``, batched."""
    _check_nominal(nominal)
    n = ca.n
    nx, nu = 6 + n, 2 * n
    batch = x.shape[:-1]
    F, M, dF_dth, dM_dd, Rn, arm = wrench_terms(x, u, ca)
    tau = np.concatenate([F, M[..., None]], -1)
    fric, dfric = friction_wrench(x[..., 3:6], psi, v_eps)
    inv = 1.0 / effective_inertia(nominal, psi)
    xdot = np.concatenate([x[..., 3:6], (tau - fric) * inv, u[..., n:]], -1)

    A = np.zeros(batch + (nx, nx))
    A[..., 0, 3] = A[..., 1, 4] = A[..., 2, 5] = 1.0
    A[..., 3:5, 2] = dF_dth * inv[0]
    A[..., 3:6, 3:6] = -dfric * inv[:, None]
    A[..., 5, 6:] = dM_dd * inv[2]

    B = np.zeros(batch + (nx, nu))
    B[..., 3:5, :n] = Rn * inv[0]
    B[..., 5, :n] = arm * inv[2]
    B[..., 6:, n:] = np.eye(n)
    return xdot, A, B


def dynamics_jacobians(x, u, psi, contacts, nominal: ObjectParams,
                       v_eps: float = DEFAULT_V_EPS):
    ca = contact_arrays(contacts)
    _, A, B = dynamics_with_jacobians(np.asarray(x, dtype=float), np.asarray(u, dtype=float),
                                      psi, ca, nominal, v_eps)
    return A, B
