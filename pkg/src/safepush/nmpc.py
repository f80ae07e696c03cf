"""Horizon transcription of the adaptive optimal control problem and its SQP solver.

Decision vector is ``z = [x_0 .. x_N, u_0 .. u_{N-1}]``.  The only equality
constraints are the initial condition and the discretized dynamics; every
inequality (bounds, CLF, CBFs) is folded into the cost as a relaxed barrier.
Each SQP iteration solves one equality-constrained QP through its sparse KKT
system, using a Gauss-Newton Hessian for the barrier terms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla

from .model import (
    DEFAULT_V_EPS,
    ContactConfig,
    ObjectParams,
    contact_arrays,
    dynamics,
    dynamics_with_jacobians,
    effective_inertia,
    friction_wrench,
)
from .reference import Goal, subgoals
from .safety import (
    CbfGains,
    Limits,
    Obstacle,
    Penalties,
    bound_terms,
    clf_terms,
    object_ecbf_terms,
    robot_cbf_batch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OcpWeights:
    """Quadratic weights; state blocks ordered ``(x, y, theta, vx, vy, wz)``."""

    Q_f: np.ndarray
    Q_xb: np.ndarray
    Q_d: np.ndarray
    R_u: np.ndarray

    def __post_init__(self):
        for name in ("Q_f", "Q_xb", "Q_d", "R_u"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be a symmetric square matrix")
            eig_min = np.linalg.eigvalsh(M).min()
            if eig_min < 0 or (name == "R_u" and eig_min <= 0):
                raise ValueError(f"{name} must be {'positive' if name == 'R_u' else 'semi'}definite")
            object.__setattr__(self, name, M)
        if self.Q_f.shape != (6, 6) or self.Q_xb.shape != (6, 6):
            raise ValueError("Q_f and Q_xb must be 6x6")
        if self.R_u.shape[0] != 2 * self.Q_d.shape[0]:
            raise ValueError("R_u must be 2N x 2N for N x N Q_d")

    @classmethod
    def default(cls, n_agents: int) -> "OcpWeights":
        return cls(
            Q_f=np.diag([150.0, 150.0, 3.0, 3.0, 3.0, 8.0]),
            Q_xb=np.diag([20.0, 22.0, 100.0, 3.0, 3.0, 50.0]),
            Q_d=np.eye(n_agents) * 0.1,
            R_u=np.diag([1e-4] * n_agents + [0.01] * n_agents),
        )

    @property
    def largest(self) -> float:
        return float(max(np.abs(M).max() for M in (self.Q_f, self.Q_xb, self.Q_d, self.R_u)))


@dataclass(frozen=True)
class SolverSettings:
    horizon_steps: int = 50
    dt: float = 0.1
    max_sqp_iters: int = 3
    kkt_regularization: float = 1e-8
    max_regularization: float = 1e-2
    merit_penalty_weight: float | None = None
    ls_shrink: float = 0.5
    ls_max_trials: int = 10
    step_tol: float = 1e-6

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if not self.dt > 0 or not self.max_sqp_iters >= 1:
            raise ValueError("dt must be positive and max_sqp_iters >= 1")
        if not 0 < self.ls_shrink < 1 or self.ls_max_trials < 1:
            raise ValueError("invalid line-search settings")
        if not self.kkt_regularization > 0 or not self.step_tol > 0:
            raise ValueError("regularization and tolerance must be positive")


@dataclass
class SolveStats:
    iterations: int = 0
    merit: list[float] = field(default_factory=list)
    kkt_residual: float = 0.0
    converged: bool = False
    failed: bool = False
    message: str = ""


@dataclass
class HorizonSolution:
    X: np.ndarray
    U: np.ndarray
    stats: SolveStats = field(default_factory=SolveStats)


@dataclass(frozen=True)
class PlannerConfig:
    nominal: ObjectParams
    contacts: tuple[ContactConfig, ...]
    limits: Limits = Limits()
    weights: OcpWeights | None = None
    penalties: Penalties = Penalties()
    gains: CbfGains = CbfGains()
    lam: float = 3.0
    K_D: np.ndarray = field(default_factory=lambda: 3.0 * np.eye(3))
    settings: SolverSettings = SolverSettings()
    robot_cbf_enabled: bool = True
    implicit_friction: bool = True
    v_eps: float = DEFAULT_V_EPS

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(self.contacts))
        if not self.contacts:
            raise ValueError("at least one agent is required")
        if self.weights is None:
            object.__setattr__(self, "weights", OcpWeights.default(len(self.contacts)))
        if self.weights.Q_d.shape[0] != len(self.contacts):
            raise ValueError("weight dimensions do not match the number of agents")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    @property
    def n_agents(self) -> int:
        return len(self.contacts)


def rk2_step(x, u, psi, ca, nominal, dt, v_eps=DEFAULT_V_EPS, jacobians=False):
    """Explicit-midpoint step of the planner dynamics with the input held.

    With ``jacobians`` returns ``(x_next, A_d, B_d, f(x, u), A, B)`` where the
    last three are the continuous dynamics at the start point.
    """
    if not jacobians:
        k1 = dynamics(x, u, psi, ca, nominal, v_eps)
        k2 = dynamics(x + 0.5 * dt * k1, u, psi, ca, nominal, v_eps)
        return x + dt * k2
    k1, A1, B1 = dynamics_with_jacobians(x, u, psi, ca, nominal, v_eps)
    k2, A2, B2 = dynamics_with_jacobians(x + 0.5 * dt * k1, u, psi, ca, nominal, v_eps)
    eye = np.eye(x.shape[-1])
    Ad = eye + dt * (A2 + 0.5 * dt * A2 @ A1)
    Bd = dt * (B2 + 0.5 * dt * A2 @ B1)
    return x + dt * k2, Ad, Bd, k1, A1, B1


def _frictionless(psi):
    psi = np.array(psi, dtype=float)
    psi[2:] = 0.0
    return psi


def friction_impulse(v_next, psi, nominal, dt, v_eps=DEFAULT_V_EPS):
    """State correction from friction evaluated at the end-of-step velocity.

    Returns ``(corr, dcorr)``: ``corr (..., 6)`` is added to the frictionless
    step (velocity change plus its trapezoidal effect on the pose) and
    ``dcorr (..., 3, 3)`` is the Jacobian of the velocity change with respect
    to ``v_next``.
    """
    fric, dfric = friction_wrench(v_next, psi, v_eps)
    inv = dt / effective_inertia(nominal, psi)
    dv = -inv * fric
    return np.concatenate([0.5 * dt * dv, dv], -1), -inv[:, None] * dfric


def _shrink_speed(r, k, v_eps, iters: int = 50):
    """Root ``s`` in ``[0, r]`` of ``s + k tanh(s / v_eps) = r`` (safeguarded Newton)."""
    lo, hi = np.zeros_like(r), np.array(r, dtype=float)
    s = hi.copy()
    for _ in range(iters):
        t = np.tanh(s / v_eps)
        res = s + k * t - r
        lo = np.where(res < 0, s, lo)
        hi = np.where(res > 0, s, hi)
        s_new = s - res / (1.0 + k * (1.0 - t * t) / v_eps)
        s_new = np.where((s_new <= lo) | (s_new >= hi), 0.5 * (lo + hi), s_new)
        done = np.all(np.abs(s_new - s) <= 1e-15 * (1.0 + np.abs(r)))
        s = s_new
        if done:
            break
    return s


def implicit_step(x, u, psi, ca, nominal, dt, v_eps=DEFAULT_V_EPS):
    """Midpoint step of the frictionless dynamics with backward-Euler friction.

    The friction wrench is evaluated at the new velocity, so the step stays
    stable for any friction stiffness and a pushed object below breakaway
    creeps instead of oscillating.  Friction only shrinks the frictionless
    velocity along its own direction, so each of the translational and
    rotational parts reduces to a monotone scalar equation for the speed.
    """
    x = np.asarray(x, dtype=float)
    psi = np.asarray(psi, dtype=float)
    free = rk2_step(x, u, _frictionless(psi), ca, nominal, dt, v_eps)
    k = dt * np.array([psi[2], psi[3]]) / effective_inertia(nominal, psi)[1:]
    v_free = free[..., 3:5]
    r = np.linalg.norm(v_free, axis=-1)
    s = _shrink_speed(r, k[0], v_eps)
    v = v_free * np.where(r > 0, s / np.where(r > 0, r, 1.0), 0.0)[..., None]
    w_free = free[..., 5]
    w = np.sign(w_free) * _shrink_speed(np.abs(w_free), k[1], v_eps)
    out = free.copy()
    out[..., :3] += 0.5 * dt * (np.concatenate([v, w[..., None]], -1) - free[..., 3:6])
    out[..., 3:5] = v
    out[..., 5] = w
    return out


def step_dynamics(x, u, psi, dt: float, contacts, nominal: ObjectParams,
                  v_eps: float = DEFAULT_V_EPS) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    return rk2_step(np.asarray(x, dtype=float), np.asarray(u, dtype=float), psi,
                    contact_arrays(contacts), nominal, dt, v_eps)


class HorizonNLP:
    """Cost, dynamics defects and their derivatives for one planning problem."""

    def __init__(self, config: PlannerConfig, x0, psi, q_ref, qdot_ref, d_ref,
                 obstacles: Sequence[Obstacle] = ()):
        st = config.settings
        self.config = config
        self.ca = contact_arrays(config.contacts)
        self.N = st.horizon_steps
        self.dt = st.dt
        self.n_ag = self.ca.n
        self.nx = 6 + self.n_ag
        self.nu = 2 * self.n_ag
        self.x0 = np.asarray(x0, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        xb_ref = np.concatenate([np.asarray(q_ref, float), np.asarray(qdot_ref, float)], -1)
        self.d_ref = np.asarray(d_ref, dtype=float)
        if xb_ref.shape != (self.N + 1, 6) or self.d_ref.shape != (self.N + 1, self.n_ag):
            raise ValueError("reference lengths must equal horizon_steps + 1")
        if self.x0.shape != (self.nx,):
            raise ValueError(f"initial state must have length {self.nx}")
        self.xb_ref = xb_ref
        # with implicit friction the explicit step carries no friction at all
        self.psi_step = _frictionless(self.psi) if config.implicit_friction else self.psi
        self.obstacles = tuple(obstacles)
        t = self.dt * np.arange(self.N)
        self.obs_centers = [o.predicted(t) for o in self.obstacles]
        if self.obstacles:
            self._centers_all = np.stack(self.obs_centers)
            self._vel_all = np.array([o.velocity for o in self.obstacles], dtype=float)
            self._rad_agent = np.array([o.radius_agent for o in self.obstacles], dtype=float)
        self._build_constraint_params()
        self._build_sparsity()

    # ------------------------------------------------------------- layout
    @property
    def n_var(self) -> int:
        return (self.N + 1) * self.nx + self.N * self.nu

    def unpack(self, z):
        nX = (self.N + 1) * self.nx
        return z[:nX].reshape(self.N + 1, self.nx), z[nX:].reshape(self.N, self.nu)

    @staticmethod
    def pack(X, U):
        return np.concatenate([np.ravel(X), np.ravel(U)])

    def _build_constraint_params(self):
        pen = self.config.penalties
        cls = [pen.bound] * (6 * self.n_ag) + [pen.clf]
        cls += [pen.cbf] * len(self.obstacles)
        if self.config.robot_cbf_enabled:
            cls += [pen.cbf] * (len(self.obstacles) * self.n_ag)
        self.rho = np.array([p.rho for p in cls])
        self.eps = np.array([p.eps for p in cls])

    def _build_sparsity(self):
        N, nx, nu = self.N, self.nx, self.nu
        nz = nx + nu
        nX = (N + 1) * nx
        k = np.arange(N)
        stage_idx = np.concatenate([k[:, None] * nx + np.arange(nx),
                                    nX + k[:, None] * nu + np.arange(nu)], 1)  # (N, nz)
        term_idx = N * nx + np.arange(nx)
        hr = np.concatenate([np.broadcast_to(stage_idx[:, :, None], (N, nz, nz)).ravel(),
                             np.repeat(term_idx, nx)])
        hc = np.concatenate([np.broadcast_to(stage_idx[:, None, :], (N, nz, nz)).ravel(),
                             np.tile(term_idx, nx)])
        # equality rows: c_0 = x_0 - x0_meas, c_{k+1} = x_{k+1} - Phi(x_k, u_k) - corr(x_{k+1});
        # D_k = dc_k/dx_k is a full block (identity plus the friction slope)
        kk_all = np.arange(N + 1)
        eye_r = np.broadcast_to(kk_all[:, None, None] * nx + np.arange(nx)[None, :, None],
                                (N + 1, nx, nx)).ravel()
        eye_c = np.broadcast_to(kk_all[:, None, None] * nx + np.arange(nx)[None, None, :],
                                (N + 1, nx, nx)).ravel()
        rows_k = (k[:, None, None] + 1) * nx + np.arange(nx)[None, :, None]
        ax_r = np.broadcast_to(rows_k, (N, nx, nx)).ravel()
        ax_c = np.broadcast_to(k[:, None, None] * nx + np.arange(nx)[None, None, :], (N, nx, nx)).ravel()
        bu_r = np.broadcast_to(rows_k, (N, nx, nu)).ravel()
        bu_c = np.broadcast_to(nX + k[:, None, None] * nu + np.arange(nu)[None, None, :],
                               (N, nx, nu)).ravel()
        jr = np.concatenate([eye_r, ax_r, bu_r])
        jc = np.concatenate([eye_c, ax_c, bu_c])
        n = self.n_var
        m = (N + 1) * nx
        diag = np.arange(n + m)
        self._kkt_rows = np.concatenate([hr, jr + n, jc, diag])
        self._kkt_cols = np.concatenate([hc, jc, jr + n, diag])
        self._n_h = hr.size
        self._n_j = jr.size

        # stage-interleaved ordering (lambda_k, x_k, u_k) makes the KKT matrix banded
        order = []
        for kk in range(N + 1):
            order.append(n + kk * nx + np.arange(nx))
            order.append(kk * nx + np.arange(nx))
            if kk < N:
                order.append(nX + kk * nu + np.arange(nu))
        self._perm = np.concatenate(order)
        pos = np.empty_like(self._perm)
        pos[self._perm] = np.arange(self._perm.size)
        nnz = self._kkt_rows.size - diag.size
        pi, pj = pos[self._kkt_rows[:nnz]], pos[self._kkt_cols[:nnz]]
        self._band = (int((pi - pj).max()), int((pj - pi).max()))
        lo, up = self._band
        width = n + m
        self._band_flat = (up + pi - pj) * width + pj
        self._band_diag = up * width + np.arange(width)

    # ------------------------------------------------------------- evaluation
    def stage_constraints(self, X, U, xdot=None, A=None, B=None, gradients=True):
        """Constraint values ``(N, nc)`` and gradients ``(N, nc, nx + nu)``."""
        cfg = self.config
        Xk = X[:-1]
        if xdot is None or (gradients and A is None):
            xdot, A, B = dynamics_with_jacobians(Xk, U, self.psi, self.ca, cfg.nominal, cfg.v_eps)
        hs, gxs, gus = [], [], []

        def add(h, gx, gu):
            hs.append(h.reshape(self.N, -1))
            if gradients:
                gxs.append(np.broadcast_to(gx, (self.N, hs[-1].shape[1], self.nx)))
                gus.append(np.broadcast_to(gu, (self.N, hs[-1].shape[1], self.nu)))

        add(*bound_terms(Xk, U, self.ca, cfg.limits))
        h, gx, gu = clf_terms(Xk, U, self.ca, self.psi, self.xb_ref[:-1, :3], self.xb_ref[:-1, 3:],
                              cfg.lam, cfg.K_D, cfg.nominal, cfg.v_eps)
        add(h, gx[:, None], gu[:, None])
        for obs, centers in zip(self.obstacles, self.obs_centers):
            h, gx, gu = object_ecbf_terms(Xk, xdot, A if gradients else None, B, centers,
                                          np.asarray(obs.velocity, float), obs.radius_object,
                                          cfg.gains)
            add(h, gx if gx is None else gx[:, None], gu if gu is None else gu[:, None])
        if cfg.robot_cbf_enabled and self.obstacles:
            h, gx, gu = robot_cbf_batch(Xk, U, self.ca, self._centers_all, self._vel_all,
                                        self._rad_agent, cfg.gains.alpha_r)
            add(h, gx.reshape(self.N, -1, self.nx), gu.reshape(self.N, -1, self.nu))
        H = np.concatenate(hs, 1)
        if not gradients:
            return H, None
        G = np.concatenate([np.concatenate(gxs, 1), np.concatenate(gus, 1)], 2)
        return H, G

    def _penalty(self, H):
        log_side = H >= self.eps
        hs = np.where(log_side, H, self.eps)
        z = (H - 2.0 * self.eps) / self.eps
        val = np.where(log_side, -self.rho * np.log(hs),
                       0.5 * self.rho * (z * z - 1.0) - self.rho * np.log(self.eps))
        d1 = np.where(log_side, -self.rho / hs, self.rho * z / self.eps)
        d2 = np.where(log_side, self.rho / (hs * hs), self.rho / (self.eps * self.eps))
        return val, d1, d2

    def _quadratic_cost(self, X, U):
        w = self.config.weights
        ex = X[1:, :6] - self.xb_ref[1:]
        ed = X[1:, 6:] - self.d_ref[1:]
        eN = ex[-1]
        stage = (np.einsum("ki,ij,kj->", ex, w.Q_xb, ex) + np.einsum("ki,ij,kj->", ed, w.Q_d, ed)
                 + np.einsum("ki,ij,kj->", U, w.R_u, U))
        return stage + eN @ w.Q_f @ eN, ex, ed, eN

    def evaluate(self, z):
        """Cost and dynamics defects, sharing one model evaluation."""
        X, U = self.unpack(z)
        cfg, dt = self.config, self.dt
        quad, *_ = self._quadratic_cost(X, U)
        Xk = X[:-1]
        k1 = dynamics(Xk, U, self.psi, self.ca, cfg.nominal, cfg.v_eps)
        H, _ = self.stage_constraints(X, U, k1, gradients=False)
        val, _, _ = self._penalty(H)
        if cfg.implicit_friction:
            k1 = dynamics(Xk, U, self.psi_step, self.ca, cfg.nominal, cfg.v_eps)
        k2 = dynamics(Xk + 0.5 * dt * k1, U, self.psi_step, self.ca, cfg.nominal, cfg.v_eps)
        defect = X[1:] - Xk - dt * k2
        if cfg.implicit_friction:
            corr, _ = friction_impulse(X[1:, 3:6], self.psi, cfg.nominal, dt, cfg.v_eps)
            defect[:, :6] -= corr
        c = np.concatenate([X[0] - self.x0, defect.ravel()])
        return float(quad + val.sum()), c

    def cost(self, z) -> float:
        return self.evaluate(z)[0]

    def defects(self, z) -> np.ndarray:
        return self.evaluate(z)[1]

    def step_jacobians(self, X, U):
        """End states of the explicit step, ``(A_d, B_d)`` and the blocks ``D_k = dc_k/dx_k``.

        Also returns the continuous dynamics and Jacobians at the stage points
        for reuse by the constraints.
        """
        cfg, dt, nx = self.config, self.dt, self.nx
        Xk = X[:-1]
        nxt, Ad, Bd, xdot, A, B = rk2_step(Xk, U, self.psi_step, self.ca, cfg.nominal, dt,
                                           cfg.v_eps, jacobians=True)
        D = np.broadcast_to(np.eye(nx), (self.N + 1, nx, nx)).copy()
        if cfg.implicit_friction:
            xdot, A, B = dynamics_with_jacobians(Xk, U, self.psi, self.ca, cfg.nominal, cfg.v_eps)
            corr, dcorr = friction_impulse(X[1:, 3:6], self.psi, cfg.nominal, dt, cfg.v_eps)
            nxt = nxt.copy()
            nxt[:, :6] += corr
            D[1:, 3:6, 3:6] -= dcorr
            D[1:, 0:3, 3:6] -= 0.5 * dt * dcorr
        return nxt, Ad, Bd, D, xdot, A, B

    def linearize(self, z):
        """Cost, gradient, Gauss-Newton Hessian blocks, defects and their Jacobian blocks."""
        X, U = self.unpack(z)
        w, nx = self.config.weights, self.nx
        quad, ex, ed, eN = self._quadratic_cost(X, U)
        nxt, Ad, Bd, D, xdot, A, B = self.step_jacobians(X, U)
        Hc, G = self.stage_constraints(X, U, xdot, A, B)
        val, d1, d2 = self._penalty(Hc)
        phi = float(quad + val.sum())

        gX = np.zeros_like(X)
        gX[1:, :6] = 2.0 * ex @ w.Q_xb
        gX[1:, 6:] = 2.0 * ed @ w.Q_d
        gX[-1, :6] += 2.0 * eN @ w.Q_f
        gU = 2.0 * U @ w.R_u
        Gt = G.transpose(0, 2, 1)
        gpen = (Gt @ d1[..., None])[..., 0]
        gX[:-1] += gpen[:, :nx]
        gU += gpen[:, nx:]

        Hs = Gt @ (d2[..., None] * G)
        Qx = np.zeros((nx, nx))
        Qx[:6, :6] = w.Q_xb
        Qx[6:, 6:] = w.Q_d
        Hs[1:, :nx, :nx] += 2.0 * Qx
        Hs[:, nx:, nx:] += 2.0 * w.R_u
        Ht = 2.0 * Qx
        Ht[:6, :6] += 2.0 * w.Q_f

        c = np.concatenate([X[0] - self.x0, (X[1:] - nxt).ravel()])
        return phi, self.pack(gX, gU), Hs, Ht, c, Ad, Bd, D

    def kkt_matrix(self, Hs, Ht, Ad, Bd, D, reg_h=0.0, reg_c=0.0):
        n, m = self.n_var, (self.N + 1) * self.nx
        jdata = np.concatenate([D.ravel(), -Ad.ravel(), -Bd.ravel()])
        diag = np.concatenate([np.full(n, reg_h), np.full(m, -reg_c)])
        data = np.concatenate([Hs.ravel(), Ht.ravel(), jdata, jdata, diag])
        return sp.csc_matrix((data, (self._kkt_rows, self._kkt_cols)), shape=(n + m, n + m))

    def kkt_entries(self, Hs, Ht, Ad, Bd, D):
        """Nonzero values of the unregularized KKT matrix in ``_kkt_rows`` order."""
        jdata = np.concatenate([D.ravel(), -Ad.ravel(), -Bd.ravel()])
        return np.concatenate([Hs.ravel(), Ht.ravel(), jdata, jdata])

    def kkt_solve(self, data, rhs, reg_h=0.0, reg_c=0.0):
        """Solve the KKT system with banded LU in the interleaved ordering."""
        n, m = self.n_var, (self.N + 1) * self.nx
        lo, up = self._band
        width = n + m
        ab = np.zeros((lo + up + 1) * width)
        ab[self._band_flat] = data
        if reg_h or reg_c:
            reg = np.concatenate([np.full(n, reg_h), np.full(m, -reg_c)])[self._perm]
            ab[self._band_diag] += reg
        sol_p = sla.solve_banded((lo, up), ab.reshape(lo + up + 1, width), rhs[self._perm],
                                 check_finite=False)
        sol = np.empty_like(sol_p)
        sol[self._perm] = sol_p
        return sol

    def kkt_residual(self, data, sol, rhs, reg_h=0.0, reg_c=0.0):
        n, m = self.n_var, (self.N + 1) * self.nx
        nnz = data.size
        Kx = np.bincount(self._kkt_rows[:nnz], data * sol[self._kkt_cols[:nnz]], minlength=n + m)
        Kx[:n] += reg_h * sol[:n]
        Kx[n:] -= reg_c * sol[n:]
        return float(np.linalg.norm(Kx - rhs) / max(np.linalg.norm(rhs), 1e-300))

    def hessian_matrix(self, Hs, Ht):
        n = self.n_var
        data = np.concatenate([Hs.ravel(), Ht.ravel()])
        return sp.csc_matrix((data, (self._kkt_rows[:self._n_h], self._kkt_cols[:self._n_h])),
                             shape=(n, n))

    def jacobian_matrix(self, Ad, Bd, D):
        n, m = self.n_var, (self.N + 1) * self.nx
        jdata = np.concatenate([D.ravel(), -Ad.ravel(), -Bd.ravel()])
        lo, hi = self._n_h, self._n_h + self._n_j
        return sp.csc_matrix((jdata, (self._kkt_rows[lo:hi] - n, self._kkt_cols[lo:hi])),
                             shape=(m, n))


class KKTError(RuntimeError):
    pass


def qp_subproblem(nlp: HorizonNLP, z, settings: SolverSettings | None = None, lin=None):
    """Newton step of the equality-constrained QP; returns ``(dz, multipliers, residual)``.

    Regularization is only introduced when factorization fails or the solve
    is not finite, then grown by factors of ten.
    """
    settings = settings or nlp.config.settings
    phi, g, Hs, Ht, c, Ad, Bd, D = lin if lin is not None else nlp.linearize(z)
    n = nlp.n_var
    rhs = -np.concatenate([g, c])
    data = nlp.kkt_entries(Hs, Ht, Ad, Bd, D)
    reg = 0.0
    while True:
        try:
            sol = nlp.kkt_solve(data, rhs, reg, reg)
        except (np.linalg.LinAlgError, ValueError):
            sol = None
        if sol is not None and np.all(np.isfinite(sol)):
            return sol[:n], sol[n:], nlp.kkt_residual(data, sol, rhs, reg, reg)
        reg = settings.kkt_regularization if reg == 0.0 else reg * 10.0
        if reg > settings.max_regularization:
            raise KKTError("KKT factorization failed at maximum regularization")


def sqp_solve(nlp: HorizonNLP, warm: HorizonSolution, settings: SolverSettings | None = None
              ) -> HorizonSolution:
    """Line-search SQP on the l1 merit ``cost + w * ||defects||_1``."""
    settings = settings or nlp.config.settings
    z = nlp.pack(warm.X, warm.U)
    if z.shape != (nlp.n_var,):
        raise ValueError("warm start dimensions do not match the problem")
    w_merit = settings.merit_penalty_weight or 10.0 * nlp.config.weights.largest
    stats = SolveStats()

    def merit(zz):
        try:
            phi, c = nlp.evaluate(zz)
            m = phi + w_merit * np.abs(c).sum()
        except (ValueError, FloatingPointError):
            return np.inf
        return m if np.isfinite(m) else np.inf

    m_cur = merit(z)
    stats.merit.append(m_cur)
    for _ in range(settings.max_sqp_iters):
        try:
            lin = nlp.linearize(z)
            dz, _, res = qp_subproblem(nlp, z, settings, lin)
        except (KKTError, ValueError) as exc:
            stats.failed = True
            stats.message = str(exc)
            break
        stats.iterations += 1
        stats.kkt_residual = res
        g, c = lin[1], lin[4]
        slope = min(float(g @ dz) - w_merit * np.abs(c).sum(), 0.0)
        gamma, accepted = 1.0, False
        for _ in range(settings.ls_max_trials):
            z_try = z + gamma * dz
            m_try = merit(z_try)
            if m_try <= m_cur + 1e-4 * gamma * slope:
                accepted = True
                break
            gamma *= settings.ls_shrink
        if not accepted:
            if not np.isfinite(m_cur):
                stats.failed = True
                stats.message = "non-finite merit at every trial step"
            else:
                stats.message = "line search made no progress"
                stats.converged = np.max(np.abs(dz)) <= settings.step_tol
            break
        log.debug("sqp step gamma=%g merit=%g", gamma, m_try)
        z, m_cur = z_try, m_try
        stats.merit.append(m_cur)
        if np.max(np.abs(gamma * dz)) <= settings.step_tol:
            stats.converged = True
            break
    if stats.failed:
        return HorizonSolution(np.array(warm.X, copy=True), np.array(warm.U, copy=True), stats)
    X, U = nlp.unpack(z)
    return HorizonSolution(X.copy(), U.copy(), stats)


# ---------------------------------------------------------------- receding horizon

def transcribe(x0, psi, goal: Goal, config: PlannerConfig, obstacles: Sequence[Obstacle] = (),
               d_ref=None) -> HorizonNLP:
    """Horizon problem from ``x0`` toward ``goal`` with straight-line subgoals.

    ``d_ref`` defaults to holding the current contact offsets.
    """
    x0 = np.asarray(x0, dtype=float)
    st = config.settings
    q_ref, qdot_ref = subgoals(x0[:3], goal, st.dt, st.horizon_steps)
    if d_ref is None:
        d_ref = np.tile(x0[6:], (st.horizon_steps + 1, 1))
    return HorizonNLP(config, x0, psi, q_ref, qdot_ref, d_ref, obstacles)


def cold_start(config: PlannerConfig, x0, psi) -> HorizonSolution:
    """Roll the model forward with no input."""
    st = config.settings
    ca = contact_arrays(config.contacts)
    X = np.empty((st.horizon_steps + 1, 6 + ca.n))
    U = np.zeros((st.horizon_steps, 2 * ca.n))
    X[0] = x0
    for k in range(st.horizon_steps):
        step = implicit_step if config.implicit_friction else rk2_step
        X[k + 1] = step(X[k], U[k], psi, ca, config.nominal, st.dt, config.v_eps)
    return HorizonSolution(X, U)


def shift_solution(prev: HorizonSolution, elapsed: float, dt: float) -> HorizonSolution:
    """Advance a horizon by ``elapsed`` seconds, holding the last sample."""
    N = prev.U.shape[0]
    t = elapsed + dt * np.arange(N + 1)
    grid = dt * np.arange(N + 1)
    X = np.stack([np.interp(t, grid, prev.X[:, j]) for j in range(prev.X.shape[1])], 1)
    U = np.stack([np.interp(t[:-1], grid[:-1], prev.U[:, j]) for j in range(prev.U.shape[1])], 1)
    return HorizonSolution(X, U)


def _safe_stop(config: PlannerConfig, x, message: str) -> tuple[np.ndarray, HorizonSolution]:
    st = config.settings
    n = config.n_agents
    X = np.tile(np.nan_to_num(np.asarray(x, dtype=float)), (st.horizon_steps + 1, 1))
    sol = HorizonSolution(X, np.zeros((st.horizon_steps, 2 * n)),
                          SolveStats(failed=True, message=message))
    return np.zeros(2 * n), sol


def mpc_step(x, psi, goal: Goal, config: PlannerConfig, obstacles: Sequence[Obstacle] = (),
             prev: HorizonSolution | None = None, elapsed: float | None = None
             ) -> tuple[np.ndarray, HorizonSolution]:
    """Plan from state ``x`` and return the first input and the full horizon.

    ``prev`` is warm-shifted by ``elapsed`` seconds (one horizon step when not
    given).  On solver failure the returned input is the safe stop: zero
    forces and zero slide rates.
    """
    x = np.asarray(x, dtype=float)
    psi = np.asarray(psi, dtype=float)
    st = config.settings
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(psi))):
        return _safe_stop(config, x, "non-finite state or estimate")
    if prev is None:
        warm = cold_start(config, x, psi)
    else:
        warm = shift_solution(prev, st.dt if elapsed is None else elapsed, st.dt)
        warm.X[0] = x
    d_ref = warm.X[:, 6:].copy()
    try:
        nlp = transcribe(x, psi, goal, config, obstacles, d_ref)
        sol = sqp_solve(nlp, warm, st)
    except ValueError as exc:
        return _safe_stop(config, x, str(exc))
    if sol.stats.failed:
        log.warning("planner failure: %s", sol.stats.message)
        return np.zeros(2 * config.n_agents), sol
    return sol.U[0].copy(), sol
