"""Composite tracking error and online estimation of the model mismatch."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_GAIN = np.diag([300.0, 200.0, 100.0, 100.0])
DEFAULT_PSI_MIN = np.array([-20.0, -5.0, 0.0, 0.0])
DEFAULT_PSI_MAX = np.array([20.0, 5.0, 60.0, 20.0])


@dataclass(frozen=True)
class UncertaintyEstimate:
    """Estimate of ``psi = (mass error, inertia error, c_t, c_r)``."""

    psi: np.ndarray = field(default_factory=lambda: np.zeros(4))
    gain: np.ndarray = field(default_factory=lambda: DEFAULT_GAIN.copy())
    psi_min: np.ndarray = field(default_factory=lambda: DEFAULT_PSI_MIN.copy())
    psi_max: np.ndarray = field(default_factory=lambda: DEFAULT_PSI_MAX.copy())

    def __post_init__(self):
        for name, shape in (("psi", (4,)), ("gain", (4, 4)), ("psi_min", (4,)), ("psi_max", (4,))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if not np.allclose(self.gain, self.gain.T):
            raise ValueError("adaptation gain must be symmetric")
        if np.linalg.eigvalsh(self.gain).min() <= 0:
            raise ValueError("adaptation gain must be positive definite")
        if np.any(self.psi_min > self.psi_max):
            raise ValueError("psi_min must not exceed psi_max")
        if np.any(self.psi < self.psi_min) or np.any(self.psi > self.psi_max):
            raise ValueError("psi outside [psi_min, psi_max]")


@dataclass(frozen=True)
class TrackingReference:
    q_d: np.ndarray
    qdot_d: np.ndarray
    qddot_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lam: float = 3.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


def composite_error(q, qdot, ref: TrackingReference) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    return (qdot - ref.qdot_d) + ref.lam * (q - ref.q_d)


def reference_motion(q, qdot, ref: TrackingReference):
    """``(qdot_r, qddot_r)``: the sliding-surface reference velocity and its rate."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    qdot_r = ref.qdot_d - ref.lam * (q - ref.q_d)
    qddot_r = ref.qddot_d - ref.lam * (qdot - ref.qdot_d)
    return qdot_r, qddot_r


def adaptation_step(est: UncertaintyEstimate, Y, s, dt: float) -> UncertaintyEstimate:
    """One explicit-Euler step of ``psi_dot = -Gamma Y^T s`` with box projection."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    psi = est.psi - dt * (est.gain @ (np.asarray(Y, dtype=float).T @ np.asarray(s, dtype=float)))
    return replace(est, psi=np.clip(psi, est.psi_min, est.psi_max))


def lyapunov_value(s, H, psi_error, gain) -> float:
    """``0.5 (s^T H s + psi_err^T Gamma^-1 psi_err)``."""
    s = np.asarray(s, dtype=float)
    psi_error = np.asarray(psi_error, dtype=float)
    return 0.5 * float(s @ H @ s + psi_error @ np.linalg.solve(gain, psi_error))
