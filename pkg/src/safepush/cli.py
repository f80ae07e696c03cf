"""Scenario files, run orchestration and run artifacts.

Scenarios and summaries are JSON documents carrying ``schema_version``.
Trajectory logs are CSV with one row per control tick.  The README lists
every field.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .adaptive import DEFAULT_GAIN, DEFAULT_PSI_MAX, DEFAULT_PSI_MIN, UncertaintyEstimate
from .model import (
    DEFAULT_V_EPS,
    ContactConfig,
    ObjectParams,
    agent_offsets,
    contact_arrays,
    rotation2,
)
from .nmpc import OcpWeights, SolverSettings
from .reference import Goal
from .safety import CbfGains, Limits, Obstacle, PenaltyParams, Penalties
from .sim import (
    ADAPTATION_TARGETS,
    Scenario,
    Summary,
    TrajectoryLog,
    TruePlant,
    metrics,
    run_closed_loop,
)

SCHEMA_VERSION = 1
OUT_ENV = "SAFEPUSH_OUT"
DEFAULT_OUT = "runs"
DEFAULT_AGENT_CLEARANCE = 0.3

EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE = 0, 1, 2


class ScenarioError(ValueError):
    """Invalid scenario file; ``field`` is a dotted path, ``line`` is 1-based."""

    def __init__(self, message: str, field: str = "", line: int | None = None,
                 source: str = ""):
        self.field, self.line, self.source = field, line, source
        where = f"{source}:{line}: " if source and line else (f"line {line}: " if line else "")
        name = f"{field}: " if field else ""
        super().__init__(f"{where}{name}{message}")


# ---------------------------------------------------------------- source lines


def _line_map(text: str) -> dict[tuple, int]:
    """Line number of every key and list element in well-formed JSON ``text``."""
    dec = json.JSONDecoder()
    ws = re.compile(r"\s*")
    lines: dict[tuple, int] = {}

    def skip(i: int) -> int:
        return ws.match(text, i).end()

    def lineno(i: int) -> int:
        return text.count("\n", 0, i) + 1

    def value(i: int, path: tuple) -> int:
        i = skip(i)
        lines.setdefault(path, lineno(i))
        c = text[i]
        if c in "{[":
            close = "}" if c == "{" else "]"
            i = skip(i + 1)
            k = 0
            while text[i] != close:
                if c == "{":
                    key_at = i
                    key, i = dec.raw_decode(text, i)
                    sub = path + (key,)
                    lines[sub] = lineno(key_at)
                    i = skip(i) + 1  # colon
                else:
                    sub = path + (k,)
                i = skip(value(i, sub))
                k += 1
                if text[i] == ",":
                    i = skip(i + 1)
            return i + 1
        return dec.raw_decode(text, i)[1]

    value(0, ())
    return lines


def _dotted(path: tuple) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


# ---------------------------------------------------------------- field readers


def _as_float(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return float(v)


def _as_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return int(v)


def _as_bool(v) -> bool:
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _as_str(v) -> str:
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _vector(n: int | None = None) -> Callable[[Any], tuple[float, ...]]:
    def conv(v):
        if not isinstance(v, list):
            raise TypeError("expected a list of numbers")
        out = tuple(_as_float(e) for e in v)
        if n is not None and len(out) != n:
            raise ValueError(f"expected {n} entries, got {len(out)}")
        return out
    return conv


def _matrix(v) -> np.ndarray:
    """Square matrix from its diagonal (flat list) or its rows (nested list)."""
    if not isinstance(v, list) or not v:
        raise TypeError("expected a diagonal list or a list of rows")
    if all(isinstance(r, list) for r in v):
        rows = [_vector(len(v))(r) for r in v]
        return np.array(rows, dtype=float)
    return np.diag(_vector()(v))


class _Section:
    """Reader over one JSON object that reports errors with field path and line."""

    def __init__(self, data, path: tuple, lines: dict, source: str):
        if not isinstance(data, dict):
            raise ScenarioError("expected an object", _dotted(path), self._line(lines, path), source)
        self.data, self.path, self.lines, self.source = data, path, lines, source
        self.used: set[str] = set()

    @staticmethod
    def _line(lines: dict, path: tuple) -> int | None:
        for k in range(len(path), -1, -1):
            if path[:k] in lines:
                return lines[path[:k]]
        return None

    def error(self, message: str, key=None) -> ScenarioError:
        path = self.path if key is None else self.path + (key,)
        return ScenarioError(message, _dotted(path), self._line(self.lines, path), self.source)

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, conv: Callable, default=None, required: bool = False):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise self.error("missing required field", key)
            return default
        try:
            return conv(self.data[key])
        except (TypeError, ValueError) as exc:
            raise self.error(str(exc), key) from None

    def section(self, key: str, required: bool = False) -> "_Section | None":
        self.used.add(key)
        if key not in self.data:
            if required:
                raise self.error("missing required field", key)
            return None
        return _Section(self.data[key], self.path + (key,), self.lines, self.source)

    def items(self, key: str, required: bool = False) -> list["_Section"]:
        self.used.add(key)
        if key not in self.data:
            if required:
                raise self.error("missing required field", key)
            return []
        seq = self.data[key]
        if not isinstance(seq, list):
            raise self.error("expected a list", key)
        return [_Section(e, self.path + (key, i), self.lines, self.source) for i, e in enumerate(seq)]

    def build(self, factory: Callable, *args, key=None, **kwargs):
        """Call a validating constructor, turning its errors into located ones."""
        try:
            return factory(*args, **kwargs)
        except (TypeError, ValueError) as exc:
            raise self.error(str(exc), key) from None

    def finish(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise self.error("unknown field", extra[0])


# ---------------------------------------------------------------- parsing


def _params(sec: _Section) -> ObjectParams:
    kw = dict(mass=sec.get("mass", _as_float, required=True),
              inertia=sec.get("inertia", _as_float, required=True),
              com_offset=sec.get("com_offset", _vector(2), (0.0, 0.0)),
              half_extents=sec.get("half_extents", _vector(2), (0.5, 0.5)))
    return sec.build(ObjectParams, **kw)


def _agent(sec: _Section, nominal: ObjectParams) -> tuple[ContactConfig, float]:
    d0 = sec.get("d0", _as_float, 0.0)
    if sec.has("face"):
        face = sec.get("face", _as_str)
        kw = dict(offset=sec.get("offset", _as_float, 0.0),
                  standoff=sec.get("standoff", _as_float, 0.35),
                  margin=sec.get("margin", _as_float, 0.05))
        sec.finish()
        return sec.build(ContactConfig.on_face, nominal, face, key="face", **kw), d0
    kw = dict(origin=sec.get("origin", _vector(2), required=True),
              normal=sec.get("normal", _vector(2), required=True),
              tangent=sec.get("tangent", _vector(2), required=True),
              d_lower=sec.get("d_lower", _as_float, required=True),
              d_upper=sec.get("d_upper", _as_float, required=True),
              standoff=sec.get("standoff", _as_float, 0.35))
    sec.finish()
    return sec.build(ContactConfig, **kw), d0


def _waypoints(v) -> tuple[tuple[float, float, float], ...]:
    if not isinstance(v, list):
        raise TypeError("expected a list of [t, x, y] rows")
    return tuple(_vector(3)(row) for row in v)


def _obstacle(sec: _Section, nominal: ObjectParams) -> Obstacle:
    waypoints = sec.get("waypoints", _waypoints, ())
    default_center = (waypoints[0][1], waypoints[0][2]) if waypoints else None
    center = sec.get("center", _vector(2), default_center, required=default_center is None)
    if sec.has("radius"):
        # physical radius; barrier radii add the object circumradius and the agent clearance
        r = sec.get("radius", _as_float)
        clearance = sec.get("agent_clearance", _as_float, DEFAULT_AGENT_CLEARANCE)
        r_obj, r_agent = r + nominal.circumradius, r + clearance
    else:
        r_obj = sec.get("radius_object", _as_float, required=True)
        r_agent = sec.get("radius_agent", _as_float, required=True)
    velocity = sec.get("velocity", _vector(2), (0.0, 0.0))
    sec.finish()
    return sec.build(Obstacle, center, r_obj, r_agent, velocity, waypoints)


def _penalty(v) -> PenaltyParams:
    rho, eps = _vector(2)(v)
    return PenaltyParams(rho, eps)


def scenario_from_dict(data, lines: dict | None = None, source: str = "") -> Scenario:
    """Validated :class:`Scenario` from a decoded scenario document."""
    root = _Section(data, (), lines or {}, source)
    version = root.get("schema_version", _as_int, required=True)
    if version != SCHEMA_VERSION:
        raise root.error(f"unsupported schema version {version} (expected {SCHEMA_VERSION})",
                         "schema_version")
    name = root.get("name", _as_str, required=True)

    sec = root.section("nominal", required=True)
    nominal = _params(sec)
    sec.finish()

    sec = root.section("plant", required=True)
    true_params = _params(sec)
    plant_kw = dict(mu=sec.get("mu", _as_float, 0.4), c_rot=sec.get("c_rot", _as_float, 8.0),
                    g=sec.get("g", _as_float, 9.81), v_stop=sec.get("v_stop", _as_float, 0.01))
    sec.finish()
    plant = sec.build(TruePlant, true_params, **plant_kw)

    agents = [_agent(s, nominal) for s in root.items("agents", required=True)]
    if not agents:
        raise root.error("at least one agent is required", "agents")
    obstacles = tuple(_obstacle(s, nominal) for s in root.items("obstacles"))

    sec = root.section("goal", required=True)
    goal_kw = dict(position=sec.get("position", _vector(2), required=True),
                   theta=sec.get("theta", _as_float, 0.0),
                   v_avg=sec.get("v_avg", _as_float, 0.5),
                   omega_avg=sec.get("omega_avg", _as_float, 0.8))
    sec.finish()
    goal = sec.build(Goal, **goal_kw)
    q0 = root.get("q0", _vector(3), (0.0, 0.0, 0.0))

    n = len(agents)
    weights = None
    sec = root.section("weights")
    if sec is not None:
        base = OcpWeights.default(n)
        kw = {k: sec.get(k, _matrix, getattr(base, k)) for k in ("Q_f", "Q_xb", "Q_d", "R_u")}
        sec.finish()
        weights = sec.build(OcpWeights, **kw)

    base_pen = Penalties()
    penalties = base_pen
    sec = root.section("penalties")
    if sec is not None:
        penalties = Penalties(**{k: sec.get(k, _penalty, getattr(base_pen, k))
                                 for k in ("cbf", "clf", "bound")})
        sec.finish()

    gains, lam, K_D = CbfGains(), 3.0, 3.0 * np.eye(3)
    sec = root.section("gains")
    if sec is not None:
        lam = sec.get("lam", _as_float, lam)
        K_D = sec.get("K_D", _matrix, K_D)
        kw = {k: sec.get(k, _as_float, getattr(gains, k)) for k in ("alpha_m", "beta_m", "alpha_r")}
        sec.finish()
        gains = sec.build(CbfGains, **kw)

    est = UncertaintyEstimate()
    adaptive_enabled, target, window = True, "plan", 0.5
    regressor_v_eps = DEFAULT_V_EPS
    sec = root.section("adaptation")
    if sec is not None:
        adaptive_enabled = sec.get("enabled", _as_bool, True)
        target = sec.get("target", _as_str, target)
        if target not in ADAPTATION_TARGETS:
            raise sec.error(f"must be one of {', '.join(ADAPTATION_TARGETS)}", "target")
        window = sec.get("window", _as_float, window)
        regressor_v_eps = sec.get("regressor_v_eps", _as_float, regressor_v_eps)
        kw = dict(psi=np.array(sec.get("psi0", _vector(4), (0.0,) * 4)),
                  gain=sec.get("gamma", _matrix, DEFAULT_GAIN),
                  psi_min=np.array(sec.get("psi_min", _vector(4), tuple(DEFAULT_PSI_MIN))),
                  psi_max=np.array(sec.get("psi_max", _vector(4), tuple(DEFAULT_PSI_MAX))))
        sec.finish()
        est = sec.build(UncertaintyEstimate, **kw)

    limits = Limits()
    sec = root.section("limits")
    if sec is not None:
        kw = {k: sec.get(k, _as_float, getattr(limits, k)) for k in ("f_max", "v_max")}
        sec.finish()
        limits = sec.build(Limits, **kw)

    settings = SolverSettings()
    v_eps, implicit, robot_cbf = DEFAULT_V_EPS, True, True
    sec = root.section("solver")
    if sec is not None:
        kw = {}
        for k, conv in (("horizon_steps", _as_int), ("dt", _as_float), ("max_sqp_iters", _as_int),
                        ("kkt_regularization", _as_float), ("max_regularization", _as_float),
                        ("merit_penalty_weight", _as_float), ("ls_shrink", _as_float),
                        ("ls_max_trials", _as_int), ("step_tol", _as_float)):
            if sec.has(k):
                kw[k] = sec.get(k, conv)
        v_eps = sec.get("v_eps", _as_float, v_eps)
        implicit = sec.get("implicit_friction", _as_bool, implicit)
        robot_cbf = sec.get("robot_cbf_enabled", _as_bool, robot_cbf)
        sec.finish()
        settings = sec.build(SolverSettings, **kw)

    sim_kw: dict[str, Any] = {}
    sec = root.section("simulation")
    if sec is not None:
        for k, conv in (("time_limit", _as_float), ("control_period", _as_float),
                        ("dt_sim", _as_float), ("position_tol", _as_float),
                        ("heading_tol", _as_float), ("hold_time", _as_float),
                        ("measurement_noise", _as_float), ("seed", _as_int)):
            if sec.has(k):
                sim_kw[k] = sec.get(k, conv)
        sec.finish()
    root.finish()

    return root.build(
        Scenario, name=name, plant=plant, nominal=nominal,
        contacts=tuple(c for c, _ in agents), goal=goal, q0=q0,
        d0=tuple(d for _, d in agents), obstacles=obstacles, weights=weights,
        penalties=penalties, gains=gains, lam=lam, K_D=K_D, adaptation=est, limits=limits,
        settings=settings, v_eps=v_eps, regressor_v_eps=regressor_v_eps,
        adaptation_target=target, adaptation_window=window, implicit_friction=implicit,
        adaptive_enabled=adaptive_enabled, robot_cbf_enabled=robot_cbf, **sim_kw)


def scenario_from_text(text: str, source: str = "") -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed JSON: {exc.msg} (column {exc.colno})", "",
                            exc.lineno, source) from None
    return scenario_from_dict(data, _line_map(text), source)


def parse_scenario(path) -> Scenario:
    """Read and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read file: {exc.strerror}", "", None, str(path)) from None
    return scenario_from_text(text, str(path))


# ---------------------------------------------------------------- serialization


def _mat(M: np.ndarray) -> list:
    M = np.asarray(M, dtype=float)
    if np.array_equal(M, np.diag(np.diag(M))):
        return np.diag(M).tolist()
    return M.tolist()


def _params_dict(p: ObjectParams) -> dict:
    return {"mass": p.mass, "inertia": p.inertia, "com_offset": list(p.com_offset),
            "half_extents": list(p.half_extents)}


def scenario_to_dict(sc: Scenario) -> dict:
    """Explicit document for ``sc``; :func:`scenario_from_dict` inverts it."""
    d0 = sc.initial_d()
    plant = _params_dict(sc.plant.params)
    plant.update(mu=sc.plant.mu, c_rot=sc.plant.c_rot, g=sc.plant.g, v_stop=sc.plant.v_stop)
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "nominal": _params_dict(sc.nominal),
        "plant": plant,
        "agents": [{"origin": list(c.origin), "normal": list(c.normal), "tangent": list(c.tangent),
                    "d_lower": c.d_lower, "d_upper": c.d_upper, "standoff": c.standoff,
                    "d0": float(d)} for c, d in zip(sc.contacts, d0)],
        "obstacles": [{"center": list(o.center), "radius_object": o.radius_object,
                       "radius_agent": o.radius_agent, "velocity": list(o.velocity),
                       "waypoints": [list(w) for w in o.waypoints]} for o in sc.obstacles],
        "goal": {"position": list(sc.goal.position), "theta": sc.goal.theta,
                 "v_avg": sc.goal.v_avg, "omega_avg": sc.goal.omega_avg},
        "q0": list(sc.q0),
    }
    if sc.weights is not None:
        doc["weights"] = {k: _mat(getattr(sc.weights, k)) for k in ("Q_f", "Q_xb", "Q_d", "R_u")}
    doc["penalties"] = {k: [getattr(sc.penalties, k).rho, getattr(sc.penalties, k).eps]
                        for k in ("cbf", "clf", "bound")}
    doc["gains"] = {"lam": sc.lam, "K_D": _mat(sc.K_D), "alpha_m": sc.gains.alpha_m,
                    "beta_m": sc.gains.beta_m, "alpha_r": sc.gains.alpha_r}
    est = sc.adaptation
    doc["adaptation"] = {"enabled": sc.adaptive_enabled, "target": sc.adaptation_target,
                         "window": sc.adaptation_window, "regressor_v_eps": sc.regressor_v_eps,
                         "gamma": _mat(est.gain), "psi0": est.psi.tolist(),
                         "psi_min": est.psi_min.tolist(), "psi_max": est.psi_max.tolist()}
    doc["limits"] = {"f_max": sc.limits.f_max, "v_max": sc.limits.v_max}
    st = sc.settings
    solver = {k: getattr(st, k) for k in ("horizon_steps", "dt", "max_sqp_iters",
                                          "kkt_regularization", "max_regularization",
                                          "ls_shrink", "ls_max_trials", "step_tol")}
    if st.merit_penalty_weight is not None:
        solver["merit_penalty_weight"] = st.merit_penalty_weight
    solver.update(v_eps=sc.v_eps, implicit_friction=sc.implicit_friction,
                  robot_cbf_enabled=sc.robot_cbf_enabled)
    doc["solver"] = solver
    doc["simulation"] = {k: getattr(sc, k) for k in ("time_limit", "control_period", "dt_sim",
                                                     "position_tol", "heading_tol", "hold_time",
                                                     "measurement_noise", "seed")}
    return doc


def serialize_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2) + "\n"


# ---------------------------------------------------------------- artifacts


def csv_header(n_agents: int, n_obstacles: int) -> list[str]:
    cols = ["t", "x", "y", "theta", "vx", "vy", "wz"]
    cols += [f"d_{i + 1}" for i in range(n_agents)]
    cols += [f"f_{i + 1}" for i in range(n_agents)]
    cols += [f"B_obj_{j + 1}" for j in range(n_obstacles)]
    cols += [f"B_r_{i + 1}_{j + 1}" for i in range(n_agents) for j in range(n_obstacles)]
    cols += ["h_clf"] + [f"psi_{k + 1}" for k in range(4)] + ["sqp_iters", "solve_ms"]
    return cols


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(log: TrajectoryLog, path, include_timing: bool = False) -> None:
    """Trajectory CSV; ``solve_ms`` is written as ``nan`` unless ``include_timing``.

    Wall-clock timings differ between otherwise identical runs, so the
    default keeps the file reproducible byte for byte.
    """
    a = log.arrays()
    n, j = log.n_agents, log.n_obstacles
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(n, j))
        for k in range(len(log)):
            row = [a["t"][k], *a["x"][k], *a["u"][k, :n], *a["b_obj"][k],
                   *a["b_robot"][k].ravel(), a["h_clf"][k], *a["psi"][k]]
            timing = _fmt(a["solve_ms"][k]) if include_timing else "nan"
            w.writerow([_fmt(v) for v in row] + [str(int(a["sqp_iters"][k])), timing])


def write_timing_csv(log: TrajectoryLog, path) -> None:
    a = log.arrays()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "sqp_iters", "solve_ms"])
        for k in range(len(log)):
            w.writerow([_fmt(a["t"][k]), str(int(a["sqp_iters"][k])), f"{a['solve_ms'][k]:.3f}"])


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))
    return {name: data[:, k] for k, name in enumerate(rows[0])}


def render_svg(sc: Scenario, log: TrajectoryLog, size: int = 600) -> str:
    """Overhead view: object and agent paths, obstacles and their barrier circles."""
    a = log.arrays()
    x = a["x"]
    ca = contact_arrays(sc.contacts)
    agents = np.stack([x[k, :2] + agent_offsets(x[k, 6:], ca) @ rotation2(x[k, 2]).T
                       for k in range(len(x))])
    centers = a["obstacle_centers"]
    pts = [x[:, :2], agents.reshape(-1, 2), np.array([sc.goal.position])]
    reach = [np.zeros((0, 2))]
    for j, o in enumerate(sc.obstacles):
        c = centers[:, j]
        pts.append(c)
        reach.append(np.concatenate([c.min(0) - o.radius_object, c.max(0) + o.radius_object])
                     .reshape(2, 2))
    allp = np.concatenate(pts + reach)
    lo, hi = allp.min(0) - 0.5, allp.max(0) + 0.5
    scale = size / float(max(hi - lo))

    def px(p):
        return (p[0] - lo[0]) * scale, (hi[1] - p[1]) * scale

    def poly(p, color, width=2.0, dash=""):
        s = " ".join(f"{u:.1f},{v:.1f}" for u, v in (px(q) for q in p))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<polyline points="{s}" fill="none" stroke="{color}" '
                f'stroke-width="{width}"{extra}/>')

    w = (hi[0] - lo[0]) * scale
    h = (hi[1] - lo[1]) * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
           f'viewBox="0 0 {w:.1f} {h:.1f}">',
           f'<rect width="{w:.1f}" height="{h:.1f}" fill="white"/>',
           f'<title>{sc.name}</title>']
    for j, o in enumerate(sc.obstacles):
        c0 = centers[0, j]
        cx, cy = px(c0)
        out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{o.radius_object * scale:.1f}" '
                   'fill="none" stroke="#d62728" stroke-dasharray="6 4"/>')
        out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{o.radius_agent * scale:.1f}" '
                   'fill="#d62728" fill-opacity="0.15" stroke="#d62728"/>')
        if o.waypoints:
            out.append(poly(centers[:, j], "#d62728", 1.0, "2 3"))
    for i in range(sc.n_agents):
        out.append(poly(agents[:, i], "#2ca02c", 1.0))
    out.append(poly(x[:, :2], "#1f77b4", 2.5))
    hx, hy = sc.nominal.half_extents
    corners = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy], [-hx, -hy]])
    for k in np.linspace(0, len(x) - 1, 6).astype(int):
        out.append(poly(x[k, :2] + corners @ rotation2(x[k, 2]).T, "#1f77b4", 1.0))
    gx, gy = px(sc.goal.position)
    out.append(f'<circle cx="{gx:.1f}" cy="{gy:.1f}" r="{sc.position_tol * scale:.1f}" '
               'fill="none" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- run / compare


@dataclass
class RunSummary:
    scenario: str
    success: bool
    failed: bool
    message: str
    metrics: Summary
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.success and not self.failed else EXIT_RUN_FAILED

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "scenario": self.scenario,
                "success": self.success, "failed": self.failed, "message": self.message,
                "metrics": self.metrics.to_dict(), "artifacts": dict(self.artifacts)}


def apply_flags(sc: Scenario, disable_adaptive: bool = False, disable_robot_cbf: bool = False,
                control_hz: float | None = None, seed: int | None = None) -> Scenario:
    changes: dict[str, Any] = {}
    if disable_adaptive:
        changes["adaptive_enabled"] = False
    if disable_robot_cbf:
        changes["robot_cbf_enabled"] = False
    if control_hz is not None:
        if not control_hz > 0:
            raise ValueError("control rate must be positive")
        changes["control_period"] = 1.0 / control_hz
        changes["adaptation_window"] = max(sc.adaptation_window, 1.0 / control_hz)
    if seed is not None:
        changes["seed"] = seed
    return replace(sc, **changes) if changes else sc


def run(scenario: Scenario | str | os.PathLike, out_dir=None, *, disable_adaptive: bool = False,
        disable_robot_cbf: bool = False, control_hz: float | None = None, seed: int | None = None,
        svg: bool = False, tag: str | None = None) -> RunSummary:
    """Run one scenario and write its CSV log, timing file and summary JSON."""
    sc = scenario if isinstance(scenario, Scenario) else parse_scenario(scenario)
    sc = apply_flags(sc, disable_adaptive, disable_robot_cbf, control_hz, seed)
    out = Path(out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    stem = tag or sc.name
    log = run_closed_loop(sc)
    m = metrics(log, sc.goal, sc.position_tol, sc.heading_tol)
    paths = {"trajectory": out / f"{stem}.csv", "timing": out / f"{stem}_timing.csv",
             "summary": out / f"{stem}_summary.json"}
    write_trajectory_csv(log, paths["trajectory"])
    write_timing_csv(log, paths["timing"])
    if svg:
        paths["svg"] = out / f"{stem}.svg"
        paths["svg"].write_text(render_svg(sc, log))
    summary = RunSummary(sc.name, bool(log.success), bool(log.failed), log.message, m,
                         {k: str(v) for k, v in paths.items()})
    paths["summary"].write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    return summary


COMPARE_FIELDS = ("success", "failed", "final_position_error", "final_heading_error",
                  "time_to_goal", "path_length", "peak_force", "min_object_barrier",
                  "min_robot_barrier", "side_of_diagonal", "mean_solve_ms")


def _cell(v) -> str:
    if isinstance(v, list):
        flat = np.asarray(v, dtype=float).ravel()
        return _cell(float(flat.min())) if flat.size else "-"
    if v is None:
        return "-"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def compare(paths: Sequence[str | os.PathLike]) -> list[list[str]]:
    """Rows of a side-by-side metrics table; the first row is the header."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two summary files")
    docs = [json.loads(Path(p).read_text()) for p in paths]
    names = {d.get("scenario") for d in docs}
    if len(names) > 1:
        warnings.warn(f"comparing different scenarios: {sorted(map(str, names))}", stacklevel=2)
    rows = [["run", "scenario", *COMPARE_FIELDS]]
    for p, d in zip(paths, docs):
        m = d["metrics"]
        rows.append([Path(p).name, str(d.get("scenario")),
                     *(_cell(d[k] if k in ("success", "failed") else m.get(k)) for k in COMPARE_FIELDS)])
    return rows


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows) + "\n"


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safepush",
                                description="Adaptive safe multi-agent pushing planner.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="simulate a scenario and write its artifacts")
    r.add_argument("scenario", help="scenario JSON file")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    r.add_argument("--disable-adaptive", action="store_true", help="freeze the estimate at psi0")
    r.add_argument("--disable-robot-cbf", action="store_true", help="drop agent barrier terms")
    r.add_argument("--control-hz", type=float, help="planner update rate")
    r.add_argument("--seed", type=int, help="seed for measurement noise")
    r.add_argument("--svg", action="store_true", help="also write an overhead SVG plot")
    r.add_argument("--tag", help="artifact file stem (default: scenario name)")
    c = sub.add_parser("compare", help="tabulate metrics from two or more summary files")
    c.add_argument("summaries", nargs="+")
    c.add_argument("--out", help="also write the table as CSV to this file")
    v = sub.add_parser("validate", help="check a scenario file and print its resolved form")
    v.add_argument("scenario")
    v.add_argument("--print", action="store_true", dest="show", help="print the explicit JSON")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "validate":
            sc = parse_scenario(args.scenario)
            if args.show:
                sys.stdout.write(serialize_scenario(sc))
            else:
                print(f"ok: {sc.name} ({sc.n_agents} agents, {len(sc.obstacles)} obstacles)")
            return EXIT_OK
        if args.verb == "compare":
            if len(args.summaries) < 2:
                print("error: compare needs at least two summary files", file=sys.stderr)
                return EXIT_USAGE
            rows = compare(args.summaries)
            sys.stdout.write(format_table(rows))
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerows(rows)
            return EXIT_OK
        summary = run(args.scenario, args.out, disable_adaptive=args.disable_adaptive,
                      disable_robot_cbf=args.disable_robot_cbf, control_hz=args.control_hz,
                      seed=args.seed, svg=args.svg, tag=args.tag)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    m = summary.metrics
    status = "success" if summary.exit_code == EXIT_OK else "FAILED"
    print(f"{summary.scenario}: {status}  final error {m.final_position_error:.3f} m  "
          f"time {m.duration:.2f} s")
    print(f"summary: {summary.artifacts['summary']}")
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
