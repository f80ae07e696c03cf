from pathlib import Path

import numpy as np
import pytest

from safepush.model import ContactConfig, ObjectParams, contact_arrays

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def central_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of ``f`` at ``x`` with relative step."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    J = np.zeros(f0.shape + x.shape)
    for i in np.ndindex(x.shape):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        J[(...,) + i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * step)
    return J


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


@pytest.fixture
def nominal():
    return ObjectParams(6.0, 0.64, (0.0, 0.0), (0.4, 0.4))


@pytest.fixture
def contacts(nominal):
    return (ContactConfig.on_face(nominal, "-x", 0.1), ContactConfig.on_face(nominal, "-y", -0.1))


@pytest.fixture
def ca(contacts):
    return contact_arrays(contacts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_state(rng, n_agents=2, speed=1.0):
    q = np.concatenate([rng.uniform(-2, 2, 2), rng.uniform(-np.pi, np.pi, 1)])
    qd = rng.uniform(-speed, speed, 3)
    d = rng.uniform(-0.2, 0.2, n_agents)
    return np.concatenate([q, qd, d])


def random_input(rng, n_agents=2):
    return np.concatenate([rng.uniform(0.0, 40.0, n_agents), rng.uniform(-1, 1, n_agents)])


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """``record(n, title, ok, detail)`` logs one acceptance line and returns ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def rec(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines.append((n, line))
        print(line)
        return ok

    return rec


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
