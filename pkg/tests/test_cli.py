import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import SCENARIOS
from safepush.cli import (
    EXIT_OK,
    EXIT_RUN_FAILED,
    EXIT_USAGE,
    ScenarioError,
    compare,
    csv_header,
    main,
    parse_scenario,
    read_trajectory_csv,
    run,
    scenario_from_dict,
    scenario_from_text,
    scenario_to_dict,
    serialize_scenario,
)

MINIMAL = """{
  "schema_version": 1,
  "name": "minimal",
  "nominal": {"mass": 6.0, "inertia": 0.64},
  "plant": {"mass": 8.0, "inertia": 0.853},
  "agents": [{"face": "-x"}],
  "goal": {"position": [1.0, 1.0]}
}
"""


def at_goal_doc(**simulation):
    doc = json.loads(MINIMAL)
    doc["name"] = "at_goal"
    doc["goal"] = {"position": [0.0, 0.0]}
    doc["solver"] = {"horizon_steps": 10}
    doc["simulation"] = {"time_limit": 1.0, "hold_time": 0.1, **simulation}
    return doc


def write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc, indent=2))
    return p


# ---------------------------------------------------------------- parsing


def test_minimal_file_defaults():
    sc = scenario_from_text(MINIMAL)
    assert sc.lam == 3.0
    np.testing.assert_array_equal(sc.adaptation.gain, np.diag([300.0, 200.0, 100.0, 100.0]))
    np.testing.assert_array_equal(sc.K_D, 3.0 * np.eye(3))
    assert (sc.gains.alpha_m, sc.gains.beta_m) == (4.0, 4.0)
    assert sc.n_agents == 1 and sc.obstacles == ()
    assert sc.adaptive_enabled and sc.robot_cbf_enabled


def test_missing_goal_names_field():
    doc = json.loads(MINIMAL)
    del doc["goal"]
    with pytest.raises(ScenarioError) as exc:
        scenario_from_text(json.dumps(doc, indent=2), "x.json")
    assert exc.value.field == "goal"
    assert "goal" in str(exc.value) and "x.json" in str(exc.value)


def test_complex_gain_roots_rejected_with_line():
    text = MINIMAL.replace('"goal"', '"gains": {"alpha_m": 5, "beta_m": 2},\n  "goal"')
    with pytest.raises(ScenarioError) as exc:
        scenario_from_text(text)
    assert exc.value.field == "gains" and exc.value.line == 7
    assert "complex" in str(exc.value)


def test_unknown_field_rejected_with_line():
    text = MINIMAL.replace('{"face": "-x"}', '{"face": "-x", "fcae": 1}')
    with pytest.raises(ScenarioError) as exc:
        scenario_from_text(text)
    assert exc.value.field == "agents[0].fcae" and exc.value.line == 6


def test_malformed_json_reports_line():
    with pytest.raises(ScenarioError) as exc:
        scenario_from_text(MINIMAL.replace('"name": "minimal",', '"name": "minimal"'))
    assert exc.value.line == 4


@pytest.mark.parametrize("edit, field", [
    (lambda d: d.update(schema_version=2), "schema_version"),
    (lambda d: d.update(agents=[]), "agents"),
    (lambda d: d["nominal"].update(mass=-1.0), "nominal"),
    (lambda d: d.update(obstacles=[{"center": [1, 1], "radius": -0.4}]), "obstacles[0]"),
    (lambda d: d.update(limits={"f_max": 0.0}), "limits"),
    (lambda d: d.update(adaptation={"target": "elsewhere"}), "adaptation.target"),
])
def test_invalid_values_name_field(edit, field):
    doc = json.loads(MINIMAL)
    edit(doc)
    with pytest.raises(ScenarioError) as exc:
        scenario_from_dict(doc)
    assert exc.value.field.startswith(field)


def test_unreadable_file(tmp_path):
    with pytest.raises(ScenarioError):
        parse_scenario(tmp_path / "missing.json")


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.json")), ids=lambda p: p.stem)
def test_bundled_round_trip(path):
    sc = parse_scenario(path)
    text = serialize_scenario(sc)
    again = scenario_from_text(text)
    assert serialize_scenario(again) == text
    a, b = scenario_to_dict(sc), scenario_to_dict(again)
    assert a == b
    assert again.name == path.stem


def test_bundled_scenarios_present():
    names = {p.stem for p in SCENARIOS.glob("*.json")}
    assert names == {"two_static", "adaptive_ablation", "robot_cbf_ablation",
                     "initial_config_left", "initial_config_right", "dynamic_obstacles"}


# ---------------------------------------------------------------- run artifacts


def test_csv_header():
    assert csv_header(2, 1) == ["t", "x", "y", "theta", "vx", "vy", "wz", "d_1", "d_2",
                                "f_1", "f_2", "B_obj_1", "B_r_1_1", "B_r_2_1", "h_clf",
                                "psi_1", "psi_2", "psi_3", "psi_4", "sqp_iters", "solve_ms"]


def test_run_writes_artifacts(tmp_path):
    doc = at_goal_doc()
    doc["obstacles"] = [{"center": [3.0, 0.0], "radius": 0.4}]
    s = run(write(tmp_path, doc), tmp_path / "out", svg=True)
    assert s.success and s.exit_code == EXIT_OK
    for p in s.artifacts.values():
        assert (tmp_path / "out" / p.split("/")[-1]).exists()
    data = read_trajectory_csv(s.artifacts["trajectory"])
    assert list(data) == csv_header(1, 1)
    assert np.all(np.isnan(data["solve_ms"]))
    summary = json.loads(open(s.artifacts["summary"]).read())
    assert summary["schema_version"] == 1 and summary["success"] is True
    assert open(s.artifacts["svg"]).read().startswith("<svg")


def test_run_uses_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("SAFEPUSH_OUT", str(tmp_path / "env"))
    s = run(write(tmp_path, at_goal_doc()), tag="tagged")
    assert s.artifacts["trajectory"] == str(tmp_path / "env" / "tagged.csv")


def test_run_failure_exit_code(tmp_path):
    doc = at_goal_doc(time_limit=0.1)
    doc["goal"] = {"position": [3.0, 0.0]}
    p = write(tmp_path, doc)
    assert main(["run", str(p), "--out", str(tmp_path)]) == EXIT_RUN_FAILED


def test_flags_apply(tmp_path):
    p = write(tmp_path, at_goal_doc())
    s = run(p, tmp_path, disable_adaptive=True, disable_robot_cbf=True, control_hz=25.0, seed=3)
    data = read_trajectory_csv(s.artifacts["trajectory"])
    np.testing.assert_allclose(np.diff(data["t"]), 0.04)
    assert np.all(data["psi_3"] == 0.0)


def test_compare(tmp_path):
    p = write(tmp_path, at_goal_doc())
    a = run(p, tmp_path, tag="a").artifacts["summary"]
    b = run(p, tmp_path, tag="b").artifacts["summary"]
    rows = compare([a, b])
    # every column but the wall-clock timing is reproducible
    assert rows[0][-1] == "mean_solve_ms"
    assert rows[1][1:-1] == rows[2][1:-1]
    with pytest.raises(ValueError):
        compare([a])
    other = json.loads(open(b).read())
    other["scenario"] = "elsewhere"
    c = tmp_path / "c.json"
    c.write_text(json.dumps(other))
    with pytest.warns(UserWarning):
        compare([a, c])
    out = tmp_path / "table.csv"
    assert main(["compare", a, b, "--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines()[0].startswith("run,scenario,success")
    assert main(["compare", a]) == EXIT_USAGE


# ---------------------------------------------------------------- entry point


def test_validate_verb(tmp_path, capsys):
    p = write(tmp_path, json.loads(MINIMAL))
    assert main(["validate", str(p)]) == EXIT_OK
    assert "ok: minimal" in capsys.readouterr().out
    assert main(["validate", str(p), "--print"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert serialize_scenario(scenario_from_text(printed)) == printed
    bad = write(tmp_path, {"schema_version": 1}, "bad.json")
    assert main(["validate", str(bad)]) == EXIT_USAGE
    assert "name" in capsys.readouterr().err


def test_help_exits_zero():
    for argv in (["--help"], ["run", "--help"]):
        r = subprocess.run([sys.executable, "-m", "safepush", *argv], capture_output=True, text=True)
        assert r.returncode == 0 and "usage" in r.stdout


def test_unknown_verb_is_usage_error():
    r = subprocess.run([sys.executable, "-m", "safepush", "fly"], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE
