import json

import numpy as np
import pytest

from powerconsensus import cli
from powerconsensus.cli import bundled_scenarios, load_scenario, resolve_scenario_path
from powerconsensus.errors import ConfigError


def _doc(name="t_network"):
    return json.loads(resolve_scenario_path(name).read_text())


def _write(tmp_path, doc, name="sc.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    assert {"t_network", "belk10", "zi_mesh", "belk10_overload"} <= set(names)
    for name in names:
        cfg = load_scenario(resolve_scenario_path(name))
        assert cfg.name == name


def test_simulate_writes_artifacts(tmp_path, capsys):
    assert cli.main(["simulate", "t_network", "--output-dir", str(tmp_path)]) == 0
    summary = _stdout_json(capsys)
    assert (tmp_path / "t_network.csv").exists()
    saved = json.loads((tmp_path / "t_network_summary.json").read_text())
    assert saved["final"]["Vs"]["S1"] == pytest.approx(48.0, abs=1e-5)
    assert summary["steady_state"]["steady"]
    assert summary["geomean_log_drift"] < 1e-12


@pytest.mark.parametrize(
    "mutate,pointer",
    [
        (lambda d: d["initial"].update(Vs_V=[1, 2]), "/initial"),
        (lambda d: d.pop("t_end_s"), "/"),
        (lambda d: d["sources"].update(C="big"), "/sources/C"),
        (lambda d: d["network"]["lines"][0].update(to="nowhere"), "/network/lines/0/to"),
        (lambda d: d["loads"].update(Pstar_W=[5.0]), "/loads"),
        (lambda d: d["initial"].update(Vs=[48.0]), "/initial/Vs"),
    ],
)
def test_malformed_scenarios_exit_2(tmp_path, capsys, mutate, pointer):
    doc = _doc()
    mutate(doc)
    assert cli.main(["simulate", _write(tmp_path, doc), "--output-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("config error: " + pointer)


def test_missing_file_is_config_error():
    with pytest.raises(ConfigError):
        resolve_scenario_path("no_such_scenario")


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert cli.main(["check", str(path)]) == 2


def test_equilibrium_t_network(capsys):
    assert cli.main(["equilibrium", "t_network"]) == 0
    rep = _stdout_json(capsys)
    np.testing.assert_allclose(rep["Vbar_s"], [48.0, 48.0], rtol=1e-12)
    assert rep["zi_closed_form"]["max_abs_difference"] < 1e-9


def test_equilibrium_zi_mesh_dual_path(capsys):
    assert cli.main(["equilibrium", "zi_mesh"]) == 0
    assert _stdout_json(capsys)["zi_closed_form"]["max_abs_difference"] < 1e-9


@pytest.mark.parametrize("name,ok", [("zi_mesh", True), ("t_network", True), ("belk10_zip", True),
                                     ("belk10_overload", False)])
def test_check_verdicts(capsys, name, ok):
    assert cli.main(["check", name]) == 0
    assert _stdout_json(capsys)["ok"] is ok


def test_infeasible_equilibrium_exit_1(tmp_path, capsys):
    doc = _doc()
    doc["loads"]["Pstar_W"] = [-5000.0]
    assert cli.main(["equilibrium", _write(tmp_path, doc)]) == 1
    rep = _stdout_json(capsys)
    assert rep["residual_history"]


def test_simulate_collapse_exit_1(tmp_path, capsys):
    doc = _doc()
    doc["events"] = [{"load": "L", "t_start_s": 0.001, "t_end_s": 0.002, "Pstar_W": -5000.0}]
    assert cli.main(["simulate", _write(tmp_path, doc), "--output-dir", str(tmp_path)]) == 1
    assert "numerical failure" in capsys.readouterr().err


def test_audit_round_trip(tmp_path, capsys):
    assert cli.main(["simulate", "t_network", "--output-dir", str(tmp_path)]) == 0
    capsys.readouterr()
    args = ["audit", "t_network", "--trajectory", str(tmp_path / "t_network.csv")]
    assert cli.main(args) == 0
    rep = _stdout_json(capsys)
    assert rep["passed"] and rep["n_samples"] > 100


def test_audit_rejects_mismatched_csv(tmp_path, capsys):
    assert cli.main(["simulate", "t_network", "--output-dir", str(tmp_path)]) == 0
    assert cli.main(["audit", "zi_mesh", "--trajectory", str(tmp_path / "t_network.csv")]) == 2


def test_controller_override(tmp_path, capsys):
    doc = _doc()
    doc["t_end_s"] = 0.001
    args = ["simulate", _write(tmp_path, doc), "--controller-override", "dapi", "--output-dir", str(tmp_path)]
    assert cli.main(args) == 0
    assert _stdout_json(capsys)["controller"] == "dapi"
    assert "p_1" in (tmp_path / "t_network.csv").read_text().splitlines()[0]


def test_compare(tmp_path, capsys):
    doc = _doc()
    doc["t_end_s"] = 0.005
    doc["outputs"]["sample_interval_s"] = 5e-5
    assert cli.main(["compare", _write(tmp_path, doc), "--output-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "t_network_compare.json").read_text())
    assert set(rep["runs"]) == {"consensus", "dapi"}
    assert (tmp_path / "t_network_consensus.csv").exists() and (tmp_path / "t_network_dapi.csv").exists()
    assert rep["runs"]["consensus"]["final"]["sharing_residual_relative"] < 1e-6
