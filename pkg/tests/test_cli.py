import json

import pytest

from chancecbf.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main

from conftest import fixture_dict


def write_scenario(path, name, **changes):
    raw = fixture_dict(name)
    raw["sim"].update(changes.pop("sim", {}))
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k].update(v)
        else:
            raw[k] = v
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture(scope="module")
def eq_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("eq")
    scn = write_scenario(d / "scn.json", "equilibrium_pentagon", sim={"runs": 3, "horizon": 5.0},
                         verify={"points": 4, "samples_per_point": 2000})
    ctrl = d / "ctrl.json"
    assert main(["synth", "--scenario", scn, "--out", str(ctrl)]) == EXIT_OK
    return d, scn, str(ctrl)


def test_synth_writes_controller(eq_run):
    _, _, ctrl = eq_run
    obj = json.loads(open(ctrl).read())
    assert obj["status"] == "Optimal"
    assert len(obj["K"]) == 2 and len(obj["K"][0]) == 4
    assert obj["P"] is not None
    assert obj["manifest"]["command"] == "synth"
    assert len(obj["manifest"]["config_hash"]) == 64


def test_simulate_and_plot(eq_run):
    d, scn, ctrl = eq_run
    out = d / "run"
    assert main(["simulate", "--scenario", scn, "--controller", ctrl, "--out", str(out),
                 "--sigma", "0", "1", "--max-csv", "2"]) == EXIT_OK
    csvs = sorted(p.name for p in out.glob("traj_*.csv"))
    assert csvs == ["traj_s0.0_x0_r0.csv", "traj_s0.0_x0_r1.csv", "traj_s1.0_x0_r0.csv", "traj_s1.0_x0_r1.csv"]
    summary = json.loads((out / "summary.json").read_text())
    assert [lvl["sigma"] for lvl in summary["levels"]] == [0.0, 1.0]
    assert summary["levels"][0]["stats"]["violation_run_fraction"] == 0.0
    assert len(summary["levels"][1]["runs"]) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["inputs"]["sigma"] == [0.0, 1.0]
    assert main(["invariant", "--scenario", scn, "--controller", ctrl, "--out", str(out)]) == EXIT_OK
    inv = json.loads((out / "invariant.json").read_text())
    assert 0.5 < inv["area_fraction"] <= 1.0
    assert main(["plot", "--out", str(out)]) == EXIT_OK
    svg = (out / "plot_s1.0.svg").read_text()
    assert 'class="invariant"' in svg and svg.count('class="trajectory"') == 2


def test_simulate_is_byte_reproducible(eq_run, tmp_path):
    _, scn, ctrl = eq_run
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["simulate", "--scenario", scn, "--controller", ctrl, "--out", str(out),
                     "--sigma", "1", "--runs", "2", "--seed", "11"]) == EXIT_OK
        outs.append(out)
    for p in outs[0].glob("traj_*.csv"):
        assert p.read_bytes() == (outs[1] / p.name).read_bytes()


def test_verify_reports_families(eq_run, tmp_path):
    _, scn, ctrl = eq_run
    report_path = tmp_path / "report.json"
    code = main(["verify", "--scenario", scn, "--controller", ctrl, "--out", str(report_path), "--sigma", "0"])
    report = json.loads(report_path.read_text())
    assert code == EXIT_OK and report["passed"]
    assert report["families"]["lyapunov"]["max_eig"] < 0
    assert report["families"]["cbf"]["flagged"] == []
    # constant noise at full strength flags slack-absorbed rows
    code = main(["verify", "--scenario", scn, "--controller", ctrl, "--out", str(report_path)])
    report = json.loads(report_path.read_text())
    assert code == (EXIT_OK if report["passed"] else EXIT_VERIFY)
    assert report["sigma"] == 1.0


def test_synth_infeasible_writes_nothing(tmp_path):
    scn = write_scenario(tmp_path / "scn.json", "equilibrium_pentagon", params={"slack": False})
    out = tmp_path / "ctrl.json"
    assert main(["synth", "--scenario", scn, "--out", str(out)]) == EXIT_INFEASIBLE
    assert not out.exists()


def test_malformed_scenario_is_a_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "ctrl.json"
    assert main(["synth", "--scenario", str(bad), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()
    assert "line 1" in capsys.readouterr().err


def test_missing_flag_and_empty_plot_dir(tmp_path):
    assert main(["synth"]) == EXIT_USAGE
    assert main(["plot", "--out", str(tmp_path)]) == EXIT_USAGE


def test_invariant_rejects_path_task(tmp_path):
    scn = write_scenario(tmp_path / "p.json", "path_ring_cell")
    ctrl = tmp_path / "c.json"
    assert main(["synth", "--scenario", scn, "--out", str(ctrl)]) == EXIT_OK
    assert main(["invariant", "--scenario", scn, "--controller", str(ctrl), "--out", str(tmp_path)]) == EXIT_USAGE


def test_json_logs(eq_run, tmp_path, capsys):
    _, scn, _ = eq_run
    out = tmp_path / "c.json"
    assert main(["--json-logs", "synth", "--scenario", scn, "--out", str(out)]) == EXIT_OK
    lines = [json.loads(line) for line in capsys.readouterr().err.splitlines()]
    rec = next(r for r in lines if r["message"] == "synthesis finished")
    assert rec["status"] == "Optimal" and rec["level"] == "INFO"
