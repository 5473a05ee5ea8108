import hashlib
import json
import math
import os

import pytest

from qsurf.cli import (
    _cross_section_spec,
    build_parser,
    main,
    parse_config,
    run_command,
)
from qsurf.errors import (
    ConfigError,
    ParseError,
    UnitMismatch,
    UnknownKey,
)

PLATE_GEO = {"kind": "parallel_plate", "gap_nm": 100.0, "width_nm": 200.0,
             "layers": [{"thickness_nm": 5.0, "permittivity": 10.0,
                         "loss_tangent": 1e-3}]}
SMALL_GEO = {"film_thickness_nm": 100.0, "substrate_depth_nm": 1500.0,
             "gap_halfwidth_nm": 1500.0, "domain_width_nm": 3000.0,
             "domain_height_nm": 3000.0, "r_top_nm": 5.0,
             "r_bottom_nm": 5.0}


def _write(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_empty_config_gets_defaults():
    cfg = parse_config("{}")
    assert cfg.geometry["kind"] == "cross_section"
    assert cfg.geometry["film_thickness_nm"] == 200.0
    assert cfg.geometry["oxide_layers"] == [{"thickness_nm": 5.0}]
    assert cfg.solver == {"order": 1, "rel_tol": 1e-10, "refinement": 0}
    assert cfg.circuit["l_j_nh"] == 10.0
    assert cfg.output["formats"] == ["csv", "json"]
    assert "gap_nm" not in cfg.geometry  # optional fixture key


def test_echo_round_trip():
    cfg = parse_config(json.dumps({
        "geometry": {"film_thickness_nm": 150.0,
                     "oxide_layers": [{"thickness_nm": 7.5,
                                       "permittivity": 6.0}]},
        "solver": {"order": 2},
        "circuit": {"channels": [{"label": "ma", "epr": 1e-4,
                                  "tan_delta": 2e-3}]},
    }))
    again = parse_config(cfg.echo_json())
    assert again == cfg


def test_unknown_section_and_key():
    with pytest.raises(UnknownKey):
        parse_config('{"geom": {}}')
    with pytest.raises(UnknownKey):
        parse_config('{"geometry": {"flim_thickness_nm": 1.0}}')


def test_missing_unit_suffix():
    with pytest.raises(UnitMismatch) as excinfo:
        parse_config('{"geometry": {"film_thickness": 200.0}}')
    assert "film_thickness_nm" in str(excinfo.value)


def test_wrong_unit_suffix():
    with pytest.raises(UnitMismatch) as excinfo:
        parse_config('{"geometry": {"film_thickness_deg": 200.0}}')
    assert "film_thickness_nm" in str(excinfo.value)


def test_micrometer_keys_convert():
    cfg = parse_config(json.dumps(
        {"geometry": {"film_thickness_um": 0.2,
                      "gap_halfwidth_um": 1.5}}))
    assert cfg.geometry["film_thickness_nm"] == pytest.approx(200.0)
    assert cfg.geometry["gap_halfwidth_nm"] == pytest.approx(1500.0)
    cfg = parse_config(json.dumps(
        {"study": {"window_um": [0.02, 0.04]}}))
    assert cfg.study["window_nm"] == pytest.approx([20.0, 40.0])


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as excinfo:
        parse_config('{"geometry": }')
    msg = str(excinfo.value)
    assert "line 1" in msg
    with pytest.raises(ParseError):
        parse_config('[1, 2]')


def test_solver_validation():
    with pytest.raises(ConfigError):
        parse_config('{"solver": {"order": 3}}')
    with pytest.raises(ConfigError):
        parse_config('{"solver": {"refinement": -1}}')
    with pytest.raises(ConfigError):
        parse_config('{"solver": {"refinement": 1.5}}')
    with pytest.raises(ConfigError):
        parse_config('{"geometry": {"kind": "sphere"}}')


def test_oxide_thickness_shorthand():
    cfg = parse_config(json.dumps({
        "geometry": {"oxide_thickness_nm": 12.0},
        "materials": {"oxide": {"permittivity": 6.0,
                                "loss_tangent": 2e-3}},
    }))
    spec = _cross_section_spec(cfg)
    assert len(spec.oxide_layers) == 1
    layer = spec.oxide_layers[0]
    assert layer.thickness_nm == 12.0
    assert layer.permittivity == 6.0
    assert layer.loss_tangent == 2e-3


def test_budget_artifacts(tmp_path):
    cfg = parse_config(json.dumps({
        "circuit": {"channels": [{"label": "oxide", "epr": 3.08e-5,
                                  "tan_delta": 1e-3}]},
    }))
    hashes = run_command("budget", cfg, out_dir=str(tmp_path))
    assert set(hashes) == {"budget.json"}
    body = (tmp_path / "budget.json").read_bytes()
    assert hashlib.sha256(body).hexdigest() == hashes["budget.json"]
    doc = json.loads(body)
    f_expect = 1.0 / (2.0 * math.pi * math.sqrt(10e-9 * 101.32e-15))
    assert doc["resonant_frequency_hz"] == pytest.approx(f_expect,
                                                         rel=1e-8)
    assert doc["energy"]["W_E_J"] == pytest.approx(0.25 * 101.32e-15,
                                                   rel=1e-8)
    assert doc["energy"]["W_0_J"] == pytest.approx(0.5 * 101.32e-15,
                                                   rel=1e-8)
    assert doc["loss"]["Q_total"] == pytest.approx(3.24675e7, rel=1e-4)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "budget"
    assert manifest["artifacts"] == hashes
    assert manifest["config"]["circuit"]["c_ff"] == 101.32


def test_budget_channel_validation(tmp_path):
    cfg = parse_config(json.dumps({
        "circuit": {"channels": [{"label": "oxide", "epr": 3.08e-5}]},
    }))
    with pytest.raises(ConfigError):
        run_command("budget", cfg, out_dir=str(tmp_path))


def test_solve_and_epr_artifacts(tmp_path):
    cfg = parse_config(json.dumps({"geometry": PLATE_GEO}))
    out = tmp_path / "solve"
    hashes = run_command("solve", cfg, out_dir=str(out))
    assert set(hashes) == {"solution.csv", "solve.json"}
    doc = json.loads((out / "solve.json").read_text())
    assert doc["dof_count"] > 0
    assert doc["final_residual"] <= 1e-10
    c_exact = 8.8541878128e-12 * 200.0 / 95.5
    assert doc["capacitance_F_per_m"] == pytest.approx(c_exact, rel=1e-6)

    out2 = tmp_path / "epr"
    hashes = run_command("epr", cfg, out_dir=str(out2))
    assert set(hashes) == {"epr.csv", "epr.json"}
    lines = (out2 / "epr.csv").read_text().splitlines()
    assert lines[0] == "region_id,kind,epr,W_E_per_m,C_per_m,Q"
    assert len(lines) == 3  # vacuum + one oxide region
    doc = json.loads((out2 / "epr.json").read_text())
    eprs = [r["epr"] for r in doc["regions"].values()]
    assert sum(eprs) == pytest.approx(1.0, abs=1e-6)


def test_format_filter_keeps_plain_text(tmp_path):
    cfg = parse_config(json.dumps({
        "geometry": PLATE_GEO,
        "output": {"formats": ["csv"]},
    }))
    hashes = run_command("mesh-dump", cfg, out_dir=str(tmp_path))
    assert set(hashes) == {"mesh.txt"}  # json filtered, txt kept
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["manifest.json", "mesh.txt"]


def test_seed_mesh_reproduces_solution(tmp_path):
    cfg = parse_config(json.dumps({"geometry": PLATE_GEO}))
    dump = tmp_path / "dump"
    run_command("mesh-dump", cfg, out_dir=str(dump))
    fresh = tmp_path / "fresh"
    seeded = tmp_path / "seeded"
    run_command("epr", cfg, out_dir=str(fresh))
    run_command("epr", cfg, out_dir=str(seeded),
                seed_mesh=str(dump / "mesh.txt"))
    assert (fresh / "epr.csv").read_bytes() == \
        (seeded / "epr.csv").read_bytes()


def test_sweep_artifacts(tmp_path):
    cfg = parse_config(json.dumps({
        "geometry": SMALL_GEO,
        "materials": {"oxide": {"permittivity": 10.0,
                                "loss_tangent": 1e-3}},
        "study": {"variable": "oxide_thickness", "values": [5.0, 10.0],
                  "strategy": "moving_mesh"},
    }))
    hashes = run_command("sweep", cfg, out_dir=str(tmp_path))
    assert set(hashes) == {"sweep.csv", "sweep.json"}
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "variable,value,region_id,epr,W_E_per_m,C_per_m"
    doc = json.loads((tmp_path / "sweep.json").read_text())
    assert doc["sweep"]["values"] == [5.0, 10.0]
    assert len(set(doc["mesh_hashes"])) == 1


def test_sweep_needs_variable(tmp_path):
    cfg = parse_config(json.dumps({"geometry": SMALL_GEO}))
    with pytest.raises(ConfigError):
        run_command("sweep", cfg, out_dir=str(tmp_path))


def test_converge_artifacts(tmp_path):
    cfg = parse_config(json.dumps({
        "geometry": dict(SMALL_GEO, oxide_thickness_nm=25.0),
        "study": {"max_refinements": 2, "tolerance": 0.5},
    }))
    hashes = run_command("converge", cfg, out_dir=str(tmp_path))
    assert set(hashes) == {"convergence.csv", "convergence.json"}
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0] == "order,level,dof,epr_oxide,delta"
    assert len(lines) == 7  # two orders, three levels each
    doc = json.loads((tmp_path / "convergence.json").read_text())
    assert set(doc["orders"]) == {"1", "2"}
    assert len(doc["orders"]["1"]["dof"]) == 3


def test_edge_fit_artifacts(tmp_path):
    cfg = parse_config(json.dumps({
        "geometry": {"kind": "step", "width_nm": 2000.0,
                     "height_nm": 2000.0, "block_x0_nm": 800.0,
                     "block_x1_nm": 1400.0, "block_height_nm": 600.0},
        "solver": {"order": 2},
        "study": {"corner": "exterior", "n_samples": 48,
                  "window_nm": [4.0, 100.0]},
    }))
    hashes = run_command("edge-fit", cfg, out_dir=str(tmp_path))
    assert set(hashes) == {"edge_profile.csv", "edge_fit.json"}
    doc = json.loads((tmp_path / "edge_fit.json").read_text())
    assert doc["fit"]["exponent"] == pytest.approx(-1.0 / 3.0, abs=0.05)
    assert doc["fit"]["r_squared"] > 0.98
    lines = (tmp_path / "edge_profile.csv").read_text().splitlines()
    assert lines[0] == "rho_nm,E_V_per_nm"


def test_edge_fit_unknown_corner(tmp_path):
    cfg = parse_config(json.dumps({
        "geometry": {"kind": "step", "width_nm": 2000.0,
                     "height_nm": 2000.0, "block_x0_nm": 800.0,
                     "block_x1_nm": 1400.0, "block_height_nm": 600.0},
        "study": {"corner": "top"},
    }))
    with pytest.raises(ConfigError) as excinfo:
        run_command("edge-fit", cfg, out_dir=str(tmp_path))
    assert "exterior" in str(excinfo.value)


def test_geometry_kind_requires_shape_keys(tmp_path):
    cfg = parse_config(json.dumps(
        {"geometry": {"kind": "parallel_plate", "gap_nm": 100.0}}))
    with pytest.raises(ConfigError) as excinfo:
        run_command("solve", cfg, out_dir=str(tmp_path))
    assert "width_nm" in str(excinfo.value)


def test_failed_run_writes_nothing(tmp_path):
    out = tmp_path / "out"
    config = _write(tmp_path, {
        "geometry": dict(SMALL_GEO, oxide_thickness_nm=1.0),
    })
    code = main(["epr", "--config", config, "--out", str(out)])
    assert code == 3  # shell thinner than the mesh can resolve
    assert not out.exists()


def test_main_exit_codes(tmp_path, capsys):
    assert main([]) == 2

    code = main(["solve", "--config", str(tmp_path / "absent.json")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFound"

    bad = _write(tmp_path, {"geometry": {"film_thickness": 1.0}},
                 "bad.json")
    code = main(["solve", "--config", bad])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "UnitMismatch"

    config = _write(tmp_path, {"geometry": PLATE_GEO}, "ok.json")
    code = main(["budget", "--config", config, "--out",
                 str(tmp_path / "b"), "--threads", "0"])
    assert code == 2


def test_main_runs_budget(tmp_path):
    config = _write(tmp_path, {"circuit": {"channels": []}})
    out = tmp_path / "out"
    assert main(["budget", "--config", config, "--out", str(out)]) == 0
    assert (out / "budget.json").exists()
    assert (out / "manifest.json").exists()


def test_log_level_from_environment(tmp_path, monkeypatch, capsys):
    config = _write(tmp_path, {})
    out = tmp_path / "out"
    monkeypatch.setenv("QSURF_LOG", "chatty")
    assert main(["budget", "--config", config, "--out", str(out)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"
    monkeypatch.setenv("QSURF_LOG", "info")
    assert main(["budget", "--config", config, "--out", str(out)]) == 0


def test_unknown_subcommand_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["transmogrify", "--config", "x.json"])
    assert excinfo.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_parser_lists_all_commands():
    parser = build_parser()
    text = parser.format_help()
    for name in ("solve", "epr", "edge-fit", "sweep", "converge",
                 "budget", "mesh-dump"):
        assert name in text
