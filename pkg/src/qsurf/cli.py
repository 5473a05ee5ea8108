"""Command-line front end: JSON config in, CSV/JSON artifacts out.

Every run stages its artifacts in memory and flushes them through
temp-file renames at the very end, so an interrupted run never leaves a
partial file.  A manifest.json with input echo and artifact hashes is
written on every successful run; identical configs produce byte
identical artifacts regardless of the thread count.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass

from . import __version__
from .analysis import (
    fit_edge_exponent,
    region_energies,
    sample_edge_field,
)
from .circuit import LumpedQubit, energy_balance, loss_budget, \
    resonant_frequency
from .errors import (
    ConfigError,
    ParseError,
    QsurfError,
    UnitMismatch,
    UnknownKey,
)
from .fem import fmt9, solve_mesh, solution_csv_lines
from .geometry import CrossSectionSpec, OxideLayer, build_cross_section
from . import fixtures
from .meshing import (
    generate_mesh,
    load_mesh,
    mesh_quality,
    mesh_text,
    refine_uniform,
)
from .studies import (
    SweepSpec,
    run_convergence_study,
    run_sweep,
)

log = logging.getLogger("qsurf")

COMMANDS = ("solve", "epr", "edge-fit", "sweep", "converge", "budget",
            "mesh-dump")

# Exit codes: 0 ok, 2 config/geometry validation, 3 numerical failure.
VALIDATION_EXIT = 2
NUMERICAL_EXIT = 3

_UNIT_SUFFIXES = ("_nm", "_um", "_deg", "_ghz", "_nh", "_ff", "_volts")

# Schema: section -> key -> default.  None means optional with no
# default; keys absent here are rejected.
_LAYER_KEYS = {"thickness_nm": None, "permittivity": None,
               "loss_tangent": None}
_SCHEMA = {
    "geometry": {
        "kind": "cross_section",
        "film_thickness_nm": 200.0,
        "sidewall_angle_deg": 10.0,
        "r_top_nm": 10.0,
        "r_bottom_nm": 10.0,
        "trench_depth_nm": 0.0,
        "oxide_layers": [{"thickness_nm": 5.0}],
        "oxide_thickness_nm": None,
        "substrate_depth_nm": 5000.0,
        "gap_halfwidth_nm": 5000.0,
        "domain_width_nm": 10000.0,
        "domain_height_nm": 10000.0,
        "voltage": 1.0,
        # fixture-only shape keys
        "gap_nm": None,
        "width_nm": None,
        "height_nm": None,
        "a_nm": None,
        "b_nm": None,
        "block_x0_nm": None,
        "block_x1_nm": None,
        "block_height_nm": None,
        "corner_r_nm": None,
        "layers": None,
    },
    "materials": {
        "oxide": {"permittivity": 10.0, "loss_tangent": 0.0},
        "substrate": {"permittivity": 10.0, "loss_tangent": 0.0},
    },
    "solver": {
        "order": 1,
        "rel_tol": 1e-10,
        "refinement": 0,
    },
    "study": {
        "variable": None,
        "values": None,
        "strategy": "remesh",
        "corner": "top",
        "mode": "ray",
        "window_nm": None,
        "n_samples": 96,
        "offset_nm": 2.0,
        "threshold_nm": 30.0,
        "target_nm": 5.0,
        "max_refinements": 3,
        "tolerance": 0.01,
        "record_timings": False,
    },
    "circuit": {
        "l_j_nh": 10.0,
        "c_ff": 101.32,
        "v_volts": 1.0,
        "frequency_ghz": 5.0,
        "channels": [],
    },
    "output": {
        "directory": ".",
        "formats": ["csv", "json"],
    },
}

_MATERIAL_KEYS = {"permittivity": None, "loss_tangent": None}
_CHANNEL_KEYS = {"label": None, "epr": None, "tan_delta": None}


@dataclass(frozen=True)
class RunConfig:
    """Fully defaulted and validated run configuration."""

    geometry: dict
    materials: dict
    solver: dict
    study: dict
    circuit: dict
    output: dict

    def echo_dict(self) -> dict:
        return {
            "geometry": self.geometry,
            "materials": self.materials,
            "solver": self.solver,
            "study": self.study,
            "circuit": self.circuit,
            "output": self.output,
        }

    def echo_json(self) -> str:
        return json.dumps(self.echo_dict(), indent=2, sort_keys=True)


def _suffix_hint(key: str, known: dict, where: str):
    """Distinguish a missing/wrong unit suffix from a truly unknown key."""
    stems = {}
    for k in known:
        for suf in _UNIT_SUFFIXES:
            if k.endswith(suf):
                stems[k[: -len(suf)]] = k
    if key in stems:
        raise UnitMismatch(
            f"{where}: key {key!r} is missing its unit suffix; "
            f"write {stems[key]!r}")
    for suf in _UNIT_SUFFIXES:
        if key.endswith(suf) and key[: -len(suf)] in stems:
            want = stems[key[: -len(suf)]]
            if key != want:
                raise UnitMismatch(
                    f"{where}: key {key!r} uses the wrong unit; "
                    f"write {want!r}")
    raise UnknownKey(f"{where}: unknown key {key!r}")


def _convert_units(key: str, value, known: dict, where: str):
    """Map supported alternate units onto the schema key."""
    if key in known:
        return key, value
    if key.endswith("_um") and key[:-3] + "_nm" in known:
        factor = 1000.0
        target = key[:-3] + "_nm"
        if isinstance(value, list):
            return target, [v * factor for v in value]
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return target, value * factor
        raise ConfigError(f"{where}: {key!r} must be numeric")
    _suffix_hint(key, known, where)


def _check_dict(raw, known: dict, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    out = {}
    for key in sorted(raw):
        target, value = _convert_units(key, raw[key], known, where)
        out[target] = value
    return out


def _numeric(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number")
    return float(value)


def _normalize_layers(entries, where: str) -> list:
    if not isinstance(entries, list):
        raise ConfigError(f"{where} must be a list of layer objects")
    out = []
    for i, entry in enumerate(entries):
        layer = _check_dict(entry, _LAYER_KEYS, f"{where}[{i}]")
        if "thickness_nm" not in layer:
            raise ConfigError(f"{where}[{i}] needs thickness_nm")
        _numeric(layer["thickness_nm"], f"{where}[{i}].thickness_nm")
        out.append(layer)
    return out


def parse_config(text: str) -> RunConfig:
    """Validate config text against the schema, filling in defaults.

    Unknown keys are rejected; dimensioned keys must carry their unit
    suffix (micrometer variants of _nm keys are converted).
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"config is not valid JSON: {exc.msg} "
            f"(line {exc.lineno}, column {exc.colno})") from exc
    if not isinstance(raw, dict):
        raise ParseError("config top level must be a JSON object")

    sections = {}
    for name in sorted(raw):
        if name not in _SCHEMA:
            raise UnknownKey(f"unknown config section {name!r}")
    for name, schema in _SCHEMA.items():
        given = _check_dict(raw.get(name, {}), schema, name)
        merged = {}
        for key, default in schema.items():
            if key in given:
                merged[key] = given[key]
            elif default is not None:
                merged[key] = json.loads(json.dumps(default))
        sections[name] = merged

    geo = sections["geometry"]
    if geo["kind"] not in ("cross_section", "parallel_plate", "coax",
                           "step"):
        raise ConfigError(f"unknown geometry kind {geo['kind']!r}")
    if "oxide_layers" in geo:
        geo["oxide_layers"] = _normalize_layers(
            geo["oxide_layers"], "geometry.oxide_layers")
    if "layers" in geo and geo["layers"] is not None:
        geo["layers"] = _normalize_layers(geo["layers"], "geometry.layers")
    for tag in ("oxide", "substrate"):
        sections["materials"][tag] = _check_dict(
            sections["materials"].get(tag, {}), _MATERIAL_KEYS,
            f"materials.{tag}")
    sol = sections["solver"]
    if sol["order"] not in (1, 2):
        raise ConfigError("solver.order must be 1 or 2")
    if not isinstance(sol["refinement"], int) or sol["refinement"] < 0:
        raise ConfigError("solver.refinement must be a non-negative integer")
    channels = sections["circuit"]["channels"]
    if not isinstance(channels, list):
        raise ConfigError("circuit.channels must be a list")
    sections["circuit"]["channels"] = [
        _check_dict(c, _CHANNEL_KEYS, f"circuit.channels[{i}]")
        for i, c in enumerate(channels)
    ]
    return RunConfig(**sections)


def _cross_section_spec(config: RunConfig) -> CrossSectionSpec:
    geo, mats = config.geometry, config.materials
    ox_default = mats["oxide"]
    layers = []
    entries = geo.get("oxide_layers", [])
    if geo.get("oxide_thickness_nm") is not None:
        entries = [{"thickness_nm": geo["oxide_thickness_nm"]}]
    for entry in entries:
        layers.append(OxideLayer(
            thickness_nm=float(entry["thickness_nm"]),
            permittivity=float(entry.get(
                "permittivity", ox_default.get("permittivity", 10.0))),
            loss_tangent=float(entry.get(
                "loss_tangent", ox_default.get("loss_tangent", 0.0))),
        ))
    return CrossSectionSpec(
        film_thickness_nm=geo["film_thickness_nm"],
        sidewall_angle_deg=geo["sidewall_angle_deg"],
        r_top_nm=geo["r_top_nm"],
        r_bottom_nm=geo["r_bottom_nm"],
        trench_depth_nm=geo["trench_depth_nm"],
        oxide_layers=tuple(layers),
        substrate_permittivity=float(
            mats["substrate"].get("permittivity", 10.0)),
        substrate_depth_nm=geo["substrate_depth_nm"],
        gap_halfwidth_nm=geo["gap_halfwidth_nm"],
        domain_width_nm=geo["domain_width_nm"],
        domain_height_nm=geo["domain_height_nm"],
        electrode_voltage=geo["voltage"],
    )


def _require(geo: dict, keys, kind: str):
    missing = [k for k in keys if geo.get(k) is None]
    if missing:
        raise ConfigError(
            f"geometry kind {kind!r} needs keys: {', '.join(missing)}")


def _region_set(config: RunConfig):
    geo = config.geometry
    kind = geo["kind"]
    if kind == "cross_section":
        return build_cross_section(_cross_section_spec(config))
    if kind == "parallel_plate":
        _require(geo, ("gap_nm", "width_nm"), kind)
        raw = geo.get("layers") or []
        ox = config.materials["oxide"]
        layers = tuple(
            (entry["thickness_nm"],
             entry.get("permittivity", ox.get("permittivity", 10.0)),
             entry.get("loss_tangent", ox.get("loss_tangent", 0.0)))
            for entry in raw)
        return fixtures.parallel_plate(
            gap_nm=geo["gap_nm"], width_nm=geo["width_nm"], layers=layers,
            voltage=geo["voltage"])
    if kind == "coax":
        _require(geo, ("a_nm", "b_nm"), kind)
        return fixtures.coax_halves(a_nm=geo["a_nm"], b_nm=geo["b_nm"],
                                    voltage=geo["voltage"])
    _require(geo, ("width_nm", "height_nm", "block_x0_nm", "block_x1_nm",
                   "block_height_nm"), kind)
    return fixtures.stepped_conductor(
        width_nm=geo["width_nm"], height_nm=geo["height_nm"],
        block_x0_nm=geo["block_x0_nm"], block_x1_nm=geo["block_x1_nm"],
        block_height_nm=geo["block_height_nm"],
        corner_r_nm=geo.get("corner_r_nm") or 0.0,
        voltage=geo["voltage"])


def _round9(value):
    """9-significant-digit copy of a JSON-ready structure."""
    if isinstance(value, float):
        return float(fmt9(value)) if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _round9(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round9(v) for v in value]
    return value


def _json_text(doc) -> str:
    return json.dumps(_round9(doc), indent=2, sort_keys=True) + "\n"


def _solution_pipeline(config: RunConfig, seed_mesh: str | None):
    rset = _region_set(config)
    sol_cfg = config.solver
    if seed_mesh:
        mesh = load_mesh(seed_mesh)
        log.info("loaded seed mesh: %d vertices", mesh.num_vertices)
    else:
        t0 = time.perf_counter()
        mesh = generate_mesh(rset, order=sol_cfg["order"])
        log.info("meshed %d vertices in %.2f s", mesh.num_vertices,
                 time.perf_counter() - t0)
    for _ in range(sol_cfg["refinement"]):
        mesh = refine_uniform(mesh)
    t0 = time.perf_counter()
    solution = solve_mesh(mesh, rel_tol=sol_cfg["rel_tol"])
    log.info("solved %d dof in %d iterations (%.2f s)",
             solution.dof_count, solution.iterations,
             time.perf_counter() - t0)
    return rset, mesh, solution


def _cmd_solve(config, threads, seed_mesh):
    _, mesh, solution = _solution_pipeline(config, seed_mesh)
    report = region_energies(solution, mesh)
    artifacts = {
        "solution.csv": "\n".join(solution_csv_lines(solution)) + "\n",
        "solve.json": _json_text({
            "dof_count": solution.dof_count,
            "order": solution.order,
            "iterations": solution.iterations,
            "final_residual": solution.final_residual,
            "mesh_hash": mesh.content_hash(),
            "total_energy_J_per_m": report.total_energy,
            "capacitance_F_per_m": report.capacitance_per_length,
        }),
    }
    return artifacts


def _epr_csv(report) -> str:
    lines = ["region_id,kind,epr,W_E_per_m,C_per_m,Q"]
    cap = report.capacitance_per_length
    for rid in sorted(report.region_energy):
        q = report.q_factors[rid]
        lines.append(",".join([
            str(rid),
            report.region_kinds[rid],
            fmt9(report.epr[rid]),
            fmt9(report.region_energy[rid]),
            fmt9(cap),
            fmt9(q) if math.isfinite(q) else "inf",
        ]))
    return "\n".join(lines) + "\n"


def _cmd_epr(config, threads, seed_mesh):
    _, mesh, solution = _solution_pipeline(config, seed_mesh)
    report = region_energies(solution, mesh)
    return {
        "epr.csv": _epr_csv(report),
        "epr.json": _json_text({
            "regions": report.as_json_dict(),
            "total_energy_J_per_m": report.total_energy,
            "capacitance_F_per_m": report.capacitance_per_length,
            "voltage": report.voltage,
            "mesh_hash": mesh.content_hash(),
        }),
    }


def _cmd_edge_fit(config, threads, seed_mesh):
    rset, mesh, solution = _solution_pipeline(config, seed_mesh)
    study = config.study
    mode = study["mode"]
    corner = None
    if mode == "ray":
        name = study["corner"]
        if name not in rset.corners:
            raise ConfigError(
                f"geometry has no corner {name!r}; available: "
                f"{', '.join(sorted(rset.corners)) or 'none'}")
        corner = rset.corners[name]
    profile = sample_edge_field(
        solution, mesh, corner, mode=mode,
        offset_nm=study["offset_nm"], n_samples=study["n_samples"])
    doc = {"profile": profile.description}
    artifacts = {"edge_profile.csv": "\n".join(profile.csv_lines()) + "\n"}
    if mode == "ray":
        window = study.get("window_nm")
        fit = fit_edge_exponent(
            profile, tuple(window) if window else None)
        doc["fit"] = {
            "exponent": fit.exponent,
            "window_nm": list(fit.window_nm),
            "r_squared": fit.r_squared,
            "n_samples": fit.n_samples,
        }
    artifacts["edge_fit.json"] = _json_text(doc)
    return artifacts


def _cmd_sweep(config, threads, seed_mesh):
    study = config.study
    if study.get("variable") is None or study.get("values") is None:
        raise ConfigError("sweep needs study.variable and study.values")
    spec = SweepSpec(
        base=_cross_section_spec(config),
        variable=study["variable"],
        values=tuple(study["values"]),
        order=config.solver["order"],
        strategy=study["strategy"],
        rel_tol=config.solver["rel_tol"],
    )
    result = run_sweep(spec, threads=threads,
                       record_timings=study["record_timings"])
    return {
        "sweep.csv": "\n".join(result.csv_lines()) + "\n",
        "sweep.json": _json_text(result.manifest_dict()),
    }


def _cmd_converge(config, threads, seed_mesh):
    study = config.study
    report = run_convergence_study(
        _cross_section_spec(config),
        max_refinements=study["max_refinements"],
        tolerance=study["tolerance"],
        rel_tol=config.solver["rel_tol"])
    lines = ["order,level,dof,epr_oxide,delta"]
    doc = {"tolerance": report.tolerance, "orders": {}}
    for order in sorted(report.series):
        ladder = report.series[order]
        deltas = report.deltas[order]
        for level, (dof, epr) in enumerate(ladder):
            delta = deltas[level - 1] if level > 0 else ""
            lines.append(",".join([
                str(order), str(level), str(dof), fmt9(epr),
                fmt9(delta) if delta != "" else ""]))
        doc["orders"][str(order)] = {
            "dof": [d for d, _ in ladder],
            "epr_oxide": [e for _, e in ladder],
            "deltas": list(deltas),
            "converged": report.converged[order],
        }
    return {
        "convergence.csv": "\n".join(lines) + "\n",
        "convergence.json": _json_text(doc),
    }


def _cmd_budget(config, threads, seed_mesh):
    cir = config.circuit
    qubit = LumpedQubit(
        josephson_inductance_h=cir["l_j_nh"] * 1e-9,
        capacitance_f=cir["c_ff"] * 1e-15,
        voltage_v=cir["v_volts"])
    freq = cir["frequency_ghz"] * 1e9
    balance = energy_balance(qubit)
    channels = []
    for i, ch in enumerate(cir["channels"]):
        for key in ("label", "epr", "tan_delta"):
            if key not in ch:
                raise ConfigError(f"circuit.channels[{i}] needs {key!r}")
        channels.append((ch["label"], ch["epr"], ch["tan_delta"]))
    budget = loss_budget(channels, freq)
    return {
        "budget.json": _json_text({
            "resonant_frequency_hz": resonant_frequency(qubit),
            "energy": {
                "W_E_J": balance.w_e,
                "W_H_J": balance.w_h,
                "W_Q_J": balance.w_q,
                "W_0_J": balance.w_0,
            },
            "loss": budget.as_json_dict(),
        }),
    }


def _cmd_mesh_dump(config, threads, seed_mesh):
    rset = _region_set(config)
    if seed_mesh:
        mesh = load_mesh(seed_mesh)
    else:
        mesh = generate_mesh(rset, order=config.solver["order"])
    for _ in range(config.solver["refinement"]):
        mesh = refine_uniform(mesh)
    return {
        "mesh.txt": mesh_text(mesh),
        "mesh_quality.json": _json_text(mesh_quality(mesh)),
    }


_DISPATCH = {
    "solve": _cmd_solve,
    "epr": _cmd_epr,
    "edge-fit": _cmd_edge_fit,
    "sweep": _cmd_sweep,
    "converge": _cmd_converge,
    "budget": _cmd_budget,
    "mesh-dump": _cmd_mesh_dump,
}


def _write_atomic(directory: str, name: str, text: str) -> str:
    path = os.path.join(directory, name)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_command(command: str, config: RunConfig, out_dir: str | None = None,
                threads: int = 1, seed_mesh: str | None = None) -> dict:
    """Execute one subcommand; returns {artifact name: sha256}.

    Artifacts are staged in memory and flushed at the end, followed by
    a manifest.json hashing everything written.
    """
    if command not in _DISPATCH:
        raise ConfigError(f"unknown command {command!r}")
    directory = out_dir or config.output["directory"]
    formats = config.output["formats"]
    artifacts = _DISPATCH[command](config, threads, seed_mesh)
    keep = {}
    for name, text in artifacts.items():
        ext = name.rsplit(".", 1)[-1]
        if ext in ("csv", "json") and ext not in formats:
            continue
        keep[name] = text

    os.makedirs(directory, exist_ok=True)
    hashes = {}
    for name in sorted(keep):
        hashes[name] = _write_atomic(directory, name, keep[name])
        log.info("wrote %s (%s)", name, hashes[name][:12])
    manifest = {
        "tool": "qsurf",
        "version": __version__,
        "command": command,
        "config": config.echo_dict(),
        "artifacts": hashes,
    }
    _write_atomic(directory, "manifest.json",
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return hashes


def _setup_logging():
    level_name = os.environ.get("QSURF_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(
            f"QSURF_LOG must be one of {sorted(levels)}, "
            f"got {level_name!r}")
    logging.basicConfig(
        level=levels[level_name], stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s")


def _error_exit(exc: QsurfError) -> int:
    from .errors import (
        InsufficientPoints,
        InsufficientSamples,
        MeshFailure,
        NonConvergence,
        NonVacuumSolve,
        PointOutsideDomain,
        SingularSystem,
    )
    numerical = (MeshFailure, NonConvergence, SingularSystem,
                 NonVacuumSolve, PointOutsideDomain, InsufficientSamples,
                 InsufficientPoints)
    code = NUMERICAL_EXIT if isinstance(exc, numerical) else VALIDATION_EXIT
    doc = {"error": type(exc).__name__, "message": str(exc),
           "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qsurf",
        description="Cross-section electrostatics and surface-loss "
                    "budgets for thin-film circuits.")
    parser.add_argument("--version", action="version",
                        version=f"qsurf {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "solve": "solve the field and export sampled E values",
        "epr": "energy participation ratios per region",
        "edge-fit": "corner field profile and power-law fit",
        "sweep": "parameter sweep with CSV and manifest output",
        "converge": "mesh-refinement convergence ladder",
        "budget": "lumped-circuit frequency, energies and loss budget",
        "mesh-dump": "generate and export the mesh with quality stats",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", required=True,
                        help="path to the JSON run configuration")
        sp.add_argument("--out", default=None,
                        help="output directory (default: from config)")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker cap for sweep points")
        sp.add_argument("--seed-mesh", default=None,
                        help="reuse a previously exported mesh file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return VALIDATION_EXIT
    try:
        _setup_logging()
        with open(args.config, encoding="utf-8") as fh:
            config = parse_config(fh.read())
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run_command(args.command, config, out_dir=args.out,
                    threads=args.threads, seed_mesh=args.seed_mesh)
    except FileNotFoundError as exc:
        doc = {"error": "FileNotFound", "message": str(exc),
               "exit_code": VALIDATION_EXIT}
        print(json.dumps(doc, sort_keys=True), file=sys.stderr)
        return VALIDATION_EXIT
    except QsurfError as exc:
        return _error_exit(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
