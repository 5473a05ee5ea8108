"""Parameter studies over the geometry -> mesh -> solve -> analysis chain.

Four study families: film-thickness sweep with linear extrapolation to
the nm range, substrate-permittivity sweep against the series-capacitor
limit, trench-depth sweep, and a mesh-convergence ladder.  Thickness and
trench sweeps can reuse one mesh by flipping virtual-layer materials, so
every point sees identical node coordinates.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .analysis import EnergyReport, epr_by_kind, flat_surface_epr, \
    region_energies
from .errors import (
    DomainError,
    GeometryError,
    InsufficientPoints,
    MeshFailure,
    NonConvergence,
    WrongVariable,
)
from .fem import fmt9, solve_mesh
from .geometry import (
    CrossSectionSpec,
    MaterialTag,
    OxideLayer,
    build_cross_section,
    build_virtual_layers,
)
from .meshing import (
    SizeField,
    generate_mesh,
    reassign_materials,
    recommended_size_field,
    refine_uniform,
)

SWEEP_VARIABLES = ("oxide_thickness", "permittivity", "trench_depth",
                   "refinement_level")
SWEEP_STRATEGIES = ("moving_mesh", "remesh")

DEFAULT_EXTRAPOLATION_THRESHOLD_NM = 30.0
DEFAULT_SHELL_STEPS_NM = (5.0, 20.0, 25.0, 50.0)   # cumulative 5/25/50/100
DEFAULT_TRENCH_DEPTHS_NM = (0.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0)


@dataclass(frozen=True)
class SweepSpec:
    """One swept variable over a base cross-section."""

    base: CrossSectionSpec
    variable: str
    values: tuple
    order: int = 1
    strategy: str = "remesh"
    rel_tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v)
                                                 for v in self.values))
        if self.variable not in SWEEP_VARIABLES:
            raise DomainError(f"unknown sweep variable {self.variable!r}")
        if self.strategy not in SWEEP_STRATEGIES:
            raise DomainError(f"unknown sweep strategy {self.strategy!r}")
        if len(self.values) < 1:
            raise DomainError("sweep needs at least one value")
        if not all(b > a for a, b in zip(self.values, self.values[1:])):
            raise DomainError("sweep values must be strictly increasing")
        if self.strategy == "moving_mesh" and self.variable not in (
                "oxide_thickness", "trench_depth"):
            raise DomainError(
                "moving_mesh applies to oxide_thickness and trench_depth "
                "sweeps only")
        if self.order not in (1, 2):
            raise DomainError("element order must be 1 or 2")


@dataclass(frozen=True)
class SweepResult:
    """Reports per swept value, in input order, with mesh provenance."""

    spec: SweepSpec
    points: tuple                # ((value, EnergyReport), ...)
    mesh_hashes: tuple           # one per point
    timings_s: tuple | None      # None unless timing was requested

    def oxide_epr_series(self) -> tuple:
        return tuple((v, epr_by_kind(rep).get("oxide", 0.0))
                     for v, rep in self.points)

    def csv_lines(self) -> list:
        lines = ["variable,value,region_id,epr,W_E_per_m,C_per_m"]
        for value, rep in self.points:
            cap = rep.capacitance_per_length
            for rid in sorted(rep.region_energy):
                lines.append(",".join([
                    self.spec.variable,
                    fmt9(value),
                    str(rid),
                    fmt9(rep.epr[rid]),
                    fmt9(rep.region_energy[rid]),
                    fmt9(cap),
                ]))
        return lines

    def manifest_dict(self) -> dict:
        base = self.spec.base
        return {
            "tool": "qsurf",
            "version": __version__,
            "sweep": {
                "variable": self.spec.variable,
                "values": list(self.spec.values),
                "order": self.spec.order,
                "strategy": self.spec.strategy,
                "rel_tol": self.spec.rel_tol,
            },
            "base_spec": {
                "film_thickness_nm": base.film_thickness_nm,
                "sidewall_angle_deg": base.sidewall_angle_deg,
                "r_top_nm": base.r_top_nm,
                "r_bottom_nm": base.r_bottom_nm,
                "trench_depth_nm": base.trench_depth_nm,
                "oxide_layers": [
                    [l.thickness_nm, l.permittivity, l.loss_tangent]
                    for l in base.oxide_layers
                ],
                "substrate_permittivity": base.substrate_permittivity,
                "substrate_depth_nm": base.substrate_depth_nm,
                "gap_halfwidth_nm": base.gap_halfwidth_nm,
                "domain_width_nm": base.domain_width_nm,
                "domain_height_nm": base.domain_height_nm,
                "electrode_voltage": base.electrode_voltage,
            },
            "mesh_hashes": list(self.mesh_hashes),
            "timings_s": (
                list(self.timings_s) if self.timings_s is not None else None),
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class ExtrapolationResult:
    """Linear fit of epr vs thickness above a validity threshold."""

    slope_per_nm: float
    intercept: float
    threshold_nm: float
    target_nm: float
    predicted_epr: float
    residual_rms: float
    n_points: int


@dataclass(frozen=True)
class ConvergenceReport:
    """(DOF, epr) ladders per element order under nested refinement."""

    series: dict                 # order -> ((dof, epr), ...)
    deltas: dict                 # order -> successive relative changes
    converged: dict              # order -> bool
    tolerance: float


def _oxide_template(base: CrossSectionSpec) -> tuple:
    if not base.oxide_layers:
        raise DomainError(
            "oxide_thickness sweep needs a template oxide layer on the "
            "base spec")
    layer = base.oxide_layers[0]
    return layer.permittivity, layer.loss_tangent


def _point_spec(spec: SweepSpec, value: float) -> CrossSectionSpec:
    base = spec.base
    if spec.variable == "oxide_thickness":
        eps, tan = _oxide_template(base)
        return base.with_layers((OxideLayer(value, eps, tan),))
    if spec.variable == "permittivity":
        if not base.oxide_layers:
            raise DomainError(
                "permittivity sweep varies the film permittivity; the "
                "base spec needs an oxide layer")
        layer = base.oxide_layers[0]
        return base.with_layers((OxideLayer(layer.thickness_nm, value,
                                            layer.loss_tangent),))
    if spec.variable == "trench_depth":
        return replace(base, trench_depth_nm=value)
    return base  # refinement_level reuses the base geometry


def _solve_report(mesh, rel_tol, materials=None):
    solution = solve_mesh(mesh, rel_tol=rel_tol, materials=materials)
    return region_energies(solution, mesh, materials=materials)


def _tag_point(exc, index, value):
    """Re-raise a pipeline error annotated with the sweep point."""
    note = f"sweep point {index} (value {value:g}): {exc}"
    if isinstance(exc, MeshFailure):
        raise MeshFailure(note, region_id=exc.region_id) from exc
    if isinstance(exc, NonConvergence):
        raise NonConvergence(note, residual_history=exc.residual_history) \
            from exc
    raise type(exc)(note) from exc


def _run_remesh(spec: SweepSpec, threads: int, record_timings: bool):
    def one(i):
        value = spec.values[i]
        t0 = time.perf_counter()
        try:
            point = _point_spec(spec, value)
            rset = build_cross_section(point)
            mesh = generate_mesh(rset, order=spec.order)
            if spec.variable == "refinement_level":
                for _ in range(int(round(value))):
                    mesh = refine_uniform(mesh)
            report = _solve_report(mesh, spec.rel_tol)
        except (MeshFailure, NonConvergence, GeometryError) as exc:
            _tag_point(exc, i, value)
        return report, mesh.content_hash(), time.perf_counter() - t0

    results = [None] * len(spec.values)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, out in enumerate(pool.map(one, range(len(spec.values)))):
                results[i] = out
    else:
        for i in range(len(spec.values)):
            results[i] = one(i)
    reports = tuple((spec.values[i], results[i][0])
                    for i in range(len(spec.values)))
    hashes = tuple(r[1] for r in results)
    times = tuple(r[2] for r in results) if record_timings else None
    return reports, hashes, times


def _shell_materials(n_oxide, n_total, eps, tan):
    """Materials for the first n_oxide shells set to oxide, rest vacuum."""
    out = {}
    for j in range(1, n_total + 1):
        if j <= n_oxide:
            out[("shell", j)] = MaterialTag(
                kind="oxide", layer_index=j, permittivity=eps,
                loss_tangent=tan)
        else:
            out[("shell", j)] = MaterialTag(
                kind="virtual", layer_index=j, permittivity=1.0,
                virtual_role="shell")
    return out


def _slab_materials(n_etched, n_total, eps_substrate):
    """Materials with the first n_etched slabs turned to vacuum."""
    out = {}
    for j in range(1, n_total + 1):
        if j <= n_etched:
            out[("slab", j)] = MaterialTag(
                kind="vacuum", layer_index=j)
        else:
            out[("slab", j)] = MaterialTag(
                kind="substrate", layer_index=j,
                permittivity=eps_substrate)
    return out


def _run_moving(spec: SweepSpec, threads: int, record_timings: bool):
    base = spec.base
    values = spec.values
    if spec.variable == "oxide_thickness":
        if any(v <= 0 for v in values):
            raise DomainError("oxide thicknesses must be > 0")
        eps, tan = _oxide_template(base)
        steps = [values[0]] + [b - a for a, b in zip(values, values[1:])]
        rset = build_virtual_layers(base, shell_thicknesses_nm=steps)
        assignments = [
            _shell_materials(i + 1, len(steps), eps, tan)
            for i in range(len(values))
        ]
    else:  # trench_depth
        if base.trench_depth_nm != 0.0:
            raise DomainError(
                "moving-mesh trench sweep needs base trench_depth_nm = 0")
        if values[0] < 0:
            raise DomainError("trench depths must be >= 0")
        depths = [v for v in values if v > 0]
        if not depths:
            raise DomainError("trench sweep needs a positive depth")
        steps = [depths[0]] + [b - a for a, b in zip(depths, depths[1:])]
        # The film itself rides along as one shell pinned to oxide.
        if not base.oxide_layers:
            raise DomainError("trench sweep needs an oxide layer")
        layer = base.oxide_layers[0]
        rset = build_virtual_layers(
            base, shell_thicknesses_nm=(layer.thickness_nm,),
            trench_slab_thicknesses_nm=steps)
        pinned = _shell_materials(1, 1, layer.permittivity,
                                  layer.loss_tangent)
        assignments = []
        for v in values:
            n_etched = sum(1 for d in depths if d <= v + 1e-12)
            mats = dict(pinned)
            mats.update(_slab_materials(n_etched, len(steps),
                                        base.substrate_permittivity))
            assignments.append(mats)

    mesh0 = generate_mesh(rset, order=spec.order)
    meshes = [reassign_materials(mesh0, a) for a in assignments]

    def one(i):
        t0 = time.perf_counter()
        try:
            report = _solve_report(meshes[i], spec.rel_tol)
        except (NonConvergence, MeshFailure) as exc:
            _tag_point(exc, i, values[i])
        return report, time.perf_counter() - t0

    results = [None] * len(values)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, out in enumerate(pool.map(one, range(len(values)))):
                results[i] = out
    else:
        for i in range(len(values)):
            results[i] = one(i)
    reports = tuple((values[i], results[i][0]) for i in range(len(values)))
    hashes = tuple(m.content_hash() for m in meshes)
    times = tuple(r[1] for r in results) if record_timings else None
    return reports, hashes, times


def run_sweep(spec: SweepSpec, threads: int = 1,
              record_timings: bool = False) -> SweepResult:
    """Solve every sweep point and collect energy reports in order.

    Points are independent; with threads > 1 they run concurrently but
    are collected by input index, so results do not depend on worker
    count or completion order.
    """
    if spec.strategy == "moving_mesh":
        reports, hashes, times = _run_moving(spec, threads, record_timings)
    else:
        reports, hashes, times = _run_remesh(spec, threads, record_timings)
    return SweepResult(spec=spec, points=reports, mesh_hashes=hashes,
                       timings_s=times)


def extrapolate_linear(points, threshold_nm: float =
                       DEFAULT_EXTRAPOLATION_THRESHOLD_NM,
                       target_nm: float = 5.0) -> ExtrapolationResult:
    """OLS line through (t, epr) points with t >= threshold, evaluated
    at a target thickness below the fitted range."""
    included = [(float(t), float(e)) for t, e in points
                if t >= threshold_nm]
    if len(included) < 3:
        raise InsufficientPoints(
            f"{len(included)} points at or above {threshold_nm:g} nm; "
            "need at least 3")
    tmin = min(t for t, _ in included)
    if target_nm >= tmin:
        raise DomainError(
            f"target {target_nm:g} nm must lie below the fitted range "
            f"(min included thickness {tmin:g} nm)")
    t = np.array([p[0] for p in included])
    e = np.array([p[1] for p in included])
    slope, intercept = np.polyfit(t, e, 1)
    resid = e - (slope * t + intercept)
    return ExtrapolationResult(
        slope_per_nm=float(slope),
        intercept=float(intercept),
        threshold_nm=float(threshold_nm),
        target_nm=float(target_nm),
        predicted_epr=float(slope * target_nm + intercept),
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        n_points=len(included),
    )


def coarse_size_field(region_set) -> SizeField:
    """Deliberately coarse base grading for refinement ladders, so the
    finest rung stays tractable after repeated 1:4 splits."""
    fine = recommended_size_field(region_set)
    sites = tuple(replace(s, h_nm=4.0 * s.h_nm) for s in fine.corner_sites)
    return SizeField(h_max=2.0 * fine.h_max, corner_sites=sites,
                     grading_rate=min(0.9, 2.0 * fine.grading_rate))


def run_convergence_study(spec: CrossSectionSpec, max_refinements: int,
                          tolerance: float = 0.01,
                          size_field: SizeField | None = None,
                          rel_tol: float = 1e-10) -> ConvergenceReport:
    """Nested-refinement epr ladders for element orders 1 and 2.

    The tracked metric is the oxide participation; convergence means
    the last successive relative change fell below the tolerance.
    """
    if max_refinements < 2:
        raise DomainError("convergence study needs max_refinements >= 2")
    if tolerance <= 0:
        raise DomainError("tolerance must be > 0")
    rset = build_cross_section(spec)
    if size_field is None:
        size_field = coarse_size_field(rset)
    series, deltas, converged = {}, {}, {}
    for order in (1, 2):
        mesh = generate_mesh(rset, size_field=size_field, order=order)
        ladder = []
        for level in range(max_refinements + 1):
            if level > 0:
                mesh = refine_uniform(mesh)
            solution = solve_mesh(mesh, rel_tol=rel_tol)
            report = region_energies(solution, mesh)
            ladder.append((solution.dof_count,
                           epr_by_kind(report).get("oxide", 0.0)))
        series[order] = tuple(ladder)
        d = tuple(abs(b - a) / abs(a)
                  for (_, a), (_, b) in zip(ladder, ladder[1:]))
        deltas[order] = d
        converged[order] = bool(d and d[-1] < tolerance)
    return ConvergenceReport(series=series, deltas=deltas,
                             converged=converged, tolerance=tolerance)


def compare_to_limit(sweep: SweepResult, gap_nm: float,
                     t_nm: float) -> tuple:
    """Per-permittivity ratio of measured oxide epr to the flat
    series-capacitor limit; corner fields make the ratio >= 1."""
    if sweep.spec.variable != "permittivity":
        raise WrongVariable(
            "compare_to_limit needs a permittivity sweep, got "
            f"{sweep.spec.variable!r}")
    out = []
    for eps, epr in sweep.oxide_epr_series():
        out.append((eps, epr / flat_surface_epr(t_nm, eps, gap_nm)))
    return tuple(out)
