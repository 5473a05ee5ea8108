import json

import pytest

from qsurf import (
    DomainError,
    InsufficientPoints,
    MeshFailure,
    OxideLayer,
    SweepSpec,
    WrongVariable,
    build_cross_section,
    coarse_size_field,
    compare_to_limit,
    extrapolate_linear,
    flat_surface_epr,
    generate_mesh,
    recommended_size_field,
    region_energies,
    run_convergence_study,
    run_sweep,
    solve_mesh,
)
from qsurf import fixtures
from qsurf.studies import SweepResult

from conftest import small_cross_section


@pytest.fixture(scope="module")
def moving_oxide_sweep():
    spec = SweepSpec(base=small_cross_section(),
                     variable="oxide_thickness",
                     values=(5.0, 25.0, 50.0),
                     strategy="moving_mesh")
    return run_sweep(spec)


def test_sweep_spec_validation():
    base = small_cross_section()
    with pytest.raises(DomainError):
        SweepSpec(base=base, variable="gap_width", values=(1.0,))
    with pytest.raises(DomainError):
        SweepSpec(base=base, variable="trench_depth", values=(1.0,),
                  strategy="adaptive")
    with pytest.raises(DomainError):
        SweepSpec(base=base, variable="trench_depth", values=())
    with pytest.raises(DomainError):
        SweepSpec(base=base, variable="trench_depth", values=(5.0, 5.0))
    with pytest.raises(DomainError):
        SweepSpec(base=base, variable="permittivity", values=(1.0, 3.0),
                  strategy="moving_mesh")
    with pytest.raises(DomainError):
        SweepSpec(base=base, variable="trench_depth", values=(1.0,),
                  order=3)


def test_sweep_values_coerced_to_floats():
    spec = SweepSpec(base=small_cross_section(),
                     variable="trench_depth", values=[0, 5, 10])
    assert spec.values == (0.0, 5.0, 10.0)
    assert all(isinstance(v, float) for v in spec.values)


def test_extrapolation_oracle():
    pts = [(30.0, 3e-5), (50.0, 5e-5), (100.0, 1e-4)]
    result = extrapolate_linear(pts, threshold_nm=30.0, target_nm=5.0)
    assert result.predicted_epr == pytest.approx(5.0e-6, rel=1e-12)
    assert result.slope_per_nm == pytest.approx(1e-6, rel=1e-12)
    assert result.intercept == pytest.approx(0.0, abs=1e-18)
    assert result.residual_rms < 1e-18
    assert result.n_points == 3


def test_extrapolation_filters_below_threshold():
    pts = [(5.0, 9e-5), (10.0, 8e-5),   # nonlinear points to exclude
           (30.0, 3e-5), (50.0, 5e-5), (100.0, 1e-4)]
    result = extrapolate_linear(pts, threshold_nm=30.0, target_nm=5.0)
    assert result.n_points == 3
    assert result.predicted_epr == pytest.approx(5.0e-6, rel=1e-12)


def test_extrapolation_needs_points():
    with pytest.raises(InsufficientPoints):
        extrapolate_linear([(30.0, 3e-5), (50.0, 5e-5)],
                           threshold_nm=30.0)
    with pytest.raises(InsufficientPoints):
        extrapolate_linear([(5.0, 1e-5), (10.0, 2e-5), (20.0, 3e-5)],
                           threshold_nm=30.0)


def test_extrapolation_target_below_fit_range():
    pts = [(30.0, 3e-5), (50.0, 5e-5), (100.0, 1e-4)]
    with pytest.raises(DomainError):
        extrapolate_linear(pts, threshold_nm=30.0, target_nm=30.0)
    with pytest.raises(DomainError):
        extrapolate_linear(pts, threshold_nm=30.0, target_nm=40.0)


def test_moving_mesh_reuses_one_mesh(moving_oxide_sweep):
    hashes = moving_oxide_sweep.mesh_hashes
    assert len(set(hashes)) == 1


def test_moving_oxide_epr_increases(moving_oxide_sweep):
    series = moving_oxide_sweep.oxide_epr_series()
    eprs = [e for _, e in series]
    assert all(b > a for a, b in zip(eprs, eprs[1:]))
    for _, rep in moving_oxide_sweep.points:
        assert sum(rep.epr.values()) == pytest.approx(1.0, abs=1e-6)


def test_moving_matches_remesh(moving_oxide_sweep):
    spec = SweepSpec(base=small_cross_section(),
                     variable="oxide_thickness", values=(25.0,))
    remesh = run_sweep(spec)
    moving_epr = dict(moving_oxide_sweep.oxide_epr_series())[25.0]
    remesh_epr = remesh.oxide_epr_series()[0][1]
    assert moving_epr == pytest.approx(remesh_epr, rel=0.05)


def test_sweep_csv_shape(moving_oxide_sweep):
    lines = moving_oxide_sweep.csv_lines()
    assert lines[0] == "variable,value,region_id,epr,W_E_per_m,C_per_m"
    n_regions = len(moving_oxide_sweep.points[0][1].region_energy)
    assert len(lines) == 1 + 3 * n_regions
    assert lines[1].startswith("oxide_thickness,5,")


def test_sweep_manifest(moving_oxide_sweep):
    doc = json.loads(moving_oxide_sweep.manifest_json())
    assert doc["tool"] == "qsurf"
    assert doc["sweep"]["variable"] == "oxide_thickness"
    assert doc["sweep"]["values"] == [5.0, 25.0, 50.0]
    assert len(doc["mesh_hashes"]) == 3
    assert doc["timings_s"] is None
    assert doc["base_spec"]["film_thickness_nm"] == 100.0


def test_sweep_timings_on_request():
    spec = SweepSpec(base=small_cross_section(),
                     variable="oxide_thickness", values=(5.0, 10.0),
                     strategy="moving_mesh")
    result = run_sweep(spec, record_timings=True)
    assert len(result.timings_s) == 2
    assert all(t > 0.0 for t in result.timings_s)


def test_threads_do_not_change_results(moving_oxide_sweep):
    spec = SweepSpec(base=small_cross_section(),
                     variable="oxide_thickness",
                     values=(5.0, 25.0, 50.0),
                     strategy="moving_mesh")
    threaded = run_sweep(spec, threads=3)
    assert threaded.mesh_hashes == moving_oxide_sweep.mesh_hashes
    for (v1, r1), (v2, r2) in zip(moving_oxide_sweep.points,
                                  threaded.points):
        assert v1 == v2
        assert r1.epr == r2.epr  # bit-identical
        assert r1.total_energy == r2.total_energy


def test_moving_trench_flips_slabs():
    spec = SweepSpec(base=small_cross_section(),
                     variable="trench_depth", values=(0.0, 10.0, 25.0),
                     strategy="moving_mesh")
    result = run_sweep(spec)
    assert len(set(result.mesh_hashes)) == 1
    eprs = [e for _, e in result.oxide_epr_series()]
    assert all(b < a for a, b in zip(eprs, eprs[1:]))


def test_moving_trench_preconditions():
    spec = SweepSpec(base=small_cross_section(trench_depth_nm=5.0),
                     variable="trench_depth", values=(0.0, 10.0),
                     strategy="moving_mesh")
    with pytest.raises(DomainError):
        run_sweep(spec)
    spec = SweepSpec(base=small_cross_section(),
                     variable="trench_depth", values=(0.0,),
                     strategy="moving_mesh")
    with pytest.raises(DomainError):
        run_sweep(spec)


def test_oxide_sweep_needs_template_layer():
    spec = SweepSpec(base=small_cross_section(oxide_layers=()),
                     variable="oxide_thickness", values=(5.0, 10.0))
    with pytest.raises(DomainError):
        run_sweep(spec)
    spec = SweepSpec(base=small_cross_section(oxide_layers=()),
                     variable="permittivity", values=(1.0, 10.0))
    with pytest.raises(DomainError):
        run_sweep(spec)


def test_failed_point_is_identified():
    spec = SweepSpec(base=small_cross_section(),
                     variable="oxide_thickness", values=(1.0,))
    with pytest.raises(MeshFailure) as excinfo:
        run_sweep(spec)
    assert "sweep point 0 (value 1)" in str(excinfo.value)


def test_refinement_sweep_regenerates_meshes():
    spec = SweepSpec(base=small_cross_section(),
                     variable="refinement_level", values=(0.0, 1.0))
    result = run_sweep(spec)
    assert len(set(result.mesh_hashes)) == 2
    for _, rep in result.points:
        assert sum(rep.epr.values()) == pytest.approx(1.0, abs=1e-6)


def test_coarse_size_field_relaxes_recommendation():
    rset = build_cross_section(small_cross_section())
    fine = recommended_size_field(rset)
    coarse = coarse_size_field(rset)
    assert coarse.h_max == 2.0 * fine.h_max
    for fs, cs in zip(fine.corner_sites, coarse.corner_sites):
        assert cs.h_nm == 4.0 * fs.h_nm
    assert coarse.grading_rate <= 0.9


def test_convergence_study_structure():
    spec = small_cross_section(oxide_layers=(OxideLayer(25.0, 10.0, 1e-3),))
    report = run_convergence_study(spec, max_refinements=2,
                                   tolerance=0.5)
    assert set(report.series) == {1, 2}
    for order in (1, 2):
        dofs = [d for d, _ in report.series[order]]
        assert len(dofs) == 3
        assert all(b > a for a, b in zip(dofs, dofs[1:]))
        assert len(report.deltas[order]) == 2
        assert report.converged[order]  # vacuous tolerance
    # order-2 at level k matches the order-1 DOF one refinement up
    for k in range(2):
        assert report.series[2][k][0] == report.series[1][k + 1][0]


def test_convergence_study_preconditions():
    spec = small_cross_section()
    with pytest.raises(DomainError):
        run_convergence_study(spec, max_refinements=1)
    with pytest.raises(DomainError):
        run_convergence_study(spec, max_refinements=2, tolerance=0.0)


def test_compare_to_limit_needs_permittivity_sweep(moving_oxide_sweep):
    with pytest.raises(WrongVariable):
        compare_to_limit(moving_oxide_sweep, gap_nm=100.0, t_nm=5.0)


def test_compare_to_limit_is_unity_for_flat_plate():
    # manually assembled sweep: each point is a true parallel-plate
    # solve, where the series-capacitor value is exact
    points = []
    for eps in (3.0, 10.0):
        rset = fixtures.parallel_plate(gap_nm=100.0, width_nm=200.0,
                                       layers=((5.0, eps, 1e-3),))
        mesh = generate_mesh(rset)
        points.append((eps, region_energies(solve_mesh(mesh), mesh)))
    spec = SweepSpec(base=small_cross_section(),
                     variable="permittivity", values=(3.0, 10.0))
    sweep = SweepResult(spec=spec, points=tuple(points),
                        mesh_hashes=("a", "b"), timings_s=None)
    for eps, ratio in compare_to_limit(sweep, gap_nm=100.0, t_nm=5.0):
        assert ratio == pytest.approx(1.0, abs=1e-6)


def test_corner_geometry_exceeds_flat_limit():
    spec = SweepSpec(base=small_cross_section(),
                     variable="permittivity", values=(10.0,))
    sweep = run_sweep(spec)
    gap = 2.0 * small_cross_section().gap_halfwidth_nm
    (eps, ratio), = compare_to_limit(sweep, gap_nm=gap, t_nm=5.0)
    assert ratio > 1.0
