import json
import math

import numpy as np
import pytest

from qsurf import (
    DomainError,
    EPS0,
    InsufficientSamples,
    MU0,
    NonVacuumSolve,
    build_cross_section,
    fit_edge_exponent,
    flat_surface_epr,
    g_factor,
    generate_mesh,
    quality_factor,
    refine_uniform,
    region_energies,
    sample_edge_field,
    solve_mesh,
    windowed_region_energy,
    with_order,
)
from qsurf import fixtures
from qsurf.analysis import EdgeProfile, epr_by_kind

from conftest import checked_report, small_cross_section


@pytest.fixture(scope="module")
def plate_solution():
    rset = fixtures.parallel_plate(gap_nm=100.0, width_nm=200.0,
                                   layers=((5.0, 10.0, 1e-3),))
    mesh = generate_mesh(rset)
    return mesh, solve_mesh(mesh)


@pytest.fixture(scope="module")
def step_solution():
    rset = fixtures.stepped_conductor(
        width_nm=2000.0, height_nm=2000.0, block_x0_nm=800.0,
        block_x1_nm=1400.0, block_height_nm=600.0)
    mesh = generate_mesh(rset, order=2)
    return rset, mesh, solve_mesh(mesh)


def test_plate_epr_matches_series_capacitor(plate_solution):
    mesh, solution = plate_solution
    report = checked_report(solution, mesh)
    expected = flat_surface_epr(5.0, 10.0, 100.0)
    oxide_rid = next(r for r, k in report.region_kinds.items()
                     if k.startswith("oxide"))
    assert report.epr[oxide_rid] == pytest.approx(expected, rel=1e-8)
    c_exact = EPS0 * 200.0 / 95.5
    assert report.capacitance_per_length == pytest.approx(c_exact, rel=1e-9)
    assert report.q_factors[oxide_rid] == pytest.approx(
        1.0 / (expected * 1e-3), rel=1e-8)


def test_energy_report_json(plate_solution):
    mesh, solution = plate_solution
    report = region_energies(solution, mesh)
    doc = report.as_json_dict()
    assert set(doc) == {"0", "1"}
    assert doc["1"]["kind"] == "oxide[1]"
    assert doc["0"]["Q"] is None  # lossless vacuum
    json.dumps(doc)


def test_epr_by_kind(plate_solution):
    mesh, solution = plate_solution
    report = region_energies(solution, mesh)
    kinds = epr_by_kind(report)
    assert set(kinds) == {"vacuum", "oxide"}
    assert sum(kinds.values()) == pytest.approx(1.0, abs=1e-12)


def test_windowed_energy_splits_total(plate_solution):
    mesh, solution = plate_solution
    report = region_energies(solution, mesh)
    left = windowed_region_energy(solution, mesh, kinds=("oxide",),
                                  xlim=(0.0, 100.0))
    right = windowed_region_energy(solution, mesh, kinds=("oxide",),
                                   xlim=(100.0, 200.0))
    oxide_rid = next(r for r, k in report.region_kinds.items()
                     if k.startswith("oxide"))
    assert left + right == pytest.approx(report.region_energy[oxide_rid],
                                         rel=1e-12)
    # uniform field: halves carry equal energy
    assert left == pytest.approx(right, rel=1e-9)


def test_quality_factor_domain():
    assert quality_factor(3.08e-5, 1e-3) == pytest.approx(
        1.0 / 3.08e-8, rel=1e-12)
    with pytest.raises(DomainError):
        quality_factor(0.0, 1e-3)
    with pytest.raises(DomainError):
        quality_factor(1e-4, 0.0)


def test_flat_surface_epr_closed_form():
    assert flat_surface_epr(5.0, 10.0, 10000.0) == pytest.approx(
        0.5 / 9995.5, rel=1e-12)
    # eps=1 collapses to t/gap
    assert flat_surface_epr(7.0, 1.0, 100.0) == pytest.approx(0.07)
    with pytest.raises(DomainError):
        flat_surface_epr(0.0, 10.0, 100.0)
    with pytest.raises(DomainError):
        flat_surface_epr(100.0, 10.0, 100.0)
    with pytest.raises(DomainError):
        flat_surface_epr(5.0, 0.5, 100.0)


def test_edge_profile_invariants():
    rho = np.geomspace(1.0, 100.0, 30)
    e = rho ** -0.33
    EdgeProfile(corner=None, mode="ray", description={}, rho_nm=rho,
                e_mag=e)
    with pytest.raises(DomainError):
        EdgeProfile(corner=None, mode="ray", description={},
                    rho_nm=rho[:10], e_mag=e[:10])
    with pytest.raises(DomainError):
        EdgeProfile(corner=None, mode="ray", description={},
                    rho_nm=rho[::-1], e_mag=e)
    with pytest.raises(DomainError):
        EdgeProfile(corner=None, mode="ray", description={},
                    rho_nm=np.linspace(10.0, 20.0, 30), e_mag=e)


def test_exterior_wedge_exponent(step_solution):
    rset, mesh, solution = step_solution
    profile = sample_edge_field(solution, mesh, rset.corners["exterior"],
                                mode="ray", rho_min_nm=2.0,
                                rho_max_nm=120.0, n_samples=48)
    fit = fit_edge_exponent(profile)
    assert fit.exponent == pytest.approx(-1.0 / 3.0, abs=0.02)
    assert fit.r_squared > 0.99


def test_interior_wedge_exponent(step_solution):
    rset, mesh, solution = step_solution
    profile = sample_edge_field(solution, mesh, rset.corners["interior"],
                                mode="ray", rho_min_nm=2.0,
                                rho_max_nm=120.0, n_samples=48)
    fit = fit_edge_exponent(profile)
    assert fit.exponent == pytest.approx(1.0, abs=0.02)


def test_fit_window_needs_samples(step_solution):
    rset, mesh, solution = step_solution
    profile = sample_edge_field(solution, mesh, rset.corners["exterior"],
                                mode="ray", rho_min_nm=2.0,
                                rho_max_nm=120.0, n_samples=48)
    with pytest.raises(InsufficientSamples):
        fit_edge_exponent(profile, window=(100.0, 110.0))


def test_fit_rejects_window_outside_validity():
    spec = small_cross_section()
    rset = build_cross_section(spec)
    mesh = generate_mesh(rset)
    solution = solve_mesh(mesh)
    profile = sample_edge_field(solution, mesh, rset.corners["top"],
                                mode="ray", n_samples=64)
    with pytest.raises(DomainError):
        fit_edge_exponent(profile, window=(1.0, 20.0))  # below 2r
    with pytest.raises(DomainError):
        fit_edge_exponent(profile, window=(10.0, 90.0))  # beyond 0.2 film


def test_perimeter_profile_peaks_at_corner(step_solution):
    rset, mesh, solution = step_solution
    profile = sample_edge_field(solution, mesh, None, mode="perimeter",
                                offset_nm=4.0, n_samples=120)
    # contour starts at the block base: top-left corner sits at
    # arclength ~ block height
    peak_s = profile.rho_nm[np.argmax(profile.e_mag)]
    assert abs(peak_s - 600.0) < 30.0


def test_unknown_mode(step_solution):
    rset, mesh, solution = step_solution
    with pytest.raises(DomainError):
        sample_edge_field(solution, mesh, None, mode="spiral")
    with pytest.raises(DomainError):
        sample_edge_field(solution, mesh, None, mode="ray")


def test_profile_csv(step_solution):
    rset, mesh, solution = step_solution
    profile = sample_edge_field(solution, mesh, rset.corners["exterior"],
                                mode="ray", rho_min_nm=2.0,
                                rho_max_nm=120.0, n_samples=24)
    lines = profile.csv_lines()
    assert lines[0] == "rho_nm,E_V_per_nm"
    assert len(lines) == 25


def test_g_factor_coax_oracle():
    a, b = 1.0e6, 2.3e6
    rset = fixtures.coax_halves(a_nm=a, b_nm=b)
    mesh = refine_uniform(generate_mesh(rset, order=2))
    solution = solve_mesh(mesh)
    f0 = 5e9
    report = g_factor(solution, mesh, frequency=f0, current=1.0)
    exact = (2 * math.pi * f0) * MU0 * math.log(b / a) * \
        (a * 1e-9) * (b * 1e-9) / ((a + b) * 1e-9)
    assert report.g_total_ohm == pytest.approx(exact, rel=2e-3)
    assert set(report.g_ohm) == {"metal", "ground"}
    # parallel combination of the per-conductor factors
    recombined = 1.0 / sum(1.0 / g for g in report.g_ohm.values())
    assert recombined == pytest.approx(report.g_total_ohm, rel=1e-12)
    # G is independent of the assumed current
    report2 = g_factor(solution, mesh, frequency=f0, current=3.7)
    assert report2.g_total_ohm == pytest.approx(report.g_total_ohm,
                                                rel=1e-12)
    assert report2.surface_integral_a2_per_m == pytest.approx(
        3.7 ** 2 * report.surface_integral_a2_per_m, rel=1e-12)


def test_g_factor_requires_vacuum(plate_solution):
    mesh, solution = plate_solution
    with pytest.raises(NonVacuumSolve):
        g_factor(solution, mesh, frequency=5e9)
