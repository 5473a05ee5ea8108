import pytest

from qsurf import (
    CrossSectionSpec,
    OxideLayer,
    build_cross_section,
    generate_mesh,
    region_energies,
    solve_mesh,
)


def small_cross_section(**overrides) -> CrossSectionSpec:
    """Reference profile shrunk to a 3 um box so solves stay fast."""
    base = dict(
        film_thickness_nm=100.0,
        sidewall_angle_deg=10.0,
        r_top_nm=5.0,
        r_bottom_nm=5.0,
        oxide_layers=(OxideLayer(5.0, 10.0, 1e-3),),
        substrate_permittivity=10.0,
        substrate_depth_nm=1500.0,
        gap_halfwidth_nm=1500.0,
        domain_width_nm=3000.0,
        domain_height_nm=3000.0,
    )
    base.update(overrides)
    return CrossSectionSpec(**base)


def checked_report(solution, mesh, materials=None):
    """Energy report with the participation closure asserted."""
    report = region_energies(solution, mesh, materials=materials)
    total = sum(report.epr.values())
    assert abs(total - 1.0) <= 1e-6
    return report


@pytest.fixture(scope="session")
def small_spec():
    return small_cross_section()


@pytest.fixture(scope="session")
def small_solution(small_spec):
    rset = build_cross_section(small_spec)
    mesh = generate_mesh(rset)
    solution = solve_mesh(mesh)
    return rset, mesh, solution
