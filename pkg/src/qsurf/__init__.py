"""Cross-section electrostatics and surface-loss budgets for thin-film
superconducting circuits.

Pipeline: describe a film cross-section (geometry), triangulate it
(meshing), solve the electrostatic field (fem), reduce to energies and
participation ratios (analysis), aggregate into qubit-level budgets
(circuit), and orchestrate parameter studies (studies).  The cli module
fronts everything behind a JSON-configured command line.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DomainError,
    GeometryError,
    InsufficientPoints,
    InsufficientSamples,
    MeshFailure,
    MissingMaterial,
    NonConvergence,
    NonVacuumSolve,
    OverlapError,
    ParseError,
    PointOutsideDomain,
    QsurfError,
    SingularSystem,
    UnitMismatch,
    UnknownKey,
    UnknownLayer,
    WrongVariable,
)
from .geometry import (
    CornerSite,
    CrossSectionSpec,
    MaterialTag,
    OxideLayer,
    PlanarRegion,
    RegionSet,
    build_cross_section,
    build_virtual_layers,
    validate_spec,
)
from .meshing import (
    Mesh,
    SizeField,
    SizeSite,
    generate_mesh,
    load_mesh,
    mesh_quality,
    reassign_materials,
    recommended_size_field,
    refine_uniform,
    save_mesh,
    with_order,
)
from .fem import (
    EPS0,
    ETA0,
    MU0,
    FieldSolution,
    LinearSystem,
    assemble,
    evaluate_field,
    evaluate_potential,
    solve,
    solve_mesh,
)
from .analysis import (
    EdgeFit,
    EdgeProfile,
    EnergyReport,
    GFactorReport,
    epr_by_kind,
    fit_edge_exponent,
    flat_surface_epr,
    g_factor,
    quality_factor,
    region_energies,
    sample_edge_field,
    windowed_region_energy,
)
from .circuit import (
    EnergyBudget,
    LossBudget,
    LumpedQubit,
    energy_balance,
    loss_budget,
    resonant_frequency,
)
from .studies import (
    ConvergenceReport,
    ExtrapolationResult,
    SweepResult,
    SweepSpec,
    coarse_size_field,
    compare_to_limit,
    extrapolate_linear,
    run_convergence_study,
    run_sweep,
)

__all__ = [name for name in dir() if not name.startswith("_")]
