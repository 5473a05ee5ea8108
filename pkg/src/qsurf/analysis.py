"""Energy accounting, participation ratios, corner-field profiles.

Works on quadrature samples of a FieldSolution, so every integral is
exact for the element's polynomial degree.  The peak-phasor convention
W' = 1/4 eps0 sum eps' int |E|^2 dA is used throughout; all reported
ratios are convention independent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import LineString

from .errors import (
    DomainError,
    InsufficientSamples,
    NonVacuumSolve,
    PointOutsideDomain,
)
from .fem import (
    EPS0,
    ETA0,
    FieldSolution,
    _barycentric,
    _permittivity_per_element,
    evaluate_field,
    fmt9,
)
from .geometry import (
    DIRICHLET_GROUND,
    DIRICHLET_METAL,
    MARKER_NAMES,
    CornerSite,
)
from .meshing import Mesh


@dataclass(frozen=True)
class EnergyReport:
    """Per-region electric energies and derived loss quantities."""

    region_energy: dict          # rid -> W_E' (J/m)
    total_energy: float          # J/m
    epr: dict                    # rid -> dimensionless
    capacitance_per_length: float  # F/m
    q_factors: dict              # rid -> Q (inf when lossless)
    voltage: float
    region_kinds: dict           # rid -> material summary string

    def as_json_dict(self) -> dict:
        doc = {}
        for rid in sorted(self.region_energy):
            q = self.q_factors[rid]
            doc[str(rid)] = {
                "kind": self.region_kinds[rid],
                "W_E_per_m": self.region_energy[rid],
                "epr": self.epr[rid],
                "Q": (None if math.isinf(q) else q),
            }
        return doc


@dataclass(frozen=True)
class EdgeProfile:
    """|E| samples along a ray from a corner or around the surface."""

    corner: CornerSite | None
    mode: str
    description: dict
    rho_nm: np.ndarray
    e_mag: np.ndarray            # V/nm

    def __post_init__(self):
        rho = np.asarray(self.rho_nm, dtype=float)
        if len(rho) < 20:
            raise DomainError("edge profile needs at least 20 samples")
        if not (np.diff(rho) > 0).all():
            raise DomainError("profile distances must be strictly increasing")
        if rho[-1] < 10.0 * rho[0]:
            raise DomainError("profile must span at least one decade")

    def csv_lines(self) -> list:
        lines = ["rho_nm,E_V_per_nm"]
        lines.extend(f"{fmt9(r)},{fmt9(e)}"
                     for r, e in zip(self.rho_nm, self.e_mag))
        return lines


@dataclass(frozen=True)
class EdgeFit:
    """Power-law fit |E| ~ rho^exponent over a window."""

    exponent: float
    window_nm: tuple
    r_squared: float
    n_samples: int


@dataclass(frozen=True)
class GFactorReport:
    """Geometric factor of magnetic surface loss, per conductor."""

    g_ohm: dict                  # boundary name -> G (ohm)
    g_total_ohm: float
    surface_integral_a2_per_m: float
    current_a: float
    frequency_hz: float


def region_energies(solution: FieldSolution, mesh: Mesh,
                    materials: dict | None = None) -> EnergyReport:
    """Quadrature-exact W_E' per region, participation ratios, C'."""
    if materials is None:
        materials = mesh.materials
    eps = _permittivity_per_element(mesh, materials)
    contrib = (eps[solution.sample_element]
               * (solution.sample_E ** 2).sum(axis=1)
               * solution.sample_wdA)
    rids = sorted(int(r) for r in np.unique(mesh.region_ids))
    energy, kinds, qf = {}, {}, {}
    for rid in rids:
        s = float(contrib[solution.sample_region == rid].sum())
        energy[rid] = 0.25 * EPS0 * s
        mat = materials[rid]
        name = mat.kind
        if mat.layer_index is not None:
            name += f"[{mat.layer_index}]"
        kinds[rid] = name
    total = sum(energy[rid] for rid in rids)
    if total <= 0.0:
        raise DomainError("field energy vanished; nothing to normalize")
    epr = {rid: energy[rid] / total for rid in rids}
    for rid in rids:
        tan = materials[rid].loss_tangent
        qf[rid] = 1.0 / (epr[rid] * tan) if tan > 0 and epr[rid] > 0 \
            else math.inf

    values = mesh.dirichlet_values
    v_drive = values.get(DIRICHLET_METAL, 0.0) - values.get(
        DIRICHLET_GROUND, 0.0)
    if v_drive == 0.0:
        raise DomainError("zero drive voltage; capacitance undefined")
    cap = 4.0 * total / v_drive ** 2
    return EnergyReport(
        region_energy=energy,
        total_energy=total,
        epr=epr,
        capacitance_per_length=cap,
        q_factors=qf,
        voltage=v_drive,
        region_kinds=kinds,
    )


def epr_by_kind(report: EnergyReport) -> dict:
    """Participation summed over regions sharing a material kind."""
    acc = {}
    for rid, p in report.epr.items():
        kind = report.region_kinds[rid].split("[")[0]
        acc[kind] = acc.get(kind, 0.0) + p
    return acc


def windowed_region_energy(solution: FieldSolution, mesh: Mesh,
                           materials: dict | None = None,
                           kinds=("oxide",),
                           xlim=None, ylim=None) -> float:
    """W_E' (J/m) restricted to elements of given material kinds whose
    centroids fall inside the window; used to probe flat-surface strips
    away from corners."""
    if materials is None:
        materials = mesh.materials
    eps = _permittivity_per_element(mesh, materials)
    kind_of = {rid: materials[rid].kind for rid in materials}
    keep_rid = np.array(
        [kind_of.get(int(r), "") in kinds for r in mesh.region_ids])
    cent = mesh.vertices_nm[mesh.triangles].mean(axis=1)
    keep = keep_rid.copy()
    if xlim is not None:
        keep &= (cent[:, 0] >= xlim[0]) & (cent[:, 0] <= xlim[1])
    if ylim is not None:
        keep &= (cent[:, 1] >= ylim[0]) & (cent[:, 1] <= ylim[1])
    mask = keep[solution.sample_element]
    contrib = (eps[solution.sample_element]
               * (solution.sample_E ** 2).sum(axis=1)
               * solution.sample_wdA)
    return 0.25 * EPS0 * float(contrib[mask].sum())


def quality_factor(epr: float, tan_delta: float) -> float:
    """Q of one loss channel: 1/(epr * tan_delta)."""
    if epr <= 0.0 or tan_delta <= 0.0:
        raise DomainError("quality_factor needs epr > 0 and tan_delta > 0")
    return 1.0 / (epr * tan_delta)


def flat_surface_epr(t: float, eps: float, gap: float) -> float:
    """Series-capacitor participation of a flat film of thickness t in a
    gap: (t/eps) / ((gap - t) + t/eps).  The small-t limit t/(eps*gap)
    is the 1/eps reduction curve."""
    if not 0.0 < t < gap:
        raise DomainError("flat_surface_epr needs 0 < t < gap")
    if eps < 1.0:
        raise DomainError("flat_surface_epr needs eps >= 1")
    return (t / eps) / ((gap - t) + t / eps)


def sample_edge_field(solution: FieldSolution, mesh: Mesh,
                      corner_site: CornerSite | None,
                      mode: str = "ray",
                      offset_nm: float = 2.0,
                      rho_min_nm: float | None = None,
                      rho_max_nm: float | None = None,
                      n_samples: int = 64) -> EdgeProfile:
    """|E| profile near a corner (ray) or along the surface (perimeter).

    ray: log-spaced radial distances from the corner apex along its
    vacuum bisector.  perimeter: even arc-length stations on a contour
    offset from the exposed metal surface into the surrounding space.
    """
    if mode == "ray":
        if corner_site is None:
            raise DomainError("ray mode needs a corner site")
        film = mesh.meta.get("film_thickness_nm")
        if rho_min_nm is None:
            rho_min_nm = max(0.25 * corner_site.radius_nm, 0.5)
        if rho_max_nm is None:
            rho_max_nm = 0.5 * film if film else 100.0 * rho_min_nm
        if rho_max_nm < 10.0 * rho_min_nm:
            rho_max_nm = 10.0 * rho_min_nm
        rho = np.geomspace(rho_min_nm, rho_max_nm, n_samples)
        ax, ay = corner_site.apex_nm
        bx, by = corner_site.bisector
        pts = np.column_stack([ax + rho * bx, ay + rho * by])
        E = evaluate_field(solution, mesh, pts)
        desc = {
            "mode": "ray",
            "corner": corner_site.name,
            "apex_nm": list(corner_site.apex_nm),
            "bisector": list(corner_site.bisector),
            "radius_nm": corner_site.radius_nm,
        }
        if film:
            desc["film_thickness_nm"] = film
        return EdgeProfile(
            corner=corner_site,
            mode="ray",
            description=desc,
            rho_nm=rho,
            e_mag=np.linalg.norm(E, axis=1),
        )

    if mode == "perimeter":
        path = _surface_path(mesh, offset_nm)
        length = path.length
        n = max(n_samples, 40)
        s = np.linspace(length / n, length * (1.0 - 1.0 / n), n)
        pts = np.array(
            [path.interpolate(float(d)).coords[0] for d in s])
        E = evaluate_field(solution, mesh, pts)
        desc = {
            "mode": "perimeter",
            "offset_nm": offset_nm,
            "path_length_nm": float(length),
        }
        if corner_site is not None:
            desc["corner"] = corner_site.name
        return EdgeProfile(
            corner=corner_site,
            mode="perimeter",
            description=desc,
            rho_nm=s,
            e_mag=np.linalg.norm(E, axis=1),
        )

    raise DomainError(f"unknown sampling mode {mode!r}")


def _surface_path(mesh: Mesh, offset_nm: float) -> LineString:
    """Contour at a fixed offset on the outward side of the metal surface."""
    exposed = mesh.meta.get("exposed_nm")
    if exposed is not None:
        line = LineString(exposed)
        off = line.offset_curve(offset_nm, quad_segs=16)
    elif mesh.meta.get("kind") == "parallel_plate":
        w = mesh.meta["width_nm"]
        off = LineString([(0.0, offset_nm), (w, offset_nm)])
    else:
        raise DomainError("mesh carries no exposed-surface contour")
    if off.is_empty:
        raise PointOutsideDomain("offset contour left the domain")
    if off.geom_type == "MultiLineString":
        parts = sorted(off.geoms, key=lambda g: -g.length)
        off = parts[0]
    return off


def fit_edge_exponent(profile: EdgeProfile, window=None) -> EdgeFit:
    """Least-squares power-law exponent of |E| vs rho on a log-log grid.

    The default window is [2 x rounding radius, 0.2 x film thickness]:
    below 2r the rounding dominates, above 0.2 x film the opposite
    corner interferes.
    """
    rho = np.asarray(profile.rho_nm, dtype=float)
    r_round = profile.description.get("radius_nm", 0.0)
    film = profile.description.get("film_thickness_nm")
    if window is None:
        lo = 2.0 * r_round if r_round else float(rho[0])
        hi = 0.2 * film if film else float(rho[-1])
        window = (lo, hi)
    lo, hi = float(window[0]), float(window[1])
    if r_round and lo < 2.0 * r_round - 1e-9:
        raise DomainError("window start must be >= 2x the rounding radius")
    if film and hi > 0.2 * film + 1e-9:
        raise DomainError("window end must be <= 0.2x the film thickness")

    mask = (rho >= lo) & (rho <= hi) & (profile.e_mag > 0)
    if mask.sum() < 10:
        raise InsufficientSamples(
            f"only {int(mask.sum())} samples inside the fit window; "
            "need at least 10")
    x = np.log(rho[mask])
    y = np.log(np.asarray(profile.e_mag, dtype=float)[mask])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return EdgeFit(
        exponent=float(slope),
        window_nm=(lo, hi),
        r_squared=r2,
        n_samples=int(mask.sum()),
    )


def _boundary_field_integrals(solution: FieldSolution, mesh: Mesh):
    """Per Dirichlet marker: (int |E| dl, int |E|^2 dl) in nm units."""
    edge_owner = {}
    t = mesh.triangles
    for k0, k1 in ((0, 1), (1, 2), (2, 0)):
        for el, (a, b) in enumerate(zip(t[:, k0], t[:, k1])):
            key = (int(min(a, b)), int(max(a, b)))
            prev = edge_owner.get(key)
            if prev is None or el < prev:
                edge_owner[key] = el

    gauss = (0.5 * (1.0 - 1.0 / math.sqrt(3.0)),
             0.5 * (1.0 + 1.0 / math.sqrt(3.0)))
    out = {}
    v = mesh.vertices_nm
    for mk in sorted(mesh.dirichlet_values):
        pairs = [k for k, m in mesh.boundary_edges.items() if m == mk]
        if not pairs:
            continue
        pairs.sort()
        i1 = np.array([p[0] for p in pairs])
        i2 = np.array([p[1] for p in pairs])
        p1, p2 = v[i1], v[i2]
        seg_len = np.linalg.norm(p2 - p1, axis=1)
        elems = np.array([edge_owner[p] for p in pairs])
        s_abs = np.zeros(len(pairs))
        s_sq = np.zeros(len(pairs))
        for g in gauss:
            pts = p1 + g * (p2 - p1)
            E = _field_on_elements(solution, mesh, elems, pts)
            mag2 = (E ** 2).sum(axis=1)
            s_sq += 0.5 * mag2
            s_abs += 0.5 * np.sqrt(mag2)
        out[mk] = (float((s_abs * seg_len).sum()),
                   float((s_sq * seg_len).sum()))
    return out


def _field_on_elements(solution, mesh, elems, pts):
    """E at points whose containing elements are already known."""
    phi_el = solution.phi[solution.eldofs[elems]]
    g = solution.grads[elems]
    if solution.order == 1:
        return -np.einsum("mi,mik->mk", phi_el, g)
    lam = _barycentric(mesh, elems, pts)
    E = np.zeros((len(pts), 2))
    for i in range(3):
        E -= (phi_el[:, i] * (4.0 * lam[:, i] - 1.0))[:, None] * g[:, i]
    for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        coef = 4.0 * phi_el[:, 3 + k]
        E -= coef[:, None] * (lam[:, [j]] * g[:, i] + lam[:, [i]] * g[:, j])
    return E


def g_factor(vacuum_solution: FieldSolution, mesh: Mesh,
             frequency: float, current: float = 1.0) -> GFactorReport:
    """Geometric factor G = 2 w W0' / closed-integral |H|^2 dl.

    H on the conductors comes from TEM duality of the vacuum solve,
    H = E/eta0, rescaled so the driven conductor carries the prescribed
    current.  The scaling cancels in G but fixes the reported surface
    integral.
    """
    if frequency <= 0.0 or current <= 0.0:
        raise DomainError("frequency and current must be positive")
    for rid in np.unique(mesh.region_ids):
        if mesh.materials[int(rid)].permittivity != 1.0:
            raise NonVacuumSolve(
                "g_factor requires an all-vacuum solve; region "
                f"{rid} has eps != 1")

    integrals = _boundary_field_integrals(vacuum_solution, mesh)
    if DIRICHLET_METAL not in integrals:
        raise DomainError("no driven-conductor boundary in the mesh")

    # Raw duality current on the driven conductor (A); |E| dl in V is
    # already current x eta0 because the nm factors cancel.
    i_raw = integrals[DIRICHLET_METAL][0] / ETA0
    scale = current / i_raw

    # W_E' of the vacuum solve, then scaled with the fields.
    s_energy = float(((vacuum_solution.sample_E ** 2).sum(axis=1)
                      * vacuum_solution.sample_wdA).sum())
    w_e = 0.25 * EPS0 * s_energy * scale ** 2
    w0 = 2.0 * w_e

    omega = 2.0 * math.pi * frequency
    per_boundary = {}
    total_sq = 0.0
    for mk, (_, sq_nm) in integrals.items():
        # |H|^2 dl in SI: (|E| 1e9 / eta0)^2 * dl * 1e-9.
        sq_si = sq_nm * 1e9 / ETA0 ** 2 * scale ** 2
        total_sq += sq_si
        per_boundary[MARKER_NAMES.get(mk, str(mk))] = sq_si
    g_each = {name: 2.0 * omega * w0 / sq
              for name, sq in per_boundary.items() if sq > 0}
    return GFactorReport(
        g_ohm=g_each,
        g_total_ohm=2.0 * omega * w0 / total_sq,
        surface_integral_a2_per_m=total_sq,
        current_a=current,
        frequency_hz=frequency,
    )
