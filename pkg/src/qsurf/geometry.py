"""Parametric 2D cross-section of a thin-film edge over a substrate.

Builds the planar region partition (vacuum, conformal oxide shells,
substrate with optional trench, metal hole) that the mesher consumes.
All lengths are nanometers, angles in degrees at the API surface and
radians internally.

Layout convention: the metal film sits in the upper-left of the box and
is cut by the symmetry plane at x = 0 (Neumann).  The counter-electrode
antisymmetry plane is the right wall x = domain_width (Dirichlet 0 V).
The substrate occupies y < 0; the film rests on y = 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box as shapely_box
from shapely.geometry.polygon import orient
from shapely.ops import polygonize, unary_union

from .errors import GeometryError, OverlapError

# Coordinate snap grid (nm).  Matches the 6-decimal echo format so that
# snapped coordinates round-trip exactly through the JSON export.
SNAP_NM = 1e-6
# Max chord sagitta when arcs are discretized (nm); far below the 3 nm
# minimum feature size, so geometric error stays under integration error.
ARC_SAGITTA_NM = 0.2
# The bottom fillet is truncated where its tangent reaches this
# inclination above the substrate and continued by a straight chord.
# A full tangent fillet would meet the substrate at zero angle, which no
# bounded-quality triangulation can mesh.
FOOT_CONTACT_DEG = 20.0

DIRICHLET_METAL = 1
DIRICHLET_GROUND = 2
NEUMANN_SYMMETRY = 3
OUTER = 4

MARKER_NAMES = {
    DIRICHLET_METAL: "metal",
    DIRICHLET_GROUND: "ground",
    NEUMANN_SYMMETRY: "symmetry",
    OUTER: "outer",
}


@dataclass(frozen=True)
class MaterialTag:
    """Material assignment of one region.

    kind: 'vacuum', 'oxide', 'substrate' or 'virtual'.  Virtual regions
    exist for moving-mesh studies and carry the family they can be
    reassigned within: 'shell' (oxide/vacuum) or 'slab'
    (substrate/vacuum).
    """

    kind: str
    layer_index: int | None = None
    permittivity: float = 1.0
    loss_tangent: float = 0.0
    virtual_role: str | None = None

    def __post_init__(self):
        if self.kind not in ("vacuum", "oxide", "substrate", "virtual"):
            raise GeometryError(f"unknown material kind {self.kind!r}")
        if self.permittivity < 1.0:
            raise GeometryError("permittivity must be >= 1")
        if self.loss_tangent < 0.0:
            raise GeometryError("loss_tangent must be >= 0")
        if self.kind == "virtual" and self.virtual_role not in ("shell", "slab"):
            raise GeometryError("virtual material needs a reassignment role")
        if self.kind != "virtual" and self.virtual_role is not None:
            raise GeometryError("only virtual materials carry a role")

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "layer_index": self.layer_index,
            "permittivity": self.permittivity,
            "loss_tangent": self.loss_tangent,
            "virtual_role": self.virtual_role,
        }


@dataclass(frozen=True)
class OxideLayer:
    """One conformal shell: thickness in nm, relative permittivity."""

    thickness_nm: float
    permittivity: float
    loss_tangent: float = 0.0


@dataclass(frozen=True)
class CrossSectionSpec:
    """All lengths in nm; sidewall_angle in degrees from vertical."""

    film_thickness_nm: float = 200.0
    sidewall_angle_deg: float = 10.0
    r_top_nm: float = 10.0
    r_bottom_nm: float = 10.0
    trench_depth_nm: float = 0.0
    oxide_layers: tuple[OxideLayer, ...] = (OxideLayer(5.0, 10.0),)
    substrate_permittivity: float = 10.0
    substrate_depth_nm: float = 5000.0
    gap_halfwidth_nm: float = 5000.0
    domain_width_nm: float = 10000.0
    domain_height_nm: float = 10000.0
    electrode_voltage: float = 1.0

    def with_layers(self, layers) -> "CrossSectionSpec":
        return replace(self, oxide_layers=tuple(layers))


@dataclass(frozen=True)
class CornerSite:
    """A rounded corner of the film profile, for sizing and sampling."""

    name: str
    apex_nm: tuple[float, float]
    radius_nm: float
    bisector: tuple[float, float]


@dataclass(frozen=True)
class PlanarRegion:
    """One face of the partition: CCW exterior ring, no interior rings."""

    region_id: int
    material: MaterialTag
    boundary: np.ndarray  # (N, 2) open ring, nm

    def area(self) -> float:
        x, y = self.boundary[:, 0], self.boundary[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class RegionSet:
    """Tiling of the simulation box minus metal, plus boundary markers."""

    regions: tuple[PlanarRegion, ...]
    metal_rings: tuple[np.ndarray, ...]
    markers: dict  # segment key -> marker int
    dirichlet_values: dict  # marker int -> volts
    box: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    corners: dict = field(default_factory=dict)  # name -> CornerSite
    meta: dict = field(default_factory=dict)

    def region_materials(self) -> dict:
        return {r.region_id: r.material for r in self.regions}

    def total_area(self) -> float:
        return sum(r.area() for r in self.regions)


def _snap(v: float) -> float:
    return round(v, 6)


def segment_key(p, q):
    """Canonical direction-free key of a snapped segment."""
    a = (_snap(p[0]), _snap(p[1]))
    b = (_snap(q[0]), _snap(q[1]))
    return (a, b) if a <= b else (b, a)


def _arc_points(center, radius, a0, a1, sagitta=ARC_SAGITTA_NM):
    """Chord discretization of an arc, both endpoints included."""
    if radius <= 0.0:
        return np.empty((0, 2))
    span = abs(a1 - a0)
    if sagitta < radius:
        step = 2.0 * math.acos(1.0 - sagitta / radius)
    else:
        step = span if span > 0 else 1.0
    n = max(1, int(math.ceil(span / step)))
    ang = np.linspace(a0, a1, n + 1)
    return np.column_stack(
        [center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)]
    )


def validate_spec(spec: CrossSectionSpec) -> list[str]:
    """Return a list of invariant violations; empty iff spec is valid."""
    v = []
    if spec.film_thickness_nm <= 0:
        v.append("film_thickness_nm must be > 0")
    if not 0.0 <= spec.sidewall_angle_deg <= 60.0:
        v.append("sidewall_angle_deg must be in [0, 60] degrees")
    if spec.r_top_nm < 0 or spec.r_bottom_nm < 0:
        v.append("corner radii must be >= 0")
    if spec.trench_depth_nm < 0:
        v.append("trench_depth_nm must be >= 0")
    if spec.substrate_permittivity < 1:
        v.append("substrate_permittivity must be >= 1")
    if spec.substrate_depth_nm <= 0:
        v.append("substrate_depth_nm must be > 0")
    if spec.gap_halfwidth_nm <= 0:
        v.append("gap_halfwidth_nm must be > 0")
    if spec.domain_width_nm <= 0 or spec.domain_height_nm <= 0:
        v.append("domain extents must be > 0")
    if spec.electrode_voltage == 0.0:
        v.append("electrode_voltage must be nonzero")

    th = math.radians(min(max(spec.sidewall_angle_deg, 0.0), 60.0))
    if spec.film_thickness_nm > 0 and (
        spec.r_top_nm + spec.r_bottom_nm > spec.film_thickness_nm / math.cos(th)
    ):
        v.append(
            "rounding overlap: r_top_nm + r_bottom_nm must be <= "
            "film_thickness_nm / cos(sidewall_angle)"
        )

    total_shell = 0.0
    for i, layer in enumerate(spec.oxide_layers):
        if layer.thickness_nm <= 0:
            v.append(f"oxide_layers[{i}].thickness_nm must be > 0")
        if layer.permittivity < 1:
            v.append(f"oxide_layers[{i}].permittivity must be >= 1")
        if layer.loss_tangent < 0:
            v.append(f"oxide_layers[{i}].loss_tangent must be >= 0")
        total_shell += max(layer.thickness_nm, 0.0)
    if total_shell >= spec.gap_halfwidth_nm > 0:
        v.append("total shell thickness must be < gap_halfwidth_nm")

    if spec.trench_depth_nm >= spec.substrate_depth_nm > 0:
        v.append("trench_depth_nm must be < substrate_depth_nm")
    if spec.gap_halfwidth_nm >= spec.domain_width_nm > 0:
        v.append("gap_halfwidth_nm must be < domain_width_nm")
    height_above = spec.domain_height_nm - spec.substrate_depth_nm
    if height_above <= spec.film_thickness_nm + total_shell:
        v.append(
            "domain_height_nm must exceed substrate_depth_nm + "
            "film_thickness_nm + total shell thickness"
        )
    # The film's top face must keep positive length inside the box.
    if not v:
        try:
            prof = _film_profile(spec)
        except GeometryError as exc:
            v.append(str(exc))
        else:
            if prof["t1"][0] <= 0.0:
                v.append(
                    "film top face leaves the box (domain_width_nm too small)")
        if spec.gap_halfwidth_nm <= spec.r_bottom_nm + total_shell:
            v.append("gap_halfwidth_nm must exceed r_bottom_nm + shells")
    return v


def _film_profile(spec: CrossSectionSpec) -> dict:
    """Named points of the metal profile and the exposed surface polyline.

    The exposed surface runs from (0, h) on the symmetry wall, along the
    top face, around the top rounding, down the sidewall, around the
    truncated bottom fillet and onto the substrate contact point P.
    """
    h = spec.film_thickness_nm
    th = math.radians(spec.sidewall_angle_deg)
    rt, rb = spec.r_top_nm, spec.r_bottom_nm
    delta = math.radians(FOOT_CONTACT_DEG)
    sin_t, cos_t = math.sin(th), math.cos(th)

    # Virtual sharp foot on the interface; anchors gap_halfwidth.
    xf = spec.domain_width_nm - spec.gap_halfwidth_nm
    f0 = np.array([xf, 0.0])
    wall_dir = np.array([-sin_t, cos_t])      # up along the wall
    normal = np.array([cos_t, sin_t])         # out of the metal

    pts = [np.array([0.0, h])]

    # Top rounding: tangent to the top face and to the wall line.
    t2_len = (h - rt * (1.0 - sin_t)) / cos_t
    t1_len = rb * (1.0 - sin_t) / cos_t
    if t2_len < t1_len - 1e-9:
        raise GeometryError("corner roundings overlap on the sidewall")
    ct = f0 + t2_len * wall_dir - rt * normal
    t1 = np.array([ct[0], h])
    if rt > 0.0:
        pts.extend(_arc_points(ct, rt, math.pi / 2.0, th))
    else:
        pts.append(np.array([xf - h * math.tan(th), h]))

    if rb > 0.0:
        # Fillet tangent to the wall, truncated at the contact angle,
        # then a straight chord down to the interface.
        cb = f0 + t1_len * wall_dir + rb * normal
        pts.extend(
            cb - p for p in _arc_points((0.0, 0.0), rb, th, math.pi / 2.0 - delta)
        )
        b2 = pts[-1]
        run = b2[1] / math.tan(delta)
        p_foot = np.array([b2[0] + run, 0.0])
        pts.append(p_foot)
    else:
        p_foot = f0.copy()
        pts.append(p_foot)

    exposed = [pts[0]]
    for p in pts[1:]:
        if not np.allclose(p, exposed[-1], atol=SNAP_NM):
            exposed.append(p)
    exposed = np.array([(_snap(p[0]), _snap(p[1])) for p in exposed])
    if exposed[0][1] != _snap(h) or exposed[-1][1] != 0.0:
        raise GeometryError("degenerate film profile")

    ring = np.vstack([[[0.0, 0.0]], exposed[::-1]])  # CCW metal outline

    top_apex = (xf - h * math.tan(th), h)
    vac_mid = (math.pi / 2.0 + th) / 2.0  # bisector of the vacuum wedge
    corners = {
        "top": CornerSite(
            name="top",
            apex_nm=(_snap(top_apex[0]), _snap(top_apex[1])),
            radius_nm=rt,
            bisector=_unit((math.cos(math.pi / 4.0 + th / 2.0),
                            math.sin(math.pi / 4.0 + th / 2.0))),
        ),
        "foot": CornerSite(
            name="foot",
            apex_nm=(_snap(xf), 0.0),
            radius_nm=rb,
            bisector=_unit((math.cos(vac_mid), math.sin(vac_mid))),
        ),
    }
    return {
        "exposed": exposed,
        "ring": ring,
        "foot": (_snap(p_foot[0]), 0.0),
        "t1": (_snap(t1[0]), _snap(t1[1])),
        "corners": corners,
    }


def _unit(v):
    n = math.hypot(v[0], v[1])
    return (v[0] / n, v[1] / n)


def _quad_segs(max_radius: float) -> int:
    if max_radius <= ARC_SAGITTA_NM:
        return 4
    step = 2.0 * math.acos(1.0 - ARC_SAGITTA_NM / max_radius)
    return max(4, int(math.ceil((math.pi / 2.0) / step)))


def _clean_parts(geom, min_area=1e-4):
    """Polygon parts of a shapely result, slivers dropped."""
    if geom.is_empty:
        return []
    parts = getattr(geom, "geoms", [geom])
    return [p for p in parts if p.area > min_area and isinstance(p, Polygon)]


def _build_regions(spec: CrossSectionSpec, shells, slabs) -> RegionSet:
    """Shared implementation of the two public builders.

    shells: list of (thickness_nm, MaterialTag) ordered outward.
    slabs: list of (thickness_nm, MaterialTag) ordered downward; requires
    trench_depth == 0 so slab reassignment alone defines the trench state.
    """
    violations = validate_spec(spec)
    if violations:
        raise GeometryError("; ".join(violations))
    if slabs and spec.trench_depth_nm != 0.0:
        raise GeometryError("virtual trench slabs require trench_depth_nm == 0")
    total_shell = sum(t for t, _ in shells)
    if total_shell >= spec.gap_halfwidth_nm:
        raise GeometryError("total shell thickness must be < gap_halfwidth_nm")
    total_slab = sum(t for t, _ in slabs)
    if total_slab >= spec.substrate_depth_nm:
        raise GeometryError("total slab depth must be < substrate_depth_nm")

    w = spec.domain_width_nm
    ymin = -spec.substrate_depth_nm
    ymax = spec.domain_height_nm - spec.substrate_depth_nm
    if spec.film_thickness_nm + total_shell >= ymax:
        raise GeometryError("film plus shells leave the box")

    prof = _film_profile(spec)
    metal_poly = shapely.set_precision(Polygon(prof["ring"]), SNAP_NM)
    if not metal_poly.is_valid or metal_poly.is_empty:
        raise GeometryError("metal outline is degenerate")
    exposed_ls = LineString(prof["exposed"])
    foot_x = prof["foot"][0]

    box_poly = shapely_box(0.0, ymin, w, ymax)
    above = shapely_box(0.0, 0.0, w, ymax)

    # Conformal shells: difference of successive buffers of the exposed
    # surface, metal removed, clipped to the original interface level.
    groups = []  # (material, [polygons])
    cum = 0.0
    prev_buf = None
    rmax = max(spec.r_top_nm, spec.r_bottom_nm, 1.0)
    for thickness, material in shells:
        cum += thickness
        buf = exposed_ls.buffer(
            cum, quad_segs=_quad_segs(rmax + cum), join_style="round")
        # Collision check on the unclipped buffer: the box intersection
        # below would silently trim a shell that hit the counter
        # electrode or the box top.
        if buf.bounds[2] >= w - SNAP_NM or buf.bounds[3] >= ymax - SNAP_NM:
            raise OverlapError(
                f"shell {material.layer_index} reaches the domain boundary")
        band = buf.difference(metal_poly) if prev_buf is None else \
            buf.difference(prev_buf).difference(metal_poly)
        band = shapely.set_precision(band.intersection(above), SNAP_NM)
        parts = _clean_parts(band)
        if not parts:
            raise OverlapError(
                f"shell {material.layer_index} vanished; offsets collide")
        groups.append((material, parts))
        prev_buf = buf

    # Substrate with the trench notch; virtual slabs stack below y = 0.
    d = spec.trench_depth_nm
    sub_poly = shapely_box(0.0, ymin, w, 0.0)
    if d > 0.0:
        sub_poly = sub_poly.difference(shapely_box(foot_x, -d, w, 0.0))
    cum_d = 0.0
    slab_polys = []
    for thickness, material in slabs:
        slab = shapely_box(foot_x, -(cum_d + thickness), w, -cum_d)
        slab_polys.append((material, [shapely.set_precision(slab, SNAP_NM)]))
        cum_d += thickness
    if slab_polys:
        sub_poly = sub_poly.difference(
            shapely_box(foot_x, -cum_d, w, 0.0))
    sub_poly = shapely.set_precision(sub_poly, SNAP_NM)
    sub_tag = MaterialTag(
        kind="substrate", permittivity=spec.substrate_permittivity)
    groups.append((sub_tag, _clean_parts(sub_poly)))
    groups.extend(slab_polys)

    # Node every boundary together so shared edges subdivide identically,
    # then rebuild atomic faces.  Faces not claimed by any group (or the
    # metal) are vacuum.
    linework = [box_poly.boundary, metal_poly.boundary]
    for _, parts in groups:
        linework.extend(p.boundary for p in parts)
    faces = [orient(f, 1.0) for f in polygonize(unary_union(linework))]
    if not faces:
        raise GeometryError("region partition is empty")

    claims = [(metal_poly, None)] + [
        (poly, mat) for mat, parts in groups for poly in parts]
    vacuum_tag = MaterialTag(kind="vacuum")
    metal_faces, labeled = [], []
    for f in faces:
        rp = f.representative_point()
        owner = vacuum_tag
        for poly, mat in claims:
            if poly.covers(rp):
                owner = mat
                break
        if owner is None:
            metal_faces.append(f)
        else:
            labeled.append((owner, f))

    if not metal_faces:
        raise GeometryError("metal face lost during partitioning")

    def face_rank(item):
        mat, f = item
        order = {"vacuum": 0, "oxide": 1, "virtual": 1, "substrate": 2}[mat.kind]
        if mat.virtual_role == "slab":
            order = 3
        b = f.bounds
        return (order, mat.layer_index or 0, round(b[0], 6), round(b[1], 6))

    labeled.sort(key=face_rank)
    regions = []
    for rid, (mat, f) in enumerate(labeled):
        if f.interiors:
            raise GeometryError("region with interior hole is unsupported")
        ring = np.asarray(f.exterior.coords)[:-1]
        regions.append(PlanarRegion(region_id=rid, material=mat, boundary=ring))

    area = sum(r.area() for r in regions) + sum(f.area for f in metal_faces)
    if abs(area - box_poly.area) > 1e-9 * box_poly.area:
        raise GeometryError("region areas do not tile the box")

    metal_rings = tuple(
        np.asarray(f.exterior.coords)[:-1] for f in metal_faces)
    markers = _classify_markers(regions, metal_rings, (0.0, ymin, w, ymax))

    shell_cum = list(np.cumsum([t for t, _ in shells])) if shells else []
    slab_cum = list(np.cumsum([t for t, _ in slabs])) if slabs else []
    meta = {
        "film_thickness_nm": spec.film_thickness_nm,
        "r_top_nm": spec.r_top_nm,
        "r_bottom_nm": spec.r_bottom_nm,
        "trench_depth_nm": spec.trench_depth_nm,
        "gap_halfwidth_nm": spec.gap_halfwidth_nm,
        "foot_nm": list(prof["foot"]),
        "shell_cum_nm": [float(c) for c in shell_cum],
        "slab_cum_nm": [float(c) for c in slab_cum],
        "shell_thicknesses_nm": [float(t) for t, _ in shells],
        "slab_thicknesses_nm": [float(t) for t, _ in slabs],
        "exposed_nm": prof["exposed"].tolist(),
        "metal_ring_nm": prof["ring"].tolist(),
        "electrode_voltage": spec.electrode_voltage,
    }
    return RegionSet(
        regions=tuple(regions),
        metal_rings=metal_rings,
        markers=markers,
        dirichlet_values={
            DIRICHLET_METAL: spec.electrode_voltage,
            DIRICHLET_GROUND: 0.0,
        },
        box=(0.0, ymin, w, ymax),
        corners=prof["corners"],
        meta=meta,
    )


def _classify_markers(regions, metal_rings, box) -> dict:
    """Marker per boundary segment; interior interfaces carry none."""
    xmin, ymin, xmax, ymax = box
    metal_keys = set()
    for ring in metal_rings:
        for i in range(len(ring)):
            metal_keys.add(segment_key(ring[i], ring[(i + 1) % len(ring)]))

    counts = {}
    for r in regions:
        ring = r.boundary
        for i in range(len(ring)):
            k = segment_key(ring[i], ring[(i + 1) % len(ring)])
            counts[k] = counts.get(k, 0) + 1

    tol = SNAP_NM / 2.0
    markers = {}
    for k, n in counts.items():
        (x1, y1), (x2, y2) = k
        if k in metal_keys:
            markers[k] = DIRICHLET_METAL
        elif n >= 2:
            continue  # interface between two regions
        elif abs(x1 - xmax) <= tol and abs(x2 - xmax) <= tol:
            markers[k] = DIRICHLET_GROUND
        elif abs(x1 - xmin) <= tol and abs(x2 - xmin) <= tol:
            markers[k] = NEUMANN_SYMMETRY
        elif (abs(y1 - ymin) <= tol and abs(y2 - ymin) <= tol) or (
            abs(y1 - ymax) <= tol and abs(y2 - ymax) <= tol
        ):
            markers[k] = OUTER
        else:
            raise GeometryError(f"unmatched boundary segment {k}")
    for k in metal_keys:
        markers.setdefault(k, DIRICHLET_METAL)
    return markers


def build_cross_section(spec: CrossSectionSpec) -> RegionSet:
    """Region partition for a spec with its physical oxide layers."""
    shells = [
        (layer.thickness_nm,
         MaterialTag(kind="oxide", layer_index=i + 1,
                     permittivity=layer.permittivity,
                     loss_tangent=layer.loss_tangent))
        for i, layer in enumerate(spec.oxide_layers)
    ]
    return _build_regions(spec, shells, [])


def build_virtual_layers(
    spec: CrossSectionSpec,
    shell_thicknesses_nm,
    trench_slab_thicknesses_nm=(),
) -> RegionSet:
    """Region partition with reassignable moving-mesh layers.

    Shells are built as vacuum-valued VIRTUAL regions over the exposed
    metal (ordered outward); slabs as substrate-valued VIRTUAL regions
    below the interface (ordered downward).  The spec's own oxide_layers
    are ignored here; material states are chosen later via
    reassign_materials without touching mesh coordinates.
    """
    shells = [
        (float(t), MaterialTag(kind="virtual", layer_index=i + 1,
                               permittivity=1.0, virtual_role="shell"))
        for i, t in enumerate(shell_thicknesses_nm)
    ]
    slabs = [
        (float(t), MaterialTag(kind="virtual", layer_index=j + 1,
                               permittivity=spec.substrate_permittivity,
                               virtual_role="slab"))
        for j, t in enumerate(trench_slab_thicknesses_nm)
    ]
    for t, _ in shells + slabs:
        if t <= 0:
            raise GeometryError("virtual layer thicknesses must be > 0")
    base = spec.with_layers(())
    return _build_regions(base, shells, slabs)


def echo_json(region_set: RegionSet) -> str:
    """Deterministic JSON echo of the partition (nm, 6 decimals)."""

    def ring_list(ring):
        return [[f"{x:.6f}", f"{y:.6f}"] for x, y in ring]

    doc = {
        "box_nm": [f"{v:.6f}" for v in region_set.box],
        "regions": [
            {
                "region_id": r.region_id,
                "material": r.material.as_dict(),
                "vertices_nm": ring_list(r.boundary),
            }
            for r in region_set.regions
        ],
        "metal_rings_nm": [ring_list(ring) for ring in region_set.metal_rings],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
