"""Mesh generation, refinement and serialization.

A Mesh couples the triangulation to its material table.  Moving-mesh
studies swap materials on virtual regions without touching coordinates
(reassign_materials), so two states of the same mesh share vertex and
triangle arrays bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from . import triangulate
from .errors import GeometryError, MeshFailure, UnknownLayer
from .geometry import MaterialTag, RegionSet, segment_key

# Oxide shells thinner than this cannot carry two well-shaped element
# rows without exploding the vertex budget; refuse instead of silently
# producing garbage energies.
MIN_SHELL_NM = 3.0

MESH_FORMAT = "qsurf-mesh"
MESH_VERSION = 1


@dataclass(frozen=True)
class SizeSite:
    """Local size anchor: target diameter h_nm at (x_nm, y_nm)."""

    x_nm: float
    y_nm: float
    h_nm: float


@dataclass(frozen=True)
class SizeField:
    """Graded target element diameter.

    h(x) = min(h_max, min over sites of (site.h_nm + grading_rate * d))
    where d is the distance from x to the site.
    """

    h_max: float
    corner_sites: tuple = ()
    grading_rate: float = 0.35

    def __post_init__(self):
        if self.h_max <= 0:
            raise GeometryError("h_max must be > 0")
        if self.grading_rate <= 0:
            raise GeometryError("grading_rate must be > 0")
        for s in self.corner_sites:
            if s.h_nm <= 0:
                raise GeometryError("site sizes must be > 0")

    def evaluate(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h = np.full(len(pts), float(self.h_max))
        for s in self.corner_sites:
            d = np.hypot(pts[:, 0] - s.x_nm, pts[:, 1] - s.y_nm)
            h = np.minimum(h, s.h_nm + self.grading_rate * d)
        return h


@dataclass(eq=False)
class Mesh:
    """Triangulation plus materials; treat all fields as immutable.

    order 2 adds one midside node per unique edge; midside ids follow
    the vertex ids in lexicographic edge order (see element_edges), the
    same numbering refine_uniform uses for its new vertices.
    """

    vertices_nm: np.ndarray        # (n, 2) float64
    triangles: np.ndarray          # (m, 3) int64, CCW
    region_ids: np.ndarray         # (m,) int64
    materials: dict                # region_id -> MaterialTag
    boundary_edges: dict           # sorted (i, j) -> marker int
    dirichlet_values: dict         # marker int -> volts
    order: int = 1
    virtual_layers: dict = field(default_factory=dict)  # rid -> (role, index)
    meta: dict = field(default_factory=dict)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices_nm)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def dirichlet_nodes(self) -> dict:
        """marker -> sorted node ids, for markers that carry a voltage.

        At order 2 the midside node of every marked edge is included.
        """
        mid_rank = None
        if self.order == 2:
            edges = element_edges(self)
            mid_rank = {tuple(e): self.num_vertices + i
                        for i, e in enumerate(edges)}
        acc = {}
        for (i, j), mk in self.boundary_edges.items():
            if mk in self.dirichlet_values:
                bucket = acc.setdefault(mk, set())
                bucket.update((i, j))
                if mid_rank is not None:
                    bucket.add(mid_rank[(i, j)])
        return {mk: np.array(sorted(s), dtype=np.int64)
                for mk, s in sorted(acc.items())}

    def marked_edges(self, marker: int) -> np.ndarray:
        """Sorted (k, 2) vertex pairs of boundary edges with a marker."""
        pairs = sorted(k for k, mk in self.boundary_edges.items()
                       if mk == marker)
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def content_hash(self) -> str:
        """Digest of coordinates and topology; materials excluded, so
        reassigned states of one mesh hash identically."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices_nm).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        h.update(np.ascontiguousarray(self.region_ids).tobytes())
        h.update(str(self.order).encode())
        return h.hexdigest()


def element_edges(mesh: Mesh) -> np.ndarray:
    """Unique element edges as sorted vertex pairs, lexicographic order."""
    cached = getattr(mesh, "_edge_cache", None)
    if cached is not None:
        return cached
    t = mesh.triangles
    e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    edges = np.unique(e, axis=0)
    mesh._edge_cache = edges
    return edges


def node_count(mesh: Mesh) -> int:
    """Solution nodes: vertices, plus one midside node per edge at order 2."""
    if mesh.order == 2:
        return mesh.num_vertices + len(element_edges(mesh))
    return mesh.num_vertices


def node_coordinates(mesh: Mesh) -> np.ndarray:
    """Coordinates of all solution nodes in node-id order."""
    if mesh.order != 2:
        return mesh.vertices_nm
    edges = element_edges(mesh)
    mids = 0.5 * (mesh.vertices_nm[edges[:, 0]] + mesh.vertices_nm[edges[:, 1]])
    return np.vstack([mesh.vertices_nm, mids])


def with_order(mesh: Mesh, order: int) -> Mesh:
    """Same mesh at a different element order (arrays shared)."""
    if order not in (1, 2):
        raise GeometryError("element order must be 1 or 2")
    if order == mesh.order:
        return mesh
    return Mesh(
        vertices_nm=mesh.vertices_nm,
        triangles=mesh.triangles,
        region_ids=mesh.region_ids,
        materials=dict(mesh.materials),
        boundary_edges=mesh.boundary_edges,
        dirichlet_values=dict(mesh.dirichlet_values),
        order=order,
        virtual_layers=dict(mesh.virtual_layers),
        meta=mesh.meta,
    )


def _shell_cap_table(region_set: RegionSet) -> dict:
    """Per-region diameter caps guaranteeing two element rows per shell."""
    thick = region_set.meta.get("shell_thicknesses_nm", [])
    caps = {}
    for r in region_set.regions:
        mat = r.material
        is_shell = mat.kind == "oxide" or mat.virtual_role == "shell"
        if not is_shell or mat.layer_index is None:
            continue
        if mat.layer_index - 1 < len(thick):
            t = thick[mat.layer_index - 1]
            if t < MIN_SHELL_NM:
                raise MeshFailure(
                    f"shell layer {mat.layer_index} is {t:g} nm thick; "
                    f"layers under {MIN_SHELL_NM:g} nm cannot be meshed "
                    "with two element rows at a sane budget",
                    region_id=r.region_id)
            caps[r.region_id] = 0.5 * t
    return caps


def recommended_size_field(region_set: RegionSet) -> SizeField:
    """Heuristic size field from the geometry's corner metadata."""
    xmin, ymin, xmax, ymax = region_set.box
    extent = max(xmax - xmin, ymax - ymin)
    sites = []
    for c in region_set.corners.values():
        base = c.radius_nm / 3.0 if c.radius_nm > 0 else extent / 4000.0
        h = max(base, 1.0)
        sites.append(SizeSite(c.apex_nm[0], c.apex_nm[1], h))
    kind = region_set.meta.get("kind", "")
    if kind == "parallel_plate":
        h_max = region_set.meta["gap_nm"] / 10.0
    elif kind == "coax":
        h_max = (region_set.meta["b_nm"] - region_set.meta["a_nm"]) / 12.0
    else:
        h_max = extent / 24.0
    return SizeField(h_max=h_max, corner_sites=tuple(sites))


def generate_mesh(
    region_set: RegionSet,
    size_field: SizeField | None = None,
    order: int = 1,
    max_vertices: int = 400_000,
    min_angle_deg: float = 15.0,
    target_angle_deg: float = 19.0,
) -> Mesh:
    """Conforming graded triangulation of a region partition."""
    if order not in (1, 2):
        raise GeometryError("element order must be 1 or 2")
    if size_field is None:
        size_field = recommended_size_field(region_set)
    caps = _shell_cap_table(region_set)

    index = {}
    points = []

    def vid(p):
        key = (round(float(p[0]), 6), round(float(p[1]), 6))
        if key not in index:
            index[key] = len(points)
            points.append(key)
        return index[key]

    segments = {}

    def add_ring(ring):
        n = len(ring)
        for i in range(n):
            p, q = ring[i], ring[(i + 1) % n]
            a, b = vid(p), vid(q)
            if a == b:
                raise GeometryError("zero-length boundary segment")
            seg = (a, b) if a < b else (b, a)
            segments.setdefault(seg, segment_key(p, q))

    for r in region_set.regions:
        add_ring(r.boundary)
    for ring in region_set.metal_rings:
        add_ring(ring)

    markers = {}
    for seg, ck in segments.items():
        mk = region_set.markers.get(ck)
        if mk is not None:
            markers[seg] = mk

    region_seeds = []
    for r in region_set.regions:
        rp = Polygon(r.boundary).representative_point()
        region_seeds.append(((rp.x, rp.y), r.region_id))
    hole_seeds = []
    for ring in region_set.metal_rings:
        rp = Polygon(ring).representative_point()
        hole_seeds.append((rp.x, rp.y))

    verts, tris, rids, boundary = triangulate.refine_pslg(
        points=points,
        segments=list(segments.keys()),
        markers=markers,
        region_seeds=region_seeds,
        hole_seeds=hole_seeds,
        size_fn=size_field.evaluate,
        region_caps=caps,
        min_angle_deg=min_angle_deg,
        target_angle_deg=target_angle_deg,
        max_vertices=max_vertices,
    )

    _audit_region_areas(region_set, verts, tris, rids)

    materials = region_set.region_materials()
    virtual_layers = {
        rid: (mat.virtual_role, mat.layer_index)
        for rid, mat in materials.items() if mat.kind == "virtual"
    }
    meta = dict(region_set.meta)
    meta["box_nm"] = list(region_set.box)
    meta["corners"] = {
        name: {
            "apex_nm": list(c.apex_nm),
            "radius_nm": c.radius_nm,
            "bisector": list(c.bisector),
        }
        for name, c in sorted(region_set.corners.items())
    }
    return Mesh(
        vertices_nm=verts,
        triangles=tris,
        region_ids=rids,
        materials=materials,
        boundary_edges=boundary,
        dirichlet_values=dict(region_set.dirichlet_values),
        order=order,
        virtual_layers=virtual_layers,
        meta=meta,
    )


def _audit_region_areas(region_set, verts, tris, rids):
    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    tarea = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                   - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    if (tarea <= 0).any():
        raise MeshFailure("inverted element in final mesh")
    for r in region_set.regions:
        got = float(tarea[rids == r.region_id].sum())
        want = r.area()
        if abs(got - want) > 1e-6 * max(want, 1.0):
            raise MeshFailure(
                f"region {r.region_id} meshed area {got:.9g} does not "
                f"match its polygon area {want:.9g}",
                region_id=r.region_id)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children.

    Edge midpoints are appended after the parent vertices in sorted
    edge order, so refinement is deterministic and nested: parent nodes
    keep their ids.
    """
    tris = mesh.triangles
    n = mesh.num_vertices
    e_all = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e_all.sort(axis=1)
    edges, inverse = np.unique(e_all, axis=0, return_inverse=True)
    mid_of = inverse.reshape(3, -1)  # rows: ab, bc, ca

    mids = 0.5 * (mesh.vertices_nm[edges[:, 0]] + mesh.vertices_nm[edges[:, 1]])
    verts = np.vstack([mesh.vertices_nm, mids])

    mab = n + mid_of[0]
    mbc = n + mid_of[1]
    mca = n + mid_of[2]
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    children = np.empty((len(tris) * 4, 3), dtype=np.int64)
    children[0::4] = np.column_stack([a, mab, mca])
    children[1::4] = np.column_stack([mab, b, mbc])
    children[2::4] = np.column_stack([mca, mbc, c])
    children[3::4] = np.column_stack([mab, mbc, mca])
    rids = np.repeat(mesh.region_ids, 4)

    edge_rank = {tuple(e): i for i, e in enumerate(edges)}
    boundary = {}
    for (i, j), mk in mesh.boundary_edges.items():
        mid = n + edge_rank[(i, j)]
        boundary[(min(i, mid), max(i, mid))] = mk
        boundary[(min(j, mid), max(j, mid))] = mk

    meta = dict(mesh.meta)
    meta["refinement_level"] = int(meta.get("refinement_level", 0)) + 1
    return Mesh(
        vertices_nm=verts,
        triangles=children,
        region_ids=rids,
        materials=dict(mesh.materials),
        boundary_edges=boundary,
        dirichlet_values=dict(mesh.dirichlet_values),
        order=mesh.order,
        virtual_layers=dict(mesh.virtual_layers),
        meta=meta,
    )


def _resolve_virtual(mesh: Mesh, key) -> list:
    """Region ids of one virtual layer addressed by index or (role, index)."""
    if isinstance(key, tuple) and len(key) == 2:
        role, idx = key
        rids = [r for r, v in mesh.virtual_layers.items() if v == (role, idx)]
        if not rids:
            raise UnknownLayer(f"no virtual {role} layer with index {idx}")
        return rids
    if isinstance(key, int) and not isinstance(key, bool):
        hits = [(r, v) for r, v in mesh.virtual_layers.items()
                if v[1] == key]
        roles = {v[0] for _, v in hits}
        if not hits:
            raise UnknownLayer(f"no virtual layer with index {key}; only "
                               "virtual regions can be reassigned")
        if len(roles) > 1:
            raise UnknownLayer(
                f"virtual layer index {key} exists as both shell and slab; "
                "address it as (role, index)")
        return [r for r, _ in hits]
    raise UnknownLayer(f"unintelligible virtual layer key {key!r}")


def reassign_materials(mesh: Mesh, assignments: dict) -> Mesh:
    """New material state on the same coordinates.

    assignments maps virtual layer indices (or explicit (role, index)
    pairs when shells and slabs coexist) to materials.  Only virtual
    regions may be reassigned; the returned Mesh shares the vertex and
    triangle arrays of the input, so coordinates are identical bit for
    bit.
    """
    materials = dict(mesh.materials)
    for key, mat in assignments.items():
        if not isinstance(mat, MaterialTag):
            raise UnknownLayer("assignments must map layers to materials")
        for rid in _resolve_virtual(mesh, key):
            materials[rid] = mat
    return Mesh(
        vertices_nm=mesh.vertices_nm,
        triangles=mesh.triangles,
        region_ids=mesh.region_ids,
        materials=materials,
        boundary_edges=mesh.boundary_edges,
        dirichlet_values=dict(mesh.dirichlet_values),
        order=mesh.order,
        virtual_layers=mesh.virtual_layers,
        meta=mesh.meta,
    )


def mesh_quality(mesh: Mesh) -> dict:
    v, t = mesh.vertices_nm, mesh.triangles
    ang = np.degrees(triangulate._min_angles(v, t))
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    lens = np.stack([
        np.linalg.norm(b - a, axis=1),
        np.linalg.norm(c - b, axis=1),
        np.linalg.norm(a - c, axis=1),
    ], axis=1)
    diam = lens.max(axis=1)
    counts = {}
    for rid in np.unique(mesh.region_ids):
        counts[int(rid)] = int((mesh.region_ids == rid).sum())
    n_dirichlet = sum(len(v) for v in mesh.dirichlet_nodes().values())
    hist, edges = np.histogram(diam, bins=12) if len(diam) else ([], [])
    return {
        "vertices": mesh.num_vertices,
        "triangles": mesh.num_triangles,
        "order": mesh.order,
        "dof_count": node_count(mesh) - n_dirichlet,
        "min_angle_deg": float(ang.min()) if len(ang) else 0.0,
        "mean_angle_deg": float(ang.mean()) if len(ang) else 0.0,
        "min_diameter_nm": float(diam.min()) if len(diam) else 0.0,
        "max_diameter_nm": float(diam.max()) if len(diam) else 0.0,
        "h_histogram": {
            "counts": [int(x) for x in hist],
            "edges_nm": [float(x) for x in edges],
        },
        "region_counts": counts,
    }


def mesh_text(mesh: Mesh) -> str:
    """Lossless versioned text export (%.17g coordinates)."""
    lines = [f"{MESH_FORMAT} {MESH_VERSION}"]
    lines.append(f"order {mesh.order}")
    lines.append(f"vertices {mesh.num_vertices}")
    lines.extend(f"{x:.17g} {y:.17g}" for x, y in mesh.vertices_nm)
    lines.append(f"triangles {mesh.num_triangles}")
    lines.extend(
        f"{t[0]} {t[1]} {t[2]} {r}"
        for t, r in zip(mesh.triangles, mesh.region_ids))
    boundary = sorted(mesh.boundary_edges.items())
    lines.append(f"boundary {len(boundary)}")
    lines.extend(f"{i} {j} {mk}" for (i, j), mk in boundary)
    mats = sorted(mesh.materials.items())
    lines.append(f"materials {len(mats)}")
    lines.extend(
        f"{rid} {json.dumps(mat.as_dict(), sort_keys=True)}"
        for rid, mat in mats)
    virt = sorted(mesh.virtual_layers.items())
    lines.append(f"virtual {len(virt)}")
    lines.extend(f"{rid} {role} {idx}" for rid, (role, idx) in virt)
    diri = sorted(mesh.dirichlet_values.items())
    lines.append(f"dirichlet {len(diri)}")
    lines.extend(f"{mk} {v:.17g}" for mk, v in diri)
    lines.append("meta " + json.dumps(mesh.meta, sort_keys=True))
    return "\n".join(lines) + "\n"


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(mesh_text(mesh))


def load_mesh(path) -> Mesh:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != MESH_FORMAT:
        raise GeometryError(f"not a {MESH_FORMAT} file")
    if int(head[1]) != MESH_VERSION:
        raise GeometryError(f"unsupported mesh format version {head[1]}")
    pos = 1

    def expect(tag):
        nonlocal pos
        name, count = lines[pos].split()
        if name != tag:
            raise GeometryError(f"expected {tag} section, found {name}")
        pos += 1
        return int(count)

    order = expect("order")
    n = expect("vertices")
    verts = np.array(
        [[float(v) for v in lines[pos + i].split()] for i in range(n)])
    pos += n
    m = expect("triangles")
    block = np.array(
        [[int(v) for v in lines[pos + i].split()] for i in range(m)],
        dtype=np.int64).reshape(m, 4)
    pos += m
    tris, rids = block[:, :3], block[:, 3]
    k = expect("boundary")
    boundary = {}
    for i in range(k):
        a, b, mk = (int(v) for v in lines[pos + i].split())
        boundary[(a, b)] = mk
    pos += k
    r = expect("materials")
    materials = {}
    for i in range(r):
        rid, doc = lines[pos + i].split(" ", 1)
        materials[int(rid)] = MaterialTag(**json.loads(doc))
    pos += r
    v = expect("virtual")
    virtual = {}
    for i in range(v):
        rid, role, idx = lines[pos + i].split()
        virtual[int(rid)] = (role, int(idx))
    pos += v
    d = expect("dirichlet")
    dirichlet = {}
    for i in range(d):
        mk, volts = lines[pos + i].split()
        dirichlet[int(mk)] = float(volts)
    pos += d
    if not lines[pos].startswith("meta "):
        raise GeometryError("missing meta section")
    meta = json.loads(lines[pos][5:])
    return Mesh(
        vertices_nm=verts.reshape(n, 2),
        triangles=tris,
        region_ids=rids,
        materials=materials,
        boundary_edges=boundary,
        dirichlet_values=dirichlet,
        order=order,
        virtual_layers=virtual,
        meta=meta,
    )
