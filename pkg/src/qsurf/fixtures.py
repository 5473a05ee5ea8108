"""Canonical geometries with closed-form solutions.

These RegionSets feed the same meshing/solve pipeline as the film
cross-section and anchor the analytic oracle tests: the parallel plate
(uniform field, series-capacitor participation), the coaxial annulus
(log potential, TEM G-factor) and a rectangular conductor step on a
ground plane (wedge-exponent fits).
"""
from __future__ import annotations

import math

import numpy as np

from .errors import GeometryError
from .geometry import (
    DIRICHLET_GROUND,
    DIRICHLET_METAL,
    OUTER,
    CornerSite,
    MaterialTag,
    PlanarRegion,
    RegionSet,
    _arc_points,
    _snap,
    segment_key,
)


def _ring(points) -> np.ndarray:
    ring = np.array([(_snap(x), _snap(y)) for x, y in points])
    keep = [0]
    for i in range(1, len(ring)):
        if not np.array_equal(ring[i], ring[keep[-1]]):
            keep.append(i)
    if np.array_equal(ring[keep[-1]], ring[keep[0]]):
        keep.pop()
    ring = ring[keep]
    x, y = ring[:, 0], ring[:, 1]
    if 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) <= 0:
        raise GeometryError("fixture ring must be counterclockwise")
    return ring


def _mark(markers, ring, lo, hi, marker):
    for i in range(lo, hi):
        markers[segment_key(ring[i], ring[i + 1])] = marker


def parallel_plate(
    gap_nm: float,
    width_nm: float,
    layers=(),
    voltage: float = 1.0,
) -> RegionSet:
    """Plate capacitor: electrode at y = 0, ground at y = gap.

    layers: (thickness_nm, permittivity[, loss_tangent]) strips stacked
    on the electrode.  Side walls are natural Neumann boundaries, so the
    field is exactly one-dimensional.
    """
    if gap_nm <= 0 or width_nm <= 0:
        raise GeometryError("plate gap and width must be > 0")
    heights = [0.0]
    tags = []
    for i, layer in enumerate(layers):
        t, eps = layer[0], layer[1]
        tan = layer[2] if len(layer) > 2 else 0.0
        if t <= 0:
            raise GeometryError("layer thickness must be > 0")
        heights.append(heights[-1] + t)
        tags.append(MaterialTag(kind="oxide", layer_index=i + 1,
                                permittivity=eps, loss_tangent=tan))
    if heights[-1] >= gap_nm:
        raise GeometryError("layers must not fill the gap")
    heights.append(gap_nm)
    tags.append(MaterialTag(kind="vacuum"))

    w = width_nm
    regions = []
    markers = {}
    # Vacuum gets region id 0, oxide strips follow bottom-up.
    order = [len(tags) - 1] + list(range(len(tags) - 1))
    for rid, strip in enumerate(order):
        y0, y1 = heights[strip], heights[strip + 1]
        ring = _ring([(0, y0), (w, y0), (w, y1), (0, y1)])
        regions.append(PlanarRegion(rid, tags[strip], ring))
        _mark(markers, np.vstack([ring, ring[:1]]), 1, 2, OUTER)
        _mark(markers, np.vstack([ring, ring[:1]]), 3, 4, OUTER)
        if strip == 0:
            _mark(markers, np.vstack([ring, ring[:1]]), 0, 1, DIRICHLET_METAL)
        if strip == len(tags) - 1:
            _mark(markers, np.vstack([ring, ring[:1]]), 2, 3, DIRICHLET_GROUND)

    return RegionSet(
        regions=tuple(regions),
        metal_rings=(),
        markers=markers,
        dirichlet_values={DIRICHLET_METAL: voltage, DIRICHLET_GROUND: 0.0},
        box=(0.0, 0.0, w, gap_nm),
        corners={},
        meta={
            "kind": "parallel_plate",
            "gap_nm": gap_nm,
            "width_nm": width_nm,
            "shell_thicknesses_nm": [float(l[0]) for l in layers],
            "electrode_voltage": voltage,
        },
    )


def coax_halves(
    a_nm: float,
    b_nm: float,
    n_half: int = 96,
    voltage: float = 1.0,
) -> RegionSet:
    """Coaxial annulus split into two half-annulus vacuum regions.

    Inner circle (radius a) is the driven conductor, outer (radius b)
    the ground.  The split along y = 0 keeps every region simply
    connected; the inner disc is a hole.
    """
    if not 0 < a_nm < b_nm:
        raise GeometryError("coax radii must satisfy 0 < a < b")
    ang = np.linspace(0.0, math.pi, n_half + 1)
    ua = np.column_stack([a_nm * np.cos(ang), a_nm * np.sin(ang)])
    ub = np.column_stack([b_nm * np.cos(ang), b_nm * np.sin(ang)])
    ua = np.array([(_snap(x), _snap(y)) for x, y in ua])
    ub = np.array([(_snap(x), _snap(y)) for x, y in ub])
    la = ua[::-1] * np.array([1.0, -1.0])  # lower mirrors, shared endpoints
    lb = ub[::-1] * np.array([1.0, -1.0])

    upper = _ring(np.vstack([ub, ua[::-1]]))
    lower = _ring(np.vstack([la[::-1], lb]))
    metal = _ring(np.vstack([ua, la[1:-1]]))

    vac = MaterialTag(kind="vacuum")
    regions = (
        PlanarRegion(0, vac, upper),
        PlanarRegion(1, vac, lower),
    )

    markers = {}
    for pts in (ua, la):
        for i in range(len(pts) - 1):
            markers[segment_key(pts[i], pts[i + 1])] = DIRICHLET_METAL
    for pts in (ub, lb):
        for i in range(len(pts) - 1):
            markers[segment_key(pts[i], pts[i + 1])] = DIRICHLET_GROUND

    return RegionSet(
        regions=regions,
        metal_rings=(metal,),
        markers=markers,
        dirichlet_values={DIRICHLET_METAL: voltage, DIRICHLET_GROUND: 0.0},
        box=(-b_nm, -b_nm, b_nm, b_nm),
        corners={},
        meta={"kind": "coax", "a_nm": a_nm, "b_nm": b_nm,
              "electrode_voltage": voltage},
    )


def stepped_conductor(
    width_nm: float,
    height_nm: float,
    block_x0_nm: float,
    block_x1_nm: float,
    block_height_nm: float,
    corner_r_nm: float = 0.0,
    voltage: float = 1.0,
) -> RegionSet:
    """Rectangular conductor bump on a grounded-plane electrode.

    The bump and the bottom wall form one driven conductor; the top wall
    is the counter electrode.  Exterior 270-degree corners sit at the
    bump's top, interior 90-degree corners at its base: the two wedge
    configurations whose field exponents have closed forms.
    """
    w, h = width_nm, height_nm
    x0, x1, t = block_x0_nm, block_x1_nm, block_height_nm
    r = corner_r_nm
    if not (0 < x0 < x1 < w and 0 < t < h):
        raise GeometryError("block must sit strictly inside the box")
    if r < 0 or 2 * r > min(x1 - x0, t):
        raise GeometryError("corner radius too large for the block")

    contour = [(x0, 0.0)]
    if r > 0:
        contour.extend(_arc_points((x0 + r, t - r), r, math.pi, math.pi / 2))
        contour.extend(_arc_points((x1 - r, t - r), r, math.pi / 2, 0.0))
    else:
        contour.extend([(x0, t), (x1, t)])
    contour.append((x1, 0.0))

    ring = _ring(
        [(0.0, 0.0)] + contour + [(w, 0.0), (w, h), (0.0, h)])
    closed = np.vstack([ring, ring[:1]])

    markers = {}
    n = len(ring)
    for i in range(n):
        p, q = closed[i], closed[i + 1]
        if abs(p[1] - h) < 1e-9 and abs(q[1] - h) < 1e-9:
            markers[segment_key(p, q)] = DIRICHLET_GROUND
        elif (abs(p[0]) < 1e-9 and abs(q[0]) < 1e-9) or (
            abs(p[0] - w) < 1e-9 and abs(q[0] - w) < 1e-9
        ):
            markers[segment_key(p, q)] = OUTER
        else:
            markers[segment_key(p, q)] = DIRICHLET_METAL

    s = math.sqrt(0.5)
    corners = {
        "exterior": CornerSite("exterior", (_snap(x0), _snap(t)), r, (-s, s)),
        "exterior_right": CornerSite(
            "exterior_right", (_snap(x1), _snap(t)), r, (s, s)),
        "interior": CornerSite("interior", (_snap(x0), 0.0), 0.0, (-s, s)),
    }
    return RegionSet(
        regions=(PlanarRegion(0, MaterialTag(kind="vacuum"), ring),),
        metal_rings=(),
        markers=markers,
        dirichlet_values={DIRICHLET_METAL: voltage, DIRICHLET_GROUND: 0.0},
        box=(0.0, 0.0, w, h),
        corners=corners,
        meta={
            "kind": "step",
            "film_thickness_nm": t,
            "block_span_nm": [x0, x1],
            "corner_r_nm": r,
            "exposed_nm": [list(map(float, p)) for p in contour],
            "electrode_voltage": voltage,
        },
    )
