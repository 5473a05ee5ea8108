"""Conforming constrained triangulation with graded quality refinement.

scipy's Delaunay triangulates point sets only, so constraint conformity
and element quality are enforced by iterative point insertion in the
Ruppert style: constraint subsegments that are missing from the
triangulation or encroached by a vertex are split (with power-of-two
snapping near input vertices), and oversized or skinny triangles are
refined at their circumcenters, batched per round with a conflict
filter.  Region labels are recovered by seed flood fill that never
crosses a constraint edge; metal interiors are seeded as holes and
discarded.  Every step is value-deterministic: identical input yields
an identical mesh.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import GeometryError, MeshFailure

HOLE = -1
_UNSET = -2


def _pair_keys(a, b, m):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * np.int64(m) + hi


def _split_point(p, q, p_is_input, q_is_input):
    """Split location on a subsegment.

    Next to an input vertex the split distance snaps to a power of two
    so repeated splitting around small input angles produces nested
    concentric shells and terminates; the snap never leaves the middle
    half of the subsegment.
    """
    d = math.hypot(q[0] - p[0], q[1] - p[1])
    if p_is_input == q_is_input:
        return 0.5 * (p + q)
    base, other = (p, q) if p_is_input else (q, p)
    off = 2.0 ** round(math.log2(0.5 * d))
    t = min(max(off, 0.25 * d), 0.75 * d) / d
    return base + t * (other - base)


class _Front:
    """Growing point set plus the live constraint subsegments."""

    def __init__(self, points, segments, markers):
        self.pts = [np.asarray(p, dtype=float) for p in points]
        self.n_input = len(self.pts)
        self.subsegs = {}
        for a, b in segments:
            key = (a, b) if a < b else (b, a)
            self.subsegs[key] = markers.get(key)

    def split_subseg(self, key):
        a, b = key
        new = _split_point(self.pts[a], self.pts[b],
                           a < self.n_input, b < self.n_input)
        idx = len(self.pts)
        self.pts.append(new)
        marker = self.subsegs.pop(key)
        self.subsegs[(min(a, idx), max(a, idx))] = marker
        self.subsegs[(min(b, idx), max(b, idx))] = marker


def refine_pslg(
    points,
    segments,
    markers,
    region_seeds,
    hole_seeds,
    size_fn,
    region_caps=None,
    min_angle_deg: float = 15.0,
    target_angle_deg: float = 19.0,
    max_vertices: int = 400_000,
    max_rounds: int = 200,
):
    """Triangulate a PSLG with size and quality guarantees.

    points are input vertices, segments index pairs into them, markers
    an optional {sorted pair: marker} dict.  Each region seed is an
    ((x, y), region_id) pair placed strictly inside its region; hole
    seeds mark enclosed areas to discard.  size_fn maps an (n, 2) array
    of element centroids to target diameters, further capped per region
    by region_caps.  Returns (vertices, triangles, region_ids,
    boundary) where triangles are CCW and boundary maps the vertex
    pairs of marked constraint subsegments to their marker.
    """
    front = _Front(points, segments, markers)
    region_caps = region_caps or {}
    target = math.radians(max(target_angle_deg, min_angle_deg))
    seeds_xy = np.asarray(
        [p for p, _ in region_seeds] + [tuple(p) for p in hole_seeds], float)
    seed_labels = [rid for _, rid in region_seeds] + [HOLE] * len(hole_seeds)
    cap_arr = np.full(max(rid for _, rid in region_seeds) + 1, np.inf)
    for rid, cap in region_caps.items():
        cap_arr[rid] = cap

    for _ in range(max_rounds):
        if len(front.pts) > max_vertices:
            raise MeshFailure(
                f"mesh exceeded {max_vertices} vertices before meeting "
                "its quality targets")
        pts = np.asarray(front.pts)
        m = len(pts)
        tri = Delaunay(pts)
        simpl = tri.simplices.astype(np.int64)

        sub_pairs = np.array(list(front.subsegs.keys()), dtype=np.int64)
        sub_keys = _pair_keys(sub_pairs[:, 0], sub_pairs[:, 1], m)
        mids = 0.5 * (pts[sub_pairs[:, 0]] + pts[sub_pairs[:, 1]])
        half = 0.5 * np.linalg.norm(
            pts[sub_pairs[:, 1]] - pts[sub_pairs[:, 0]], axis=1)

        # Edge k of a triangle is the one opposite vertex k, matching
        # scipy's neighbor convention.
        edge_keys = np.stack(
            [
                _pair_keys(simpl[:, 1], simpl[:, 2], m),
                _pair_keys(simpl[:, 2], simpl[:, 0], m),
                _pair_keys(simpl[:, 0], simpl[:, 1], m),
            ],
            axis=1,
        )

        # Conformity and encroachment first.  For a Delaunay edge it is
        # enough to test the two opposite vertices against the
        # diametral circle; any other encroaching vertex implies one of
        # those two is inside as well.
        flat = edge_keys.ravel()
        order = np.argsort(flat, kind="stable")
        sf = flat[order]
        li = np.searchsorted(sf, sub_keys, side="left")
        ri = np.searchsorted(sf, sub_keys, side="right")
        present = ri > li
        encroached = np.zeros(len(sub_keys), dtype=bool)
        for occ in (0, 1):
            has = (ri - li) > occ
            p = order[np.clip(li + occ, 0, len(sf) - 1)]
            opp = simpl[p // 3, p % 3]
            d = np.linalg.norm(pts[opp] - mids, axis=1)
            encroached |= has & (d < half * (1.0 - 1e-9))
        needs_split = ~present | encroached
        if needs_split.any():
            for i in np.nonzero(needs_split)[0]:
                front.split_subseg(tuple(sub_pairs[i]))
            continue

        constrained = np.isin(edge_keys, np.sort(sub_keys))
        labels = _flood_fill(tri, simpl, constrained, seeds_xy, seed_labels)
        kept = labels >= 0
        if not kept.any():
            raise MeshFailure("no elements inside any region")

        ks = simpl[kept]
        a, b, c = pts[ks[:, 0]], pts[ks[:, 1]], pts[ks[:, 2]]
        bad, cc, radius, diam = _quality(
            a, b, c, labels, kept, tri.neighbors, size_fn, cap_arr, target)
        if not bad.any():
            return _finalize(pts, simpl, labels, front, min_angle_deg)

        split_keys, inserts = _candidates(
            bad, cc, radius, diam, (a + b + c) / 3.0, labels[kept], labels,
            tri, sub_pairs, mids, half)
        for key in split_keys:
            front.split_subseg(key)
        front.pts.extend(inserts)

    raise MeshFailure(f"refinement did not settle in {max_rounds} rounds")


def _flood_fill(tri, simpl, constrained, seeds_xy, seed_labels):
    nt = len(simpl)
    labels = np.full(nt, _UNSET, dtype=np.int64)
    si = tri.find_simplex(seeds_xy)
    if (si < 0).any():
        raise GeometryError("region seed fell outside the triangulation")
    for s, lab in zip(si, seed_labels):
        if labels[s] not in (_UNSET, lab):
            raise GeometryError("conflicting region seeds in one element")
        labels[s] = lab
    frontier = np.unique(si)
    neighbors = tri.neighbors
    while len(frontier):
        nxt = []
        for k in range(3):
            nb = neighbors[frontier, k]
            ok = (nb >= 0) & ~constrained[frontier, k]
            src = frontier[ok]
            dst = nb[ok]
            fresh = labels[dst] == _UNSET
            labels[dst[fresh]] = labels[src[fresh]]
            nxt.append(dst[fresh])
        frontier = np.unique(np.concatenate(nxt))
    # Pockets sealed off from every seed (conductor interiors resting on
    # the hull boundary) are discarded like explicit holes.
    labels[labels == _UNSET] = HOLE
    return labels


def _quality(a, b, c, labels, kept, neighbors, size_fn, cap_arr, target):
    """Flag kept triangles that are oversized, skinny, or badly graded."""
    ab, bc, ca = b - a, c - b, a - c
    l2 = np.stack([
        np.einsum("ij,ij->i", bc, bc),
        np.einsum("ij,ij->i", ca, ca),
        np.einsum("ij,ij->i", ab, ab),
    ], axis=1)
    diam = np.sqrt(l2.max(axis=1))

    lp = np.roll(l2, -1, axis=1)
    lq = np.roll(l2, -2, axis=1)
    denom = np.maximum(2.0 * np.sqrt(lp * lq), 1e-300)
    cosang = np.clip((lp + lq - l2) / denom, -1.0, 1.0)
    min_ang = np.arccos(cosang).min(axis=1)

    centroids = (a + b + c) / 3.0
    h = np.minimum(np.asarray(size_fn(centroids), float),
                   cap_arr[labels[kept]])

    # Circumcenter relative to vertex a keeps precision at large
    # coordinates.
    u, v = b - a, c - a
    d = 2.0 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    uu = np.einsum("ij,ij->i", u, u)
    vv = np.einsum("ij,ij->i", v, v)
    cc = a + np.stack([(v[:, 1] * uu - u[:, 1] * vv) / d,
                       (u[:, 0] * vv - v[:, 0] * uu) / d], axis=1)
    radius = np.linalg.norm(cc - a, axis=1)

    nt = len(labels)
    diam_full = np.full(nt, np.inf)
    diam_full[kept] = diam
    nb = neighbors[kept]
    nb_diam = np.where(nb >= 0, diam_full[np.clip(nb, 0, nt - 1)], np.inf)
    min_nb = nb_diam.min(axis=1)

    # Exit criteria: diameter within 1.5x the sized target, angles at
    # or above target, neighbor diameters within a factor of two.
    bad = (diam > 1.5 * h) | (min_ang < target) | (diam > 2.0 * min_nb)
    return bad, cc, radius, diam


def _candidates(bad, cc, radius, diam, centroids, kept_labels, labels, tri,
                sub_pairs, mids, half):
    """Insertion points for bad triangles plus subsegment split requests.

    A circumcenter that would encroach a constraint subsegment turns
    into a split of that subsegment instead; one that lands outside the
    triangle's own region falls back to the centroid.  Survivors are
    thinned largest-first so no two inserted points conflict.
    """
    cand = cc[bad]
    rad = radius[bad]
    dia = diam[bad]
    cent = centroids[bad]
    own = kept_labels[bad]

    landing = tri.find_simplex(cand)
    safe = np.clip(landing, 0, len(labels) - 1)
    use_centroid = (landing < 0) | (labels[safe] != own)

    cand_tree = cKDTree(cand)
    near = cand_tree.query_ball_point(mids, r=half * (1.0 - 1e-12))
    split_idx = sorted({j for j, hits in enumerate(near) if hits})
    killed = np.zeros(len(cand), dtype=bool)
    for hits in near:
        killed[hits] = True

    pos = np.where(use_centroid[:, None], cent, cand)
    clear = np.where(use_centroid, 0.3 * dia, 0.75 * rad)
    order = np.lexsort((pos[:, 0], pos[:, 1], -dia))
    pos_tree = cKDTree(pos)
    inserts = []
    for i in order:
        if killed[i]:
            continue
        inserts.append(pos[i])
        killed[pos_tree.query_ball_point(pos[i], r=float(clear[i]))] = True

    split_keys = [tuple(sub_pairs[j]) for j in split_idx]
    return split_keys, inserts


def _finalize(pts, simpl, labels, front, min_angle_deg):
    kept = labels >= 0
    tris = simpl[kept].copy()
    rids = labels[kept]

    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    cross = ((b - a)[:, 0] * (c - a)[:, 1]
             - (b - a)[:, 1] * (c - a)[:, 0])
    flip = cross < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    used = np.unique(tris)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used), dtype=np.int64)
    verts = pts[used]
    tris = remap[tris]

    order = np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0], rids))
    tris = tris[order]
    rids = rids[order]

    # Marked subsegments that survive as edges of kept triangles; a metal
    # outline edge flanked only by discarded hole elements is not part of
    # the meshed surface and must not leak into boundary integrals.
    nk = len(verts)
    kept_edges = set()
    for k0, k1 in ((0, 1), (1, 2), (2, 0)):
        kept_edges.update(
            _pair_keys(tris[:, k0], tris[:, k1], nk).tolist())
    boundary = {}
    for (i, j), marker in front.subsegs.items():
        if marker is None:
            continue
        ni, nj = int(remap[i]), int(remap[j])
        if ni < 0 or nj < 0:
            continue
        if int(_pair_keys(np.int64(ni), np.int64(nj), nk)) not in kept_edges:
            continue
        boundary[(min(ni, nj), max(ni, nj))] = marker

    ang = _min_angles(verts, tris)
    if len(ang) and float(np.degrees(ang.min())) < min_angle_deg - 1e-9:
        raise MeshFailure(
            f"final mesh violates the {min_angle_deg} degree angle floor")
    return verts, tris, rids, boundary


def _min_angles(verts, tris):
    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    l2 = np.stack([
        np.einsum("ij,ij->i", c - b, c - b),
        np.einsum("ij,ij->i", a - c, a - c),
        np.einsum("ij,ij->i", b - a, b - a),
    ], axis=1)
    lp = np.roll(l2, -1, axis=1)
    lq = np.roll(l2, -2, axis=1)
    denom = np.maximum(2.0 * np.sqrt(lp * lq), 1e-300)
    cosang = np.clip((lp + lq - l2) / denom, -1.0, 1.0)
    return np.arccos(cosang).min(axis=1)
