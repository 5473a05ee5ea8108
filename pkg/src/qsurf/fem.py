"""Electrostatic finite elements on triangle meshes.

Assembles the Galerkin stiffness of div(eps grad phi) = 0 with P1 or
straight-edged P2 elements, eliminates Dirichlet nodes symmetrically
and solves the reduced SPD system with Jacobi-preconditioned conjugate
gradients.  Coordinates stay in nm and potentials in volts, so fields
come out in V/nm; the 2D energy integrals below are scale invariant,
which keeps every downstream ratio unit-clean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import (
    DomainError,
    MissingMaterial,
    NonConvergence,
    PointOutsideDomain,
    SingularSystem,
)
from .meshing import Mesh, element_edges, node_count

EPS0 = 8.8541878128e-12        # F/m
MU0 = 1.25663706212e-6         # H/m
ETA0 = math.sqrt(MU0 / EPS0)   # vacuum impedance, ohm

# Degree-2 rule on the reference triangle: barycentric points and equal
# weights summing to the element area.
_QP_BARY = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])


def fmt9(v) -> str:
    """Canonical 9-significant-digit float formatting for artifacts."""
    return f"{float(v):.9g}"


@dataclass(eq=False)
class LinearSystem:
    """Reduced SPD system with its DOF bookkeeping."""

    matrix: sparse.csr_matrix    # free x free
    rhs: np.ndarray
    free_nodes: np.ndarray       # dof index -> node id
    fixed_nodes: np.ndarray
    fixed_values: np.ndarray
    n_nodes: int
    mesh: Mesh
    permittivity: np.ndarray     # per element

    @property
    def dof_count(self) -> int:
        return len(self.free_nodes)


@dataclass(eq=False)
class FieldSolution:
    """Nodal potentials plus per-element quadrature field samples."""

    mesh: Mesh
    order: int
    phi: np.ndarray              # all nodes, volts
    sample_xy: np.ndarray        # (s, 2) nm
    sample_E: np.ndarray         # (s, 2) V/nm
    sample_region: np.ndarray    # (s,)
    sample_wdA: np.ndarray       # (s,) nm^2 quadrature weights
    sample_element: np.ndarray   # (s,)
    iterations: int
    residuals: list
    rel_tol: float
    dof_count: int
    eldofs: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0

    def diagnostics(self) -> dict:
        return {
            "order": self.order,
            "dof": self.dof_count,
            "iterations": self.iterations,
            "residual": self.final_residual,
            "rel_tol": self.rel_tol,
        }


def _geometry_tables(mesh: Mesh):
    """Per-element signed areas and P1 basis gradients."""
    v = mesh.vertices_nm
    t = mesh.triangles
    x = v[t]                                   # (m, 3, 2)
    d1 = x[:, 1] - x[:, 0]
    d2 = x[:, 2] - x[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if (area <= 0).any():
        raise DomainError("mesh contains non-CCW or degenerate elements")
    inv2a = 1.0 / (2.0 * area)
    grads = np.empty((len(t), 3, 2))
    grads[:, 0, 0] = (x[:, 1, 1] - x[:, 2, 1]) * inv2a
    grads[:, 1, 0] = (x[:, 2, 1] - x[:, 0, 1]) * inv2a
    grads[:, 2, 0] = (x[:, 0, 1] - x[:, 1, 1]) * inv2a
    grads[:, 0, 1] = (x[:, 2, 0] - x[:, 1, 0]) * inv2a
    grads[:, 1, 1] = (x[:, 0, 0] - x[:, 2, 0]) * inv2a
    grads[:, 2, 1] = (x[:, 1, 0] - x[:, 0, 0]) * inv2a
    return area, grads


def _element_dofs(mesh: Mesh) -> np.ndarray:
    """(m, 3) vertex ids for P1; (m, 6) with midside ids for P2.

    Local P2 numbering: vertices 0, 1, 2 then midsides of edges (0,1),
    (1,2), (2,0).
    """
    t = mesh.triangles
    if mesh.order == 1:
        return t
    edges = element_edges(mesh)
    n = mesh.num_vertices
    keys = edges[:, 0] * np.int64(n) + edges[:, 1]

    def rank(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        return np.searchsorted(keys, lo * np.int64(n) + hi)

    return np.column_stack([
        t[:, 0], t[:, 1], t[:, 2],
        n + rank(t[:, 0], t[:, 1]),
        n + rank(t[:, 1], t[:, 2]),
        n + rank(t[:, 2], t[:, 0]),
    ]).astype(np.int64)


def _p2_gradient_matrix(grads, lam):
    """B (m, 6, 2): gradients of the P2 basis at one barycentric point."""
    m = len(grads)
    B = np.empty((m, 6, 2))
    for i in range(3):
        B[:, i] = (4.0 * lam[i] - 1.0) * grads[:, i]
    pairs = ((0, 1), (1, 2), (2, 0))
    for k, (i, j) in enumerate(pairs):
        B[:, 3 + k] = 4.0 * (lam[j] * grads[:, i] + lam[i] * grads[:, j])
    return B


def _permittivity_per_element(mesh: Mesh, materials: dict) -> np.ndarray:
    table = {}
    for rid in np.unique(mesh.region_ids):
        mat = materials.get(int(rid))
        if mat is None:
            raise MissingMaterial(f"region {rid} has no material")
        table[int(rid)] = mat.permittivity
    eps = np.empty(mesh.num_triangles)
    for rid, val in table.items():
        eps[mesh.region_ids == rid] = val
    return eps


def assemble(mesh: Mesh, materials: dict | None = None) -> LinearSystem:
    """Galerkin stiffness for the mesh's element order, Dirichlet rows
    eliminated symmetrically."""
    if materials is None:
        materials = mesh.materials
    eps = _permittivity_per_element(mesh, materials)
    area, grads = _geometry_tables(mesh)
    eldofs = _element_dofs(mesh)
    n = node_count(mesh)

    if mesh.order == 1:
        ke = np.einsum("mik,mjk->mij", grads, grads)
        ke *= (eps * area)[:, None, None]
    else:
        m = mesh.num_triangles
        ke = np.zeros((m, 6, 6))
        for lam in _QP_BARY:
            B = _p2_gradient_matrix(grads, lam)
            ke += np.einsum("mik,mjk->mij", B, B)
        ke *= (eps * area / 3.0)[:, None, None]

    rows = np.repeat(eldofs, eldofs.shape[1], axis=1).ravel()
    cols = np.tile(eldofs, (1, eldofs.shape[1])).ravel()
    K = sparse.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    fixed = {}
    for mk, nodes in mesh.dirichlet_nodes().items():
        val = mesh.dirichlet_values[mk]
        for node in nodes:
            fixed[int(node)] = val
    fixed_nodes = np.array(sorted(fixed), dtype=np.int64)
    fixed_values = np.array([fixed[i] for i in fixed_nodes])
    free_nodes = np.setdiff1d(
        np.arange(n, dtype=np.int64), fixed_nodes, assume_unique=True)

    K_ff = K[free_nodes][:, free_nodes].tocsr()
    if len(fixed_nodes):
        rhs = -(K[free_nodes][:, fixed_nodes] @ fixed_values)
    else:
        rhs = np.zeros(len(free_nodes))
    return LinearSystem(
        matrix=K_ff,
        rhs=rhs,
        free_nodes=free_nodes,
        fixed_nodes=fixed_nodes,
        fixed_values=fixed_values,
        n_nodes=n,
        mesh=mesh,
        permittivity=eps,
    )


def _pcg(A, b, rel_tol, cap):
    """Jacobi-preconditioned CG; returns (x, iterations, residual history)."""
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x, 0, [0.0]
    dinv = 1.0 / A.diagonal()
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    history = []
    for k in range(1, cap + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r)) / bnorm
        history.append(res)
        if res <= rel_tol:
            return x, k, history
        z = dinv * r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    raise NonConvergence(
        f"CG did not reach {rel_tol:g} in {cap} iterations "
        f"(residual {history[-1]:.3e})", residual_history=history)


def solve(system: LinearSystem, rel_tol: float = 1e-10) -> FieldSolution:
    """Solve the reduced system and sample fields at quadrature points."""
    if not 0.0 < rel_tol <= 1e-6:
        raise DomainError("rel_tol must be in (0, 1e-6]")
    if len(system.fixed_nodes) == 0:
        raise SingularSystem(
            "no Dirichlet node fixes the potential; the system is singular")

    cap = int(50.0 * math.sqrt(max(system.dof_count, 1))) + 1
    u, iters, history = _pcg(system.matrix, system.rhs, rel_tol, cap)

    phi = np.empty(system.n_nodes)
    phi[system.free_nodes] = u
    phi[system.fixed_nodes] = system.fixed_values

    mesh = system.mesh
    area, grads = _geometry_tables(mesh)
    eldofs = _element_dofs(mesh)
    x = mesh.vertices_nm[mesh.triangles]
    phi_el = phi[eldofs]

    if mesh.order == 1:
        E = -np.einsum("mi,mik->mk", phi_el, grads)
        xy = x.mean(axis=1)
        sample_E = E
        sample_xy = xy
        sample_region = mesh.region_ids.copy()
        sample_wdA = area.copy()
        sample_element = np.arange(mesh.num_triangles, dtype=np.int64)
    else:
        chunks_E, chunks_xy = [], []
        for lam in _QP_BARY:
            B = _p2_gradient_matrix(grads, lam)
            chunks_E.append(-np.einsum("mi,mik->mk", phi_el, B))
            chunks_xy.append(np.einsum("i,mik->mk", lam, x))
        m = mesh.num_triangles
        sample_E = np.stack(chunks_E, axis=1).reshape(3 * m, 2)
        sample_xy = np.stack(chunks_xy, axis=1).reshape(3 * m, 2)
        sample_region = np.repeat(mesh.region_ids, 3)
        sample_wdA = np.repeat(area / 3.0, 3)
        sample_element = np.repeat(
            np.arange(m, dtype=np.int64), 3)

    return FieldSolution(
        mesh=mesh,
        order=mesh.order,
        phi=phi,
        sample_xy=sample_xy,
        sample_E=sample_E,
        sample_region=sample_region,
        sample_wdA=sample_wdA,
        sample_element=sample_element,
        iterations=iters,
        residuals=history,
        rel_tol=rel_tol,
        dof_count=system.dof_count,
        eldofs=eldofs,
        grads=grads,
    )


def solve_mesh(mesh: Mesh, rel_tol: float = 1e-10,
               materials: dict | None = None) -> FieldSolution:
    """assemble + solve in one step."""
    return solve(assemble(mesh, materials), rel_tol=rel_tol)


def _locate(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Containing element per point, boundary ties to the lowest id."""
    v = mesh.vertices_nm
    t = mesh.triangles
    cent = v[t].mean(axis=1)
    tree = cKDTree(cent)
    x0 = v[t[:, 0]]
    d1 = v[t[:, 1]] - x0
    d2 = v[t[:, 2]] - x0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    scale = np.sqrt(np.abs(det))

    out = np.full(len(points), -1, dtype=np.int64)
    for i, p in enumerate(np.asarray(points, dtype=float)):
        hit = -1
        for k in (8, 64, 512):
            k = min(k, len(t))
            _, cand = tree.query(p, k=k)
            cand = np.atleast_1d(cand)
            r = p - x0[cand]
            u = (r[:, 0] * d2[cand, 1] - r[:, 1] * d2[cand, 0]) / det[cand]
            w = (d1[cand, 0] * r[:, 1] - d1[cand, 1] * r[:, 0]) / det[cand]
            tol = 1e-9
            ok = (u >= -tol) & (w >= -tol) & (u + w <= 1.0 + tol)
            if ok.any():
                hit = int(cand[ok].min())
                break
            if k == len(t):
                break
        if hit < 0:
            raise PointOutsideDomain(
                f"point ({p[0]:.6g}, {p[1]:.6g}) nm is outside the mesh")
        out[i] = hit
    return out


def _barycentric(mesh, elems, points):
    v = mesh.vertices_nm
    t = mesh.triangles[elems]
    x0 = v[t[:, 0]]
    d1 = v[t[:, 1]] - x0
    d2 = v[t[:, 2]] - x0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = points - x0
    u = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    w = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - u - w, u, w])


def evaluate_field(solution: FieldSolution, mesh: Mesh, points) -> np.ndarray:
    """E = -grad(phi) at arbitrary points, (k, 2) in V/nm."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    elems = _locate(mesh, pts)
    if solution.order == 1:
        phi_el = solution.phi[solution.eldofs[elems]]
        return -np.einsum("mi,mik->mk", phi_el, solution.grads[elems])
    lam = _barycentric(mesh, elems, pts)
    phi_el = solution.phi[solution.eldofs[elems]]
    g = solution.grads[elems]
    E = np.zeros((len(pts), 2))
    for i in range(3):
        E -= (phi_el[:, i] * (4.0 * lam[:, i] - 1.0))[:, None] * g[:, i]
    pairs = ((0, 1), (1, 2), (2, 0))
    for k, (i, j) in enumerate(pairs):
        coef = 4.0 * phi_el[:, 3 + k]
        E -= coef[:, None] * (lam[:, [j]] * g[:, i] + lam[:, [i]] * g[:, j])
    return E


def evaluate_potential(solution: FieldSolution, mesh: Mesh, points):
    """phi at arbitrary points, volts."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    elems = _locate(mesh, pts)
    lam = _barycentric(mesh, elems, pts)
    phi_el = solution.phi[solution.eldofs[elems]]
    if solution.order == 1:
        return np.einsum("mi,mi->m", phi_el, lam)
    vals = np.zeros(len(pts))
    for i in range(3):
        vals += phi_el[:, i] * lam[:, i] * (2.0 * lam[:, i] - 1.0)
    pairs = ((0, 1), (1, 2), (2, 0))
    for k, (i, j) in enumerate(pairs):
        vals += 4.0 * phi_el[:, 3 + k] * lam[:, i] * lam[:, j]
    return vals


def solution_csv_lines(solution: FieldSolution) -> list:
    """Field samples as CSV rows with the canonical header."""
    lines = ["x_nm,y_nm,Ex_V_per_nm,Ey_V_per_nm,region_id"]
    for xy, E, rid in zip(solution.sample_xy, solution.sample_E,
                          solution.sample_region):
        lines.append(
            f"{fmt9(xy[0])},{fmt9(xy[1])},{fmt9(E[0])},{fmt9(E[1])},{rid}")
    return lines
