"""Coarse interpolation from fine to coarse Nédélec spaces.

The operator is determined by its contract, not by a fixed recipe: it is a
projection (P R = I on free coarse edges), it is local (each coarse-edge row
touches only fine edges of cells incident to that edge's endpoints), and it
commutes with the discrete gradients, P G_h = G_H Q, where Q is a companion
nodal operator with the same structure.

Both operators are built row by row as minimum-norm functionals subject to
biorthogonality and commuting constraints, solved as small local
least-squares systems.  Local (patch) variants enforce essential boundary
conditions on the patch subdomain boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import cell_geometry, discrete_gradient, norm_matrix, _oriented_pairs
from .mesh import Mesh, MeshPair, Patch, _edges_of_faces


class InterpolationConstructionError(RuntimeError):
    """A local dual-functional system was infeasible or singular."""


@dataclass
class InterpolationPair:
    """Interpolation P, embedding R, and nodal companion Q for one region."""

    P: sp.csr_matrix               # (ne_coarse, ne_fine)
    R: sp.csr_matrix               # (ne_fine, ne_coarse)
    Q: sp.csr_matrix               # (nv_coarse, nv_fine)
    free_coarse_edges: np.ndarray      # bool, coarse edges interior to the region
    free_fine_edges: np.ndarray        # bool, fine edges interior to the region
    free_coarse_vertices: np.ndarray
    free_fine_vertices: np.ndarray
    region_coarse_cells: np.ndarray
    region_fine_cells: np.ndarray
    locality_layers: int = 1
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# embeddings of the coarse spaces into the fine spaces
# ---------------------------------------------------------------------------

def _bary_matrices(mesh: Mesh) -> np.ndarray:
    p = mesh.vertices[mesh.cells]
    mat = np.ones((mesh.n_cells, 4, 4))
    mat[:, :, 1:] = p
    return np.linalg.inv(mat)       # lambda_v(x) = coef[c, 0, v] + coef[c, 1:, v] . x


def _edge_owner_cells(pair: MeshPair) -> np.ndarray:
    """One incident fine cell per fine edge (any choice is consistent)."""
    fine = pair.fine
    owner = np.full(fine.n_edges, -1, dtype=np.int64)
    owner[fine.cell2edge.ravel()] = np.repeat(np.arange(fine.n_cells), 6)
    return owner


def embed_coarse(pair: MeshPair) -> sp.csr_matrix:
    """Canonical embedding R of the coarse Nédélec space into the fine one.

    Entry (e, E): circulation of the coarse basis function of edge E along
    fine edge e, exact for the affine shape functions a x x + b.
    """
    fine, coarse = pair.fine, pair.coarse
    K = pair.fine2coarse[_edge_owner_cells(pair)]
    x0 = fine.vertices[fine.edges[:, 0]]
    x1 = fine.vertices[fine.edges[:, 1]]
    mid = 0.5 * (x0 + x1)
    tan = x1 - x0

    coef = _bary_matrices(coarse)
    _, gradlam = cell_geometry(coarse)
    a, b = _oriented_pairs(coarse)

    lam = coef[K, 0, :] + np.einsum("eiv,ei->ev", coef[K, 1:, :], mid)  # (ne, 4)
    g = gradlam[K]                                                      # (ne, 4, 3)
    ai, bi = a[K], b[K]
    lam_a = np.take_along_axis(lam, ai, axis=1)
    lam_b = np.take_along_axis(lam, bi, axis=1)
    gt = np.einsum("evd,ed->ev", g, tan)                                # (ne, 4)
    gt_a = np.take_along_axis(gt, ai, axis=1)
    gt_b = np.take_along_axis(gt, bi, axis=1)
    vals = lam_a * gt_b - lam_b * gt_a                                  # (ne, 6)

    rows = np.repeat(np.arange(fine.n_edges), 6)
    cols = coarse.cell2edge[K].ravel()
    data = vals.ravel()
    keep = np.abs(data) > 1e-14
    R = sp.coo_matrix((data[keep], (rows[keep], cols[keep])),
                      shape=(fine.n_edges, coarse.n_edges))
    return R.tocsr()


def nodal_embedding(pair: MeshPair) -> sp.csr_matrix:
    """Coarse hat-function values at fine vertices, (nv_fine, nv_coarse)."""
    fine, coarse = pair.fine, pair.coarse
    owner = np.full(fine.n_vertices, -1, dtype=np.int64)
    owner[fine.cells.ravel()] = np.repeat(np.arange(fine.n_cells), 4)
    K = pair.fine2coarse[owner]
    coef = _bary_matrices(coarse)
    x = fine.vertices
    lam = coef[K, 0, :] + np.einsum("niw,ni->nw", coef[K, 1:, :], x)
    rows = np.repeat(np.arange(fine.n_vertices), 4)
    cols = coarse.cells[K].ravel()
    data = lam.ravel()
    keep = np.abs(data) > 1e-13
    Rn = sp.coo_matrix((data[keep], (rows[keep], cols[keep])),
                       shape=(fine.n_vertices, coarse.n_vertices))
    return Rn.tocsr()


# ---------------------------------------------------------------------------
# region bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class _Region:
    coarse_cells: np.ndarray
    fine_cells: np.ndarray
    coarse_free_edge: np.ndarray
    coarse_free_vertex: np.ndarray
    fine_free_edge: np.ndarray
    fine_free_vertex: np.ndarray


def _submesh_boundary(mesh: Mesh, cells: np.ndarray):
    """Essential (boundary) edge and vertex masks of the subdomain of `cells`."""
    f = mesh.cell2face[cells].ravel()
    counts = np.bincount(f, minlength=mesh.faces.shape[0])
    boundary_faces = np.flatnonzero(counts == 1)
    edge_mask = _edges_of_faces(mesh.edges, mesh.faces[boundary_faces])
    vertex_mask = np.zeros(mesh.n_vertices, dtype=bool)
    if boundary_faces.size:
        vertex_mask[np.unique(mesh.faces[boundary_faces])] = True
    return edge_mask, vertex_mask


def _region(pair: MeshPair, coarse_cells: np.ndarray) -> _Region:
    coarse_cells = np.sort(np.asarray(coarse_cells))
    fine_cells = np.flatnonzero(np.isin(pair.fine2coarse, coarse_cells))

    c_ess_e, c_ess_v = _submesh_boundary(pair.coarse, coarse_cells)
    f_ess_e, f_ess_v = _submesh_boundary(pair.fine, fine_cells)

    c_in_e = np.zeros(pair.coarse.n_edges, dtype=bool)
    c_in_e[pair.coarse.cell2edge[coarse_cells]] = True
    c_in_v = np.zeros(pair.coarse.n_vertices, dtype=bool)
    c_in_v[pair.coarse.cells[coarse_cells]] = True
    f_in_e = np.zeros(pair.fine.n_edges, dtype=bool)
    f_in_e[pair.fine.cell2edge[fine_cells]] = True
    f_in_v = np.zeros(pair.fine.n_vertices, dtype=bool)
    f_in_v[pair.fine.cells[fine_cells]] = True

    return _Region(
        coarse_cells=coarse_cells,
        fine_cells=fine_cells,
        coarse_free_edge=c_in_e & ~c_ess_e,
        coarse_free_vertex=c_in_v & ~c_ess_v,
        fine_free_edge=f_in_e & ~f_ess_e,
        fine_free_vertex=f_in_v & ~f_ess_v,
    )


# ---------------------------------------------------------------------------
# minimum-norm row solves
# ---------------------------------------------------------------------------

def _min_norm_solve(A: sp.csr_matrix, b: np.ndarray, tol: float):
    """Minimum-norm x with A x = b for a consistent underdetermined system.

    Solved through the (possibly rank-deficient) Gram matrix A A^T with
    spectral pseudo-inversion and iterative refinement.  Returns (x, defect).
    """
    row_norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    keep = row_norms > 0.0
    if np.any(np.abs(b[~keep]) > tol):
        return None, np.inf
    A = A[keep]
    b = b[keep] / row_norms[keep]
    A = sp.diags(1.0 / row_norms[keep]) @ A

    AA = (A @ A.T).toarray()
    w, V = np.linalg.eigh(AA)
    wmax = w[-1] if w.size else 0.0
    if wmax <= 0.0:
        return None, np.inf
    inv = np.where(w > 1e-13 * wmax, 1.0 / np.maximum(w, 1e-300), 0.0)

    def gram_solve(r):
        return V @ (inv * (V.T @ r))

    x = A.T @ gram_solve(b)
    defect = np.inf
    for _ in range(6):
        r = b - A @ x
        defect = np.abs(r).max(initial=0.0)
        if defect <= tol:
            break
        x = x + A.T @ gram_solve(r)
    return x, defect


# ---------------------------------------------------------------------------
# operator construction
# ---------------------------------------------------------------------------

_ROW_TOL = 5e-14


def _build_nodal_rows(pair: MeshPair, region: _Region, Rn: sp.csr_matrix,
                      todo: np.ndarray | None = None):
    """Dual functionals of the companion nodal operator, one per free coarse vertex.

    Returns (Q, support_cells) where support_cells[z] lists the coarse cells
    carrying the dual functional of vertex z.  `todo` restricts which rows are
    constructed (default: every free coarse vertex of the region).
    """
    coarse, fine = pair.coarse, pair.fine
    active = np.zeros(coarse.n_cells, dtype=bool)
    active[region.coarse_cells] = True
    fine_by_coarse = _fine_cells_by_coarse(pair)
    if todo is None:
        todo = region.coarse_free_vertex

    rows, cols, data = [], [], []
    support_cells: dict[int, np.ndarray] = {}
    for z in np.flatnonzero(todo):
        star = coarse.vertex_to_cells(z)
        star = star[active[star]]
        if star.size == 0:
            raise InterpolationConstructionError(f"coarse vertex {z}: empty star")
        for attempt_cells in (star[:1], star):
            fcells = np.concatenate([fine_by_coarse[c] for c in attempt_cells])
            supp = np.unique(fine.cells[fcells])
            supp = supp[region.fine_free_vertex[supp]]
            if supp.size == 0:
                continue
            sub = Rn[supp, :]
            cand = np.unique(sub.tocoo().col)
            A = sub[:, cand].T.tocsr()
            b = (cand == z).astype(float)
            x, defect = _min_norm_solve(A, b, _ROW_TOL)
            if defect <= _ROW_TOL:
                break
        else:
            raise InterpolationConstructionError(
                f"coarse vertex {z}: biorthogonal dual functional infeasible "
                f"(defect {defect:.2e})")
        nz = np.abs(x) > 1e-14
        rows.extend([z] * int(nz.sum()))
        cols.extend(supp[nz].tolist())
        data.extend(x[nz].tolist())
        support_cells[int(z)] = attempt_cells

    Q = sp.csr_matrix(
        (data, (rows, cols)), shape=(coarse.n_vertices, fine.n_vertices))
    return Q, support_cells


def _fine_cells_by_coarse(pair: MeshPair) -> list[np.ndarray]:
    order = np.argsort(pair.fine2coarse, kind="stable")
    sorted_map = pair.fine2coarse[order]
    splits = np.searchsorted(sorted_map, np.arange(1, pair.coarse.n_cells))
    return np.split(order, splits)


def _build_edge_rows(pair: MeshPair, region: _Region, R: sp.csr_matrix,
                     Q: sp.csr_matrix, q_cells: dict[int, np.ndarray],
                     G_fine: sp.csr_matrix, todo: np.ndarray | None = None):
    coarse, fine = pair.coarse, pair.fine
    active = np.zeros(coarse.n_cells, dtype=bool)
    active[region.coarse_cells] = True
    fine_by_coarse = _fine_cells_by_coarse(pair)
    fine_edge_free = region.fine_free_edge
    fine_vertex_free = region.fine_free_vertex
    QT = Q.T.tocsr()
    if todo is None:
        todo = region.coarse_free_edge

    rows, cols, data = [], [], []
    for E in np.flatnonzero(todo):
        z1, z2 = coarse.edges[E]
        star1 = coarse.vertex_to_cells(z1)
        star2 = coarse.vertex_to_cells(z2)
        cells_E = np.intersect1d(star1, star2)
        cells_E = cells_E[active[cells_E]]
        base = [cells_E, q_cells.get(z1, np.empty(0, np.int64)),
                q_cells.get(z2, np.empty(0, np.int64))]
        wide = [star1[active[star1]], star2[active[star2]]]
        defect = np.inf
        for attempt in (base, base + wide):
            ccells = np.unique(np.concatenate(attempt).astype(np.int64))
            fcells = np.concatenate([fine_by_coarse[c] for c in ccells])
            S = np.unique(fine.cell2edge[fcells])
            S = S[fine_edge_free[S]]
            if S.size == 0:
                continue
            # (a) biorthogonality against every coarse basis embedding that
            #     overlaps the support
            Rsub = R[S, :].tocsc()
            cand = np.unique(Rsub.tocoo().col)
            A_bio = Rsub[:, cand].T.tocsr()
            b_bio = (cand == E).astype(float)
            # (b) gradient commuting on free fine vertices touched by the support
            Gsub = G_fine[S, :].tocsc()
            wset = np.unique(Gsub.tocoo().col)
            wset = wset[fine_vertex_free[wset]]
            A_grad = Gsub[:, wset].T.tocsr()
            b_grad = np.asarray(
                QT[wset, z2].todense()).ravel() - np.asarray(QT[wset, z1].todense()).ravel()
            A = sp.vstack([A_bio, A_grad]).tocsr()
            b = np.concatenate([b_bio, b_grad])
            x, defect = _min_norm_solve(A, b, _ROW_TOL)
            if defect <= _ROW_TOL:
                break
        else:
            raise InterpolationConstructionError(
                f"coarse edge {E}: interpolation row infeasible (defect {defect:.2e})")
        nz = np.abs(x) > 1e-15
        rows.extend([E] * int(nz.sum()))
        cols.extend(S[nz].tolist())
        data.extend(x[nz].tolist())

    P = sp.csr_matrix((data, (rows, cols)), shape=(coarse.n_edges, fine.n_edges))
    return P


def _safe_rows(pair: MeshPair, region: _Region,
               reference: "InterpolationPair"):
    """Which dual rows of the global operator carry over to the patch unchanged.

    A row is reusable when the whole neighborhood its construction saw (vertex
    stars, cell sets, free/essential masks) is identical on the patch and on
    the full domain.  That fails only near the patch cut: coarse vertices on
    the region boundary that are interior to the domain, and anything whose
    star touches a cell containing such a vertex.
    """
    coarse = pair.coarse
    in_patch = np.zeros(coarse.n_cells, dtype=bool)
    in_patch[region.coarse_cells] = True
    in_v = np.zeros(coarse.n_vertices, dtype=bool)
    in_v[coarse.cells[region.coarse_cells]] = True
    cut_vertex = in_v & ~region.coarse_free_vertex & ~coarse.boundary_vertex
    contaminated = ~in_patch.copy()
    if cut_vertex.any():
        touched = cut_vertex[coarse.cells].any(axis=1)
        contaminated |= touched

    star_safe = np.zeros(coarse.n_vertices, dtype=bool)
    for z in np.flatnonzero(in_v):
        star = coarse.vertex_to_cells(z)
        star_safe[z] = not contaminated[star].any()

    safe_vertex = region.coarse_free_vertex & star_safe
    ends = coarse.edges
    safe_edge = (region.coarse_free_edge
                 & star_safe[ends[:, 0]] & star_safe[ends[:, 1]])
    return safe_vertex, safe_edge


def _build(pair: MeshPair, coarse_cells: np.ndarray,
           R: sp.csr_matrix | None = None,
           reference: "InterpolationPair | None" = None) -> InterpolationPair:
    region = _region(pair, coarse_cells)
    if R is None:
        R = reference.R if reference is not None else embed_coarse(pair)
    Rn = nodal_embedding(pair)
    G_fine = discrete_gradient(pair.fine)

    if reference is None:
        Q, q_cells = _build_nodal_rows(pair, region, Rn)
        P = _build_edge_rows(pair, region, R, Q, q_cells, G_fine)
    else:
        safe_v, safe_e = _safe_rows(pair, region, reference)
        Q_new, q_cells = _build_nodal_rows(
            pair, region, Rn, todo=region.coarse_free_vertex & ~safe_v)
        Q = Q_new + sp.diags(safe_v.astype(float)) @ reference.Q
        ref_cells = reference.diagnostics.get("q_cells", {})
        for z in np.flatnonzero(safe_v):
            q_cells[int(z)] = ref_cells[int(z)]
        P_new = _build_edge_rows(
            pair, region, R, Q.tocsr(), q_cells, G_fine,
            todo=region.coarse_free_edge & ~safe_e)
        P = P_new + sp.diags(safe_e.astype(float)) @ reference.P
    return InterpolationPair(
        P=P.tocsr(), R=R, Q=Q.tocsr(),
        free_coarse_edges=region.coarse_free_edge,
        free_fine_edges=region.fine_free_edge,
        free_coarse_vertices=region.coarse_free_vertex,
        free_fine_vertices=region.fine_free_vertex,
        region_coarse_cells=region.coarse_cells,
        region_fine_cells=region.fine_cells,
        diagnostics={"q_cells": q_cells},
    )


def build_interpolation(pair: MeshPair, R: sp.csr_matrix | None = None) -> InterpolationPair:
    """Global interpolation with essential conditions on the domain boundary."""
    return _build(pair, np.arange(pair.coarse.n_cells), R)


def build_interpolation_local(pair: MeshPair, patch: Patch,
                              R: sp.csr_matrix | None = None,
                              reference: InterpolationPair | None = None
                              ) -> InterpolationPair:
    """Patch-local interpolation enforcing zero tangential traces on the patch boundary.

    Passing the global operator as `reference` reuses every dual row whose
    construction neighborhood does not touch the patch cut; only a boundary
    layer of rows is rebuilt.
    """
    if patch.cells.size == 0:
        raise ValueError("patch is empty")
    return _build(pair, patch.cells, R, reference=reference)


# ---------------------------------------------------------------------------
# measured diagnostics
# ---------------------------------------------------------------------------

def projection_defect(ops: InterpolationPair) -> float:
    """max |P R - I| over free coarse edges (all coarse-edge columns)."""
    PR = (ops.P @ ops.R).toarray()
    free = ops.free_coarse_edges
    target = np.zeros_like(PR)
    np.fill_diagonal(target, 1.0)
    return float(np.abs((PR - target)[free, :]).max())


def commuting_defect(ops: InterpolationPair, pair: MeshPair) -> float:
    """max |P G_h - G_H Q| over columns of free fine vertices."""
    G_h = discrete_gradient(pair.fine)
    G_H = discrete_gradient(pair.coarse)
    D = (ops.P @ G_h - G_H @ ops.Q).tocsc()
    free = np.flatnonzero(ops.free_fine_vertices)
    sub = D[:, free]
    return float(np.abs(sub.toarray()).max()) if sub.nnz or True else 0.0


def locality_defect(ops: InterpolationPair, pair: MeshPair) -> int:
    """Number of P entries outside the one-layer neighborhood of the edge support."""
    coarse, fine = pair.coarse, pair.fine
    P = ops.P.tocoo()
    bad = 0
    edge_allowed: dict[int, np.ndarray] = {}
    for E in np.unique(P.row):
        z1, z2 = coarse.edges[E]
        cells = np.union1d(coarse.vertex_to_cells(z1), coarse.vertex_to_cells(z2))
        mask = np.zeros(fine.n_edges, dtype=bool)
        fcells = np.flatnonzero(np.isin(pair.fine2coarse, cells))
        mask[fine.cell2edge[fcells]] = True
        edge_allowed[E] = mask
    for r, c in zip(P.row, P.col):
        if not edge_allowed[r][c]:
            bad += 1
    return bad


def measure_stability(ops: InterpolationPair, pair: MeshPair, omega: float,
                      n_samples: int = 200, seed: int = 0) -> float:
    """Sampled operator norm of P in the omega-weighted H(curl) norms."""
    rng = np.random.default_rng(seed)
    N_f = norm_matrix(pair.fine, omega)
    N_c = norm_matrix(pair.coarse, omega)
    free_f = np.flatnonzero(ops.free_fine_edges)
    worst = 0.0
    for _ in range(n_samples):
        v = np.zeros(pair.fine.n_edges)
        v[free_f] = rng.standard_normal(free_f.size)
        nv = np.sqrt(v @ (N_f @ v))
        pv = ops.P @ v
        npv = np.sqrt(pv @ (N_c @ pv))
        if nv > 0:
            worst = max(worst, npv / nv)
    return worst
