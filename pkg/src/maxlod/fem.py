"""Lowest-order Nédélec edge elements on tetrahedral meshes.

Degrees of freedom are signed circulations along globally oriented edges
(lower vertex index to higher).  All vectors and matrices in this module live
on the full edge set; essential boundary conditions are handled by
restriction to the free-DOF block, never by penalties.

Element integrals for cell-wise constant coefficients are exact closed forms;
smooth sources are integrated with a degree-5 Grundmann-Moeller simplex rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import LOCAL_EDGES, Mesh


class CoefficientError(ValueError):
    """Coefficient field is not symmetric positive definite on some cell."""


class SingularSystemError(RuntimeError):
    """A direct factorization detected a (numerically) singular system."""


@dataclass
class DofMap:
    """Edge-based DOF bookkeeping with essential-boundary mask."""

    n_dofs: int
    essential: np.ndarray   # (ne,) bool
    free: np.ndarray        # indices of non-essential edges
    cell2dof: np.ndarray    # (nc, 6)
    signs: np.ndarray       # (nc, 6) local-to-global orientation signs

    @property
    def n_free(self) -> int:
        return self.free.size


def build_dof_map(mesh: Mesh, boundary_edges: np.ndarray | None = None) -> DofMap:
    """DOF map with essential conditions on the given boundary edges.

    `boundary_edges` defaults to the edges of the domain boundary; patch
    problems pass the edges of the patch-subdomain boundary instead.
    """
    essential = mesh.boundary_edge if boundary_edges is None else np.asarray(boundary_edges, bool)
    if essential.shape != (mesh.n_edges,):
        raise ValueError("boundary edge mask has wrong shape")
    return DofMap(
        n_dofs=mesh.n_edges,
        essential=essential.copy(),
        free=np.flatnonzero(~essential),
        cell2dof=mesh.cell2edge,
        signs=mesh.cell2edge_sign,
    )


# ---------------------------------------------------------------------------
# cell geometry and element matrices
# ---------------------------------------------------------------------------

def cell_geometry(mesh: Mesh):
    """Volumes (nc,) and barycentric gradients (nc, 4, 3) for all cells."""
    p = mesh.vertices[mesh.cells]
    mat = np.ones((mesh.n_cells, 4, 4))
    mat[:, :, 1:] = p
    coef = np.linalg.inv(mat)                 # lambda_i = coef[:, 0, i] + coef[:, 1:, i] . x
    gradlam = np.transpose(coef[:, 1:, :], (0, 2, 1))
    vols = np.abs(np.linalg.det(p[:, 1:] - p[:, :1])) / 6.0
    return vols, gradlam


def _oriented_pairs(mesh: Mesh):
    """Local vertex index pairs (a, b) per cell edge, ordered by global index."""
    nc = mesh.n_cells
    a = np.empty((nc, 6), dtype=np.int64)
    b = np.empty((nc, 6), dtype=np.int64)
    for k, (p, q) in enumerate(LOCAL_EDGES):
        swap = mesh.cells[:, p] > mesh.cells[:, q]
        a[:, k] = np.where(swap, q, p)
        b[:, k] = np.where(swap, p, q)
    return a, b


def _check_spd(coef: np.ndarray, name: str) -> None:
    if coef.ndim != 3 or coef.shape[1:] != (3, 3):
        raise CoefficientError(f"{name}: expected per-cell 3x3 matrices")
    if not np.allclose(coef, np.transpose(coef, (0, 2, 1)), atol=1e-13):
        raise CoefficientError(f"{name}: coefficient matrices must be symmetric")
    try:
        np.linalg.cholesky(coef)
    except np.linalg.LinAlgError as exc:
        raise CoefficientError(f"{name}: coefficient not positive definite") from exc


def _expand_coefficient(coef, n_cells: int, name: str) -> np.ndarray:
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 0:
        coef = coef * np.broadcast_to(np.eye(3), (n_cells, 3, 3))
    elif coef.ndim == 1:
        coef = coef[:, None, None] * np.eye(3)
    if coef.shape != (n_cells, 3, 3):
        raise CoefficientError(f"{name}: expected scalar, per-cell scalars, or (nc,3,3)")
    _check_spd(coef, name)
    return coef


def element_curl_curl(mesh: Mesh, mu, cells=None) -> np.ndarray:
    """Per-cell 6x6 element matrices of (mu curl u, curl v)."""
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    vols, gradlam = cell_geometry(mesh)
    a, b = _oriented_pairs(mesh)
    mu = _expand_coefficient(mu, mesh.n_cells, "mu")
    g = gradlam[cells]
    ai, bi = a[cells], b[cells]
    ga = np.take_along_axis(g, ai[:, :, None], axis=1)
    gb = np.take_along_axis(g, bi[:, :, None], axis=1)
    curl = 2.0 * np.cross(ga, gb)
    return vols[cells, None, None] * np.einsum("cki,cij,clj->ckl", curl, mu[cells], curl)


def element_mass(mesh: Mesh, eps, cells=None) -> np.ndarray:
    """Per-cell 6x6 element matrices of (eps u, v), exact for constant eps."""
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    vols, gradlam = cell_geometry(mesh)
    a, b = _oriented_pairs(mesh)
    eps = _expand_coefficient(eps, mesh.n_cells, "eps")
    g = gradlam[cells]
    ai, bi = a[cells], b[cells]
    ga = np.take_along_axis(g, ai[:, :, None], axis=1)
    gb = np.take_along_axis(g, bi[:, :, None], axis=1)
    e = eps[cells]
    E_bb = np.einsum("cki,cij,clj->ckl", gb, e, gb)
    E_ba = np.einsum("cki,cij,clj->ckl", gb, e, ga)
    E_ab = np.einsum("cki,cij,clj->ckl", ga, e, gb)
    E_aa = np.einsum("cki,cij,clj->ckl", ga, e, ga)
    D_aa = (ai[:, :, None] == ai[:, None, :])
    D_ab = (ai[:, :, None] == bi[:, None, :])
    D_ba = (bi[:, :, None] == ai[:, None, :])
    D_bb = (bi[:, :, None] == bi[:, None, :])
    m = (E_bb * (1.0 + D_aa) - E_ba * (1.0 + D_ab)
         - E_ab * (1.0 + D_ba) + E_aa * (1.0 + D_bb))
    return vols[cells, None, None] / 20.0 * m


def _scatter(mesh: Mesh, element_matrices: np.ndarray, cells) -> sp.csr_matrix:
    dofs = mesh.cell2edge[cells]
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    A = sp.coo_matrix(
        (element_matrices.ravel(), (rows, cols)),
        shape=(mesh.n_edges, mesh.n_edges),
    )
    return A.tocsr()


def assemble_curl_curl(mesh: Mesh, dofs: DofMap, mu, cells=None) -> sp.csr_matrix:
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    return _scatter(mesh, element_curl_curl(mesh, mu, cells), cells)


def assemble_mass(mesh: Mesh, dofs: DofMap, eps, cells=None) -> sp.csr_matrix:
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    return _scatter(mesh, element_mass(mesh, eps, cells), cells)


def assemble_B(mesh: Mesh, dofs: DofMap, mu, eps, omega: float, cells=None) -> sp.csr_matrix:
    """Indefinite form (mu curl u, curl v) - omega^2 (eps u, v), cell-restrictable."""
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    A = assemble_curl_curl(mesh, dofs, mu, cells)
    M = assemble_mass(mesh, dofs, eps, cells)
    return (A - omega**2 * M).tocsr()


def discrete_gradient(mesh: Mesh) -> sp.csr_matrix:
    """Signed edge-vertex incidence matrix: (G p)_e = p_hi - p_lo."""
    ne = mesh.n_edges
    rows = np.repeat(np.arange(ne), 2)
    cols = mesh.edges.ravel()
    vals = np.tile([-1.0, 1.0], ne)
    return sp.csr_matrix((vals, (rows, cols)), shape=(ne, mesh.n_vertices))


# ---------------------------------------------------------------------------
# load vectors
# ---------------------------------------------------------------------------

def grundmann_moeller(s: int = 2, dim: int = 3):
    """Simplex quadrature of degree 2s+1; barycentric points and weights.

    Weights are normalized so they sum to one (integration against the
    relative measure); multiply by the cell volume to integrate.
    """
    n = dim
    d = 2 * s + 1
    points = []
    weights = []
    for i in range(s + 1):
        denom = d + n - 2 * i
        w = ((-1) ** i) * 2.0 ** (-2 * s) * denom**d / (
            factorial(i) * factorial(d + n - i)
        )
        for combo in combinations_with_replacement(range(n + 1), s - i):
            beta = np.zeros(n + 1, dtype=np.int64)
            for j in combo:
                beta[j] += 1
            points.append((2 * beta + 1) / denom)
            weights.append(w)
    points = np.array(points)
    weights = np.array(weights)
    weights /= weights.sum()
    return points, weights


def assemble_load(mesh: Mesh, dofs: DofMap, f, cells=None) -> np.ndarray:
    """Load vector (f, phi_e).  Essential DOFs are zeroed.

    `f` is either a callable x -> 3-vector (vectorized over (npts, 3)) or a
    per-cell constant array of shape (nc, 3).
    """
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    vols, gradlam = cell_geometry(mesh)
    a, b = _oriented_pairs(mesh)
    g = gradlam[cells]
    ai, bi = a[cells], b[cells]
    ga = np.take_along_axis(g, ai[:, :, None], axis=1)
    gb = np.take_along_axis(g, bi[:, :, None], axis=1)

    if callable(f):
        lam, w = grundmann_moeller(s=2, dim=3)
        verts = mesh.vertices[mesh.cells[cells]]           # (nc, 4, 3)
        pts = np.einsum("qi,civ->cqv", lam, verts)         # (nc, nq, 3)
        fvals = np.asarray(f(pts.reshape(-1, 3))).reshape(pts.shape)
        lam_a = np.take_along_axis(
            np.broadcast_to(lam.T[None], (len(cells), 4, len(w))), ai[:, :, None], axis=1)
        lam_b = np.take_along_axis(
            np.broadcast_to(lam.T[None], (len(cells), 4, len(w))), bi[:, :, None], axis=1)
        # phi_k(x_q) = lam_a(q) grad_b - lam_b(q) grad_a
        fg_b = np.einsum("cqv,ckv->ckq", fvals, gb)
        fg_a = np.einsum("cqv,ckv->ckq", fvals, ga)
        contrib = vols[cells, None] * np.einsum(
            "q,ckq->ck", w, lam_a * fg_b - lam_b * fg_a)
    else:
        f = np.asarray(f, dtype=float)
        if f.shape != (mesh.n_cells, 3):
            raise ValueError("per-cell source must have shape (nc, 3)")
        fc = f[cells]
        contrib = vols[cells, None] / 4.0 * (
            np.einsum("cv,ckv->ck", fc, gb) - np.einsum("cv,ckv->ck", fc, ga))

    load = np.zeros(mesh.n_edges)
    np.add.at(load, mesh.cell2edge[cells].ravel(), contrib.ravel())
    load[dofs.essential] = 0.0
    return load


# ---------------------------------------------------------------------------
# norms and restriction helpers
# ---------------------------------------------------------------------------

def norm_matrix(mesh: Mesh, omega: float, cells=None) -> sp.csr_matrix:
    """Gram matrix of the omega-weighted H(curl) inner product (identity coefficients)."""
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    A = element_curl_curl(mesh, 1.0, cells)
    M = element_mass(mesh, 1.0, cells)
    return _scatter(mesh, A + omega**2 * M, cells)


def curl_omega_norm(v: np.ndarray, mesh: Mesh, omega: float, cells=None,
                    gram: sp.spmatrix | None = None) -> float:
    """sqrt( ||curl v||^2 + omega^2 ||v||^2 ), optionally on a cell subset."""
    N = norm_matrix(mesh, omega, cells) if gram is None else gram
    val = np.real(np.vdot(v, N @ v))
    return float(np.sqrt(max(val, 0.0)))


def free_block(A: sp.spmatrix, dofs: DofMap) -> sp.csr_matrix:
    return A.tocsr()[dofs.free][:, dofs.free]


def embed_free(v_free: np.ndarray, dofs: DofMap) -> np.ndarray:
    out = np.zeros(dofs.n_dofs, dtype=v_free.dtype)
    out[dofs.free] = v_free
    return out


# ---------------------------------------------------------------------------
# direct factorization wrapper
# ---------------------------------------------------------------------------

class SparseFactor:
    """Sparse LU with a real fast path and singularity detection.

    Matrices here are symmetric (possibly indefinite); SuperLU's pivoting
    handles the zero diagonal blocks of saddle-point systems.
    """

    def __init__(self, A: sp.spmatrix, label: str = "system"):
        A = A.tocsc()
        if np.iscomplexobj(A) and np.abs(A.data.imag).max(initial=0.0) == 0.0:
            A = sp.csc_matrix((np.ascontiguousarray(A.data.real), A.indices, A.indptr),
                              shape=A.shape)
        self._real = not np.iscomplexobj(A)
        self.label = label
        self.shape = A.shape
        try:
            # MMD on A^T+A: about half the fill of COLAMD on these
            # symmetric-pattern saddle systems.
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SingularSystemError(f"{label}: singular factorization ({exc})") from exc
        diag_u = self._lu.U.diagonal()
        scale = np.abs(diag_u).max(initial=0.0)
        if scale == 0.0 or np.abs(diag_u).min() < 1e-14 * scale:
            raise SingularSystemError(f"{label}: numerically singular system")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b)
        if self._real and np.iscomplexobj(b):
            return self._lu.solve(b.real.copy()) + 1j * self._lu.solve(b.imag.copy())
        return self._lu.solve(b.astype(float, copy=False) if self._real else b)


# ---------------------------------------------------------------------------
# debug exports
# ---------------------------------------------------------------------------

def export_matrix(path, A: sp.spmatrix) -> None:
    """Coordinate text format: row col re im, one entry per line."""
    A = A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row, A.col, A.data):
            z = complex(v)
            fh.write(f"{r} {c} {z.real:.17g} {z.imag:.17g}\n")


def export_vector(path, v: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(f"{v.size}\n")
        for i, x in enumerate(v):
            z = complex(x)
            fh.write(f"{i} {z.real:.17g} {z.imag:.17g}\n")
