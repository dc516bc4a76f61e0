"""Multiscale coarse systems built from corrected basis functions.

The quasi-local scheme seeks the coarse vector u with

    B((id + K_m) u, (id + K_m) v) = (f, (id + K_m) v)   for all coarse v,

where K_m is a corrector basis.  All entries are computed through the fine
space: the corrected basis of coarse edge E is the fine vector
R phi_E + K_m phi_E.  The coarse matrix is dense (coarse dimension is small);
its sparsity pattern is reported as a diagnostic instead of being exploited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .corrector import CorrectorBasis, IdealCorrector, ideal_basis
from .fem import assemble_B, build_dof_map, embed_free
from .interp import embed_coarse
from .mesh import MeshPair


class LodResonanceError(RuntimeError):
    """The coarse multiscale system is (numerically) singular."""


def m_schedule(H: float) -> int:
    """Default oversampling schedule m(H) = max(2, ceil(|log2 H|))."""
    return max(2, math.ceil(abs(math.log2(H))))


@dataclass
class LodSystem:
    matrix: np.ndarray            # (n_free, n_free) dense
    load: np.ndarray              # (n_free,)
    free_edges: np.ndarray        # coarse edge index per row/column
    basis_fine: sp.csr_matrix     # (ne_fine, n_free) corrected basis columns
    meta: dict = field(default_factory=dict)


def corrected_basis(pair: MeshPair, basis: CorrectorBasis,
                    R: sp.csr_matrix | None = None) -> tuple[sp.csr_matrix, np.ndarray]:
    """(R + K_m) restricted to free coarse edges, plus the edge index list."""
    if R is None:
        R = embed_coarse(pair)
    free_edges = np.flatnonzero(~pair.coarse.boundary_edge)
    V = (R + basis.K)[:, free_edges].tocsr()
    return V, free_edges


def assemble_lod(pair: MeshPair, mu, eps, omega: float, basis: CorrectorBasis,
                 f_vec: np.ndarray, R: sp.csr_matrix | None = None,
                 B: sp.spmatrix | None = None) -> LodSystem:
    if basis.K.shape != (pair.fine.n_edges, pair.coarse.n_edges):
        raise ValueError("corrector basis does not match the mesh pair")
    dofs = build_dof_map(pair.fine)
    if B is None:
        B = assemble_B(pair.fine, dofs, mu, eps, omega)
    V, free_edges = corrected_basis(pair, basis, R)
    S = (V.conj().T @ (B @ V)).toarray()
    load = V.conj().T @ np.asarray(f_vec)
    nnz_band = int((np.abs(S) > 1e-14 * max(np.abs(S).max(), 1e-300)).sum())
    return LodSystem(matrix=S, load=load, free_edges=free_edges, basis_fine=V,
                     meta={"m": basis.m, "omega": omega,
                           "H": float(pair.coarse.mesh_size),
                           "h": float(pair.fine.mesh_size),
                           "coarse_nnz": nnz_band,
                           "coarse_dim": int(free_edges.size)})


def solve_lod(system: LodSystem) -> tuple[np.ndarray, np.ndarray]:
    """Coarse solution (full coarse-edge vector) and fine reconstruction."""
    S, b = system.matrix, system.load
    try:
        lu, piv = scipy.linalg.lu_factor(S)
        x = scipy.linalg.lu_solve((lu, piv), b)
    except scipy.linalg.LinAlgError:
        x = None
    if x is None or not np.all(np.isfinite(x)) or (
            np.abs(S @ x - b).max(initial=0.0)
            > 1e-8 * max(np.abs(b).max(initial=0.0), 1e-300)):
        smin = scipy.linalg.svdvals(S).min() if S.size else 0.0
        raise LodResonanceError(
            f"multiscale coarse system is singular or ill-conditioned "
            f"(smallest singular value {smin:.3e})")
    u_full = np.zeros(int(system.free_edges.max(initial=-1)) + 1, dtype=x.dtype)
    u_full[system.free_edges] = x
    u_ms = system.basis_fine @ x
    return u_full, u_ms


def solve_ideal(pair: MeshPair, mu, eps, omega: float, f_vec: np.ndarray,
                dof_cap: int = 100_000):
    """Ideal scheme on small meshes.

    Returns (u_H full coarse vector, u_ideal fine reconstruction, g_f = G(f),
    ideal corrector basis).  The reconstruction satisfies
    u_ideal + g_f = fine Galerkin solution up to solver accuracy.
    """
    green = IdealCorrector(pair, mu, eps, omega, dof_cap=dof_cap)
    basis = ideal_basis(pair, mu, eps, omega, green=green)
    system = assemble_lod(pair, mu, eps, omega, basis, f_vec,
                          R=green.ops.R, B=green.B)
    # pad coarse-edge vector to full length even when trailing edges are free
    u_full, u_ms = solve_lod(system)
    if u_full.size < pair.coarse.n_edges:
        u_full = np.concatenate(
            [u_full, np.zeros(pair.coarse.n_edges - u_full.size, dtype=u_full.dtype)])
    g_f = green.apply(np.asarray(f_vec))
    return u_full, u_ms, g_f, basis
