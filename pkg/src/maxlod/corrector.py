"""Corrector problems: kernel-constrained saddle-point solves.

The corrector Green's operator G maps a source functional F to the unique
w in W (the kernel of the coarse interpolation) with B(w, q) = F(q) for all
q in W.  The constraint w in W is enforced by Lagrange multipliers:

    [ B   P^T ] [ w ]   [ F ]
    [ P    0  ] [ y ] = [ 0 ]

Localized correctors solve the same system on an element patch, with zero
tangential traces on the patch boundary and the patch-local interpolation
as constraint.  The corrector basis realizing K_m(v) = -sum_T G_{T,m}(L_T v)
is accumulated in a fixed element order so results are reproducible
regardless of the worker-thread count.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (DofMap, SingularSystemError, SparseFactor, assemble_B,
                  build_dof_map, export_vector)
from .interp import (InterpolationPair, _fine_cells_by_coarse,
                     build_interpolation, build_interpolation_local,
                     embed_coarse)
from .mesh import MeshPair, Patch
from .mesh import patch as make_patch

THREAD_ENV = "MAXLOD_THREADS"
CONSTRAINT_TOL = 1e-10


class PatchResonanceError(RuntimeError):
    """The constrained patch problem is singular at this frequency."""


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREAD_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class CorrectorProblem:
    """One kernel-constrained solve: B on the patch unknowns plus constraints."""

    label: str
    free_fine: np.ndarray        # global fine-edge indices of the unknowns
    system: sp.csr_matrix        # (n, n) restriction of B
    constraints: sp.csr_matrix   # (c, n) patch interpolation rows
    rhs: np.ndarray              # (n,) or (n, k)


@dataclass
class _PatchContext:
    ops: InterpolationPair
    free_fine: np.ndarray
    factor: SparseFactor
    n_unknowns: int
    n_constraints: int


@dataclass
class CorrectorBasis:
    """Fine-space corrector vectors K_m(phi_E), one column per coarse edge."""

    K: sp.csr_matrix             # (ne_fine, ne_coarse); essential columns zero
    m: int
    manifest: dict = field(default_factory=dict)


def _saddle_factor(system: sp.spmatrix, constraints: sp.spmatrix,
                   label: str) -> SparseFactor:
    n, c = system.shape[0], constraints.shape[0]
    S = sp.bmat([[system, constraints.T],
                 [constraints, None]], format="csc")
    try:
        return SparseFactor(S, label=label)
    except SingularSystemError as exc:
        raise PatchResonanceError(
            f"{label}: singular constrained system "
            f"({n} unknowns, {c} constraints): {exc}") from exc


def solve_corrector(problem: CorrectorProblem) -> np.ndarray:
    """Solve one corrector problem; returns w on `free_fine` with P_T w ~ 0."""
    factor = _saddle_factor(problem.system, problem.constraints, problem.label)
    return _saddle_apply(factor, problem.system.shape[0],
                         problem.constraints, problem.rhs, problem.label)


def _saddle_apply(factor: SparseFactor, n: int, constraints: sp.spmatrix,
                  rhs: np.ndarray, label: str) -> np.ndarray:
    rhs = np.asarray(rhs)
    squeeze = rhs.ndim == 1
    rhs2 = rhs.reshape(n, -1)
    full = np.zeros((factor.shape[0], rhs2.shape[1]), dtype=rhs2.dtype)
    full[:n] = rhs2
    sol = factor.solve(full)
    w = sol[:n]
    defect = np.abs(constraints @ w).max(initial=0.0)
    scale = max(np.abs(w).max(initial=0.0), 1e-300)
    if defect > CONSTRAINT_TOL * max(scale, 1.0):
        raise PatchResonanceError(
            f"{label}: constraint residual {defect:.2e} exceeds tolerance")
    return w[:, 0] if squeeze else w


def _build_context(pair: MeshPair, B: sp.spmatrix, coarse_cells: np.ndarray,
                   label: str, R: sp.csr_matrix | None,
                   whole_domain: bool, reference=None) -> _PatchContext:
    if whole_domain and reference is not None:
        ops = reference
    elif whole_domain:
        ops = build_interpolation(pair, R=R)
    else:
        ops = build_interpolation_local(
            pair, Patch(seed_cell=-1, order_m=0, cells=np.asarray(coarse_cells)),
            R=R, reference=reference)
    free_fine = np.flatnonzero(ops.free_fine_edges)
    free_coarse = np.flatnonzero(ops.free_coarse_edges)
    system = B[np.ix_(free_fine, free_fine)].tocsr()
    constraints = ops.P[free_coarse][:, free_fine].tocsr()
    factor = _saddle_factor(system, constraints, label)
    return _PatchContext(ops=ops, free_fine=free_fine, factor=factor,
                         n_unknowns=free_fine.size, n_constraints=free_coarse.size)


class IdealCorrector:
    """Corrector Green's operator on the whole domain (small meshes only)."""

    def __init__(self, pair: MeshPair, mu, eps, omega: float,
                 R: sp.csr_matrix | None = None, dof_cap: int = 100_000,
                 B: sp.spmatrix | None = None):
        self.pair = pair
        self.dofs = build_dof_map(pair.fine)
        if self.dofs.n_free > dof_cap:
            raise ValueError(
                f"ideal corrector: {self.dofs.n_free} free fine DOFs exceed "
                f"the cap {dof_cap}; use localized correctors instead")
        if B is None:
            B = assemble_B(pair.fine, self.dofs, mu, eps, omega)
        self.B = B.tocsr()
        self.ctx = _build_context(pair, self.B, np.arange(pair.coarse.n_cells),
                                  "ideal corrector", R, whole_domain=True)
        self.ops = self.ctx.ops

    def apply(self, F: np.ndarray) -> np.ndarray:
        """G(F) as a full fine vector; F given on all fine edges."""
        F = np.asarray(F, dtype=float)
        squeeze = F.ndim == 1
        F2 = F.reshape(self.pair.fine.n_edges, -1)
        w = _saddle_apply(self.ctx.factor, self.ctx.n_unknowns, self.ctx.ops.P[
            np.flatnonzero(self.ctx.ops.free_coarse_edges)][:, self.ctx.free_fine],
            F2[self.ctx.free_fine], "ideal corrector")
        out = np.zeros_like(F2)
        out[self.ctx.free_fine] = w
        return out[:, 0] if squeeze else out


def element_source(pair: MeshPair, dofs: DofMap, mu, eps, omega: float,
                   T: int, R: sp.csr_matrix,
                   fine_cells: np.ndarray | None = None) -> np.ndarray:
    """Functionals w -> B_T(R phi_E, w) for the six coarse edges of cell T.

    Returns a dense (ne_fine, 6) block, column k for local coarse edge k of T.
    Supported on fine edges of cells inside T only.
    """
    if fine_cells is None:
        fine_cells = np.flatnonzero(pair.fine2coarse == T)
    B_T = assemble_B(pair.fine, dofs, mu, eps, omega, cells=fine_cells)
    cols = pair.coarse.cell2edge[T]
    return np.asarray((B_T @ R[:, cols]).todense())


def ideal_basis(pair: MeshPair, mu, eps, omega: float,
                R: sp.csr_matrix | None = None, dof_cap: int = 100_000,
                green: IdealCorrector | None = None) -> CorrectorBasis:
    """Ideal corrector basis: column E is K(phi_E) = -G(B . R phi_E)."""
    if green is None:
        green = IdealCorrector(pair, mu, eps, omega, R=R, dof_cap=dof_cap)
    R = green.ctx.ops.R
    free_E = np.flatnonzero(~_coarse_boundary_edges(pair))
    cols = []
    chunk = 64
    for start in range(0, free_E.size, chunk):
        idx = free_E[start:start + chunk]
        rhs = -np.asarray((green.B @ R[:, idx]).todense())
        cols.append(green.apply(rhs))
    K = np.zeros((pair.fine.n_edges, pair.coarse.n_edges))
    if free_E.size:
        K[:, free_E] = np.concatenate(cols, axis=1)
    return CorrectorBasis(K=sp.csr_matrix(K), m=-1,
                          manifest={"kind": "ideal", "n_columns": int(free_E.size)})


def _coarse_boundary_edges(pair: MeshPair) -> np.ndarray:
    return pair.coarse.boundary_edge


def assemble_corrector_basis(pair: MeshPair, mu, eps, omega: float, m: int,
                             R: sp.csr_matrix | None = None,
                             cache_size: int = 4,
                             n_threads: int | None = None,
                             record_timings: bool = False,
                             ops=None) -> CorrectorBasis:
    """Localized corrector basis K_m by patch solves, one patch per coarse cell.

    The six tetrahedra of each Kuhn subcube share one patch: the m-layer
    closure of the subcube, i.e. the union of their six element patches.
    This contains every individual element patch (localization error can only
    decrease) and collapses their six factorizations into one.

    Patch factorizations are cached by cell set (saturated patches collapse to
    a single factorization).  Accumulation runs in ascending cell order.
    """
    if m < 1:
        raise ValueError("oversampling order m must be >= 1")
    coarse, fine = pair.coarse, pair.fine
    dofs = build_dof_map(fine)
    B = assemble_B(fine, dofs, mu, eps, omega).tocsr()
    if ops is not None and R is None:
        R = ops.R
    if R is None:
        R = embed_coarse(pair)
    fine_by_coarse = _fine_cells_by_coarse(pair)
    boundary_E = _coarse_boundary_edges(pair)
    reference = ops if ops is not None else build_interpolation(pair, R=R)

    cache: OrderedDict[bytes, _PatchContext] = OrderedDict()

    def context_for(cells: np.ndarray, label: str) -> _PatchContext:
        key = cells.tobytes()
        ctx = cache.get(key)
        if ctx is None:
            whole = cells.size == coarse.n_cells
            ctx = _build_context(pair, B, cells, label, R, whole_domain=whole,
                                 reference=reference)
            cache[key] = ctx
            while len(cache) > cache_size:
                cache.popitem(last=False)
        else:
            cache.move_to_end(key)
        return ctx

    import time as _time

    cube_patches: dict[int, np.ndarray] = {}

    def patch_cells_for(T: int) -> np.ndarray:
        # Cells come six per subcube in construction order (see mesh module).
        cube = T // 6
        cells = cube_patches.get(cube)
        if cells is None:
            cells = np.unique(np.concatenate(
                [make_patch(coarse, Tc, m).cells
                 for Tc in range(6 * cube, 6 * cube + 6)]))
            cube_patches[cube] = cells
        return cells

    def solve_one(T: int):
        t0 = _time.perf_counter()
        pcells = patch_cells_for(T)
        ctx = context_for(pcells, f"patch(T={T}, m={m})")
        src = element_source(pair, dofs, mu, eps, omega, T, R,
                             fine_cells=fine_by_coarse[T])
        cols = coarse.cell2edge[T]
        keep = ~boundary_E[cols]
        rhs = -src[ctx.free_fine][:, keep]
        C = ctx.ops.P[np.flatnonzero(ctx.ops.free_coarse_edges)][:, ctx.free_fine]
        try:
            w = _saddle_apply(ctx.factor, ctx.n_unknowns, C, rhs,
                              f"patch(T={T}, m={m})")
        except PatchResonanceError as exc:
            raise PatchResonanceError(f"T={T}, m={m}: {exc}") from exc
        return (T, cols[keep], ctx.free_fine, w,
                pcells.size, _time.perf_counter() - t0)

    n_threads = thread_count() if n_threads is None else max(1, n_threads)
    order = range(coarse.n_cells)
    if n_threads == 1:
        results = [solve_one(T) for T in order]
    else:
        # The factor cache is filled serially for correctness; only the
        # triangular solves benefit from threads here.
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(solve_one, order))

    rows, cols_out, data = [], [], []
    patch_sizes = {}
    timings = {}
    for T, Ecols, ffree, w, psize, dt in results:   # ascending T: deterministic
        patch_sizes[int(T)] = int(psize)
        if record_timings:
            timings[int(T)] = dt
        for k, E in enumerate(Ecols):
            rows.append(ffree)
            cols_out.append(np.full(ffree.size, E, dtype=np.int64))
            data.append(w[:, k])
    if rows:
        K = sp.coo_matrix(
            (np.concatenate(data),
             (np.concatenate(rows), np.concatenate(cols_out))),
            shape=(fine.n_edges, coarse.n_edges)).tocsr()
    else:
        K = sp.csr_matrix((fine.n_edges, coarse.n_edges))
    manifest = {"kind": "localized", "m": m, "patch_cells": patch_sizes,
                "n_threads": n_threads}
    if record_timings:
        manifest["wall_s"] = timings
    return CorrectorBasis(K=K, m=m, manifest=manifest)


def localized_element_corrector(pair: MeshPair, mu, eps, omega: float,
                                T: int, m: int, F: np.ndarray,
                                R: sp.csr_matrix | None = None,
                                B: sp.spmatrix | None = None,
                                reference=None) -> np.ndarray:
    """G_{T,m}(F) for a single source functional, as a full fine vector."""
    coarse, fine = pair.coarse, pair.fine
    dofs = build_dof_map(fine)
    if B is None:
        B = assemble_B(fine, dofs, mu, eps, omega).tocsr()
    if R is None:
        R = embed_coarse(pair)
    pat = make_patch(coarse, T, m)
    ctx = _build_context(pair, B, pat.cells, f"patch(T={T}, m={m})", R,
                         whole_domain=pat.cells.size == coarse.n_cells,
                         reference=reference)
    C = ctx.ops.P[np.flatnonzero(ctx.ops.free_coarse_edges)][:, ctx.free_fine]
    w = _saddle_apply(ctx.factor, ctx.n_unknowns, C,
                      np.asarray(F)[ctx.free_fine], f"patch(T={T}, m={m})")
    out = np.zeros(fine.n_edges)
    out[ctx.free_fine] = w
    return out


def export_basis(basis: CorrectorBasis, directory) -> None:
    """One coordinate-text vector per coarse edge plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    Kc = basis.K.tocsc()
    nonzero_cols = np.flatnonzero(np.diff(Kc.indptr))
    for E in nonzero_cols:
        col = Kc[:, E].toarray().ravel()
        export_vector(os.path.join(directory, f"corrector_{E:06d}.txt"), col)
    manifest = dict(basis.manifest)
    manifest["m"] = basis.m
    manifest["columns"] = [int(E) for E in nonzero_cols]
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
