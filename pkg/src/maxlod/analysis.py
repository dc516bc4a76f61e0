"""Reference solves, error measurements, and parameter studies.

Everything here is measurement: the fine Galerkin reference, corrector decay
and truncation curves, inf-sup estimates in the omega-weighted H(curl)
geometry, and the CSV-producing study driver.  Studies are deterministic:
identical configuration and seed give bit-identical CSV output regardless of
the worker-thread count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import corrector as corr
from . import lod as lodmod
from .fem import (SingularSystemError, SparseFactor, assemble_B, assemble_load,
                  build_dof_map, curl_omega_norm, free_block, norm_matrix)
from .interp import build_interpolation, embed_coarse
from .mesh import MeshPair, build_structured_mesh, patch as make_patch, refine
from .problem import CoefficientSpec, ProblemSpec, SourceSpec, check_resolution


class ResonantFrequencyError(RuntimeError):
    """omega coincides (numerically) with a discrete eigenvalue."""


INFSUP_CAP = 5000
_CROSS_CHECK_CAP = 2500


# ---------------------------------------------------------------------------
# fine reference solve
# ---------------------------------------------------------------------------

def fine_solve(mesh, mu, eps, omega: float, f_vec: np.ndarray,
               cross_check: bool = False) -> np.ndarray:
    """Fine Galerkin solution on free edges, returned as a full edge vector."""
    dofs = build_dof_map(mesh)
    B = assemble_B(mesh, dofs, mu, eps, omega)
    Bf = free_block(B, dofs)
    bf = np.asarray(f_vec)[dofs.free]
    try:
        x = SparseFactor(Bf, label="fine system").solve(bf)
    except SingularSystemError as exc:
        raise ResonantFrequencyError(
            f"fine system singular at omega={omega}: {exc}") from exc
    res = np.abs(Bf @ x - bf).max(initial=0.0)
    scale = max(np.abs(bf).max(initial=0.0), 1e-300)
    if res > 1e-10 * max(scale, np.abs(x).max(initial=0.0)):
        raise ResonantFrequencyError(
            f"fine solve residual {res:.2e} too large at omega={omega}")
    if cross_check and dofs.n_free <= _CROSS_CHECK_CAP:
        xd = scipy.linalg.solve(Bf.toarray(), bf)
        if np.abs(x - xd).max() > 1e-10 * max(np.abs(xd).max(), 1e-300):
            raise ResonantFrequencyError(
                "sparse and dense factorizations disagree; system near-singular")
    out = np.zeros(mesh.n_edges, dtype=x.dtype)
    out[dofs.free] = x
    return out


# ---------------------------------------------------------------------------
# decay / truncation measurements
# ---------------------------------------------------------------------------

def _unit_element_source(pair: MeshPair, dofs, mu, eps, omega, T: int,
                         R: sp.csr_matrix) -> np.ndarray:
    """L_T applied to the sum of the free coarse basis functions of cell T."""
    src = corr.element_source(pair, dofs, mu, eps, omega, T, R)
    keep = ~pair.coarse.boundary_edge[pair.coarse.cell2edge[T]]
    if not keep.any():
        keep[:] = True
    return src[:, keep].sum(axis=1)


def measure_decay(pair: MeshPair, mu, eps, omega: float, T: int, m_max: int,
                  green: corr.IdealCorrector | None = None) -> np.ndarray:
    """||G(F_T)||_{curl,omega} outside N^m(T), for m = 0..m_max."""
    if green is None:
        green = corr.IdealCorrector(pair, mu, eps, omega)
    F_T = _unit_element_source(pair, green.dofs, mu, eps, omega, T, green.ops.R)
    g = green.apply(F_T)
    norms = np.empty(m_max + 1)
    for m in range(m_max + 1):
        pat = make_patch(pair.coarse, T, m)
        inside = np.isin(pair.fine2coarse, pat.cells)
        outside = np.flatnonzero(~inside)
        if outside.size == 0:
            norms[m] = 0.0
        else:
            norms[m] = curl_omega_norm(g, pair.fine, omega, cells=outside)
    return norms


def measure_truncation(pair: MeshPair, mu, eps, omega: float, T: int,
                       m_max: int, green: corr.IdealCorrector | None = None):
    """Truncation errors and non-conformity norms of G_{T,m} for m = 1..m_max.

    Returns (errors, nonconformity), both indexed by m-1.
    """
    if green is None:
        green = corr.IdealCorrector(pair, mu, eps, omega)
    F_T = _unit_element_source(pair, green.dofs, mu, eps, omega, T, green.ops.R)
    g_ideal = green.apply(F_T)
    errors = np.empty(m_max)
    nonconf = np.empty(m_max)
    freeE = np.flatnonzero(green.ops.free_coarse_edges)
    for m in range(1, m_max + 1):
        g_m = corr.localized_element_corrector(
            pair, mu, eps, omega, T, m, F_T, R=green.ops.R, B=green.B,
            reference=green.ops)
        errors[m - 1] = curl_omega_norm(g_ideal - g_m, pair.fine, omega)
        pi_gm = np.zeros(pair.coarse.n_edges)
        pi_gm[freeE] = (green.ops.P @ g_m)[freeE]
        nonconf[m - 1] = curl_omega_norm(green.ops.R @ pi_gm, pair.fine, omega)
    return errors, nonconf


def log_linear_fit(values: np.ndarray):
    """(slope ratio per step, R^2) of a log-linear fit; zeros are clipped."""
    y = np.log(np.maximum(np.asarray(values, dtype=float), 1e-300))
    x = np.arange(y.size, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), r2


def geometric_mean_ratio(values: np.ndarray) -> float:
    v = np.maximum(np.asarray(values, dtype=float), 1e-300)
    ratios = v[1:] / v[:-1]
    return float(np.exp(np.log(ratios).mean()))


# ---------------------------------------------------------------------------
# inf-sup estimation
# ---------------------------------------------------------------------------

def estimate_infsup(B: np.ndarray, N: np.ndarray, cap: int = INFSUP_CAP) -> float:
    """Smallest generalized singular value of B in the N inner product.

    B and N are dense on the same DOF set; N must be SPD.
    """
    B = np.asarray(B)
    if B.shape[0] > cap:
        raise ValueError(
            f"inf-sup estimation capped at {cap} DOFs (got {B.shape[0]}); "
            "use a smaller mesh")
    L = scipy.linalg.cholesky(np.asarray(N), lower=True)
    C = scipy.linalg.solve_triangular(L, B, lower=True)
    C = scipy.linalg.solve_triangular(L, C.conj().T, lower=True).conj().T
    sv = scipy.linalg.svdvals(C)
    return float(sv.min()) if sv.size else 0.0


def kernel_basis(P_free: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ker P (columns), via dense SVD."""
    u, s, vt = scipy.linalg.svd(P_free, full_matrices=True)
    tol = max(P_free.shape) * np.finfo(float).eps * (s.max() if s.size else 0.0)
    rank = int((s > tol).sum())
    return vt[rank:].T


def estimate_infsup_W(pair: MeshPair, mu, eps, omega: float,
                      ops=None, cap: int = INFSUP_CAP) -> float:
    """Inf-sup constant of B restricted to the kernel W = ker P."""
    if ops is None:
        ops = build_interpolation(pair)
    dofs = build_dof_map(pair.fine)
    if dofs.n_free > cap:
        raise ValueError(
            f"W-restricted inf-sup capped at {cap} free DOFs (got {dofs.n_free})")
    freeE = np.flatnonzero(ops.free_coarse_edges)
    P_free = ops.P[freeE][:, dofs.free].toarray()
    Z = kernel_basis(P_free)
    B = free_block(assemble_B(pair.fine, dofs, mu, eps, omega), dofs).toarray()
    N = free_block(norm_matrix(pair.fine, omega), dofs).toarray()
    return estimate_infsup(Z.T @ B @ Z, Z.T @ N @ Z, cap=cap)


def lod_infsup(system: lodmod.LodSystem, pair: MeshPair, omega: float,
               cap: int = INFSUP_CAP) -> float:
    """Inf-sup of the coarse multiscale matrix in the corrected-basis norm."""
    V = system.basis_fine
    if V.shape[1] > cap:
        raise ValueError(f"LOD inf-sup capped at {cap} coarse DOFs")
    N_fine = norm_matrix(pair.fine, omega)
    N = (V.conj().T @ (N_fine @ V)).toarray()
    return estimate_infsup(system.matrix, N, cap=cap)


# ---------------------------------------------------------------------------
# kernel functional-smallness proxy
# ---------------------------------------------------------------------------

def kernel_smallness_proxy(pair: MeshPair, ops, omega: float,
                           f_vec: np.ndarray, n_samples: int = 200,
                           seed: int = 0, cap: int = INFSUP_CAP) -> float:
    """sup over w in ker P of |(f, w)| / ||w||_{curl,omega}.

    Below `cap` free DOFs the supremum is computed exactly as the dual norm
    of f restricted to the kernel (dense).  Above the cap it falls back to a
    randomized lower bound, which can underestimate substantially in high
    dimension; treat fallback values as indicative only.
    """
    dofs = build_dof_map(pair.fine)
    freeE = np.flatnonzero(ops.free_coarse_edges)
    if dofs.n_free <= cap:
        P_free = ops.P[freeE][:, dofs.free].toarray()
        Z = kernel_basis(P_free)
        if Z.shape[1] == 0:
            return 0.0
        N = free_block(norm_matrix(pair.fine, omega), dofs).toarray()
        fz = Z.T @ np.asarray(f_vec)[dofs.free]
        if not fz.any():
            return 0.0
        val = fz @ scipy.linalg.solve(Z.T @ N @ Z, fz, assume_a="pos")
        return float(np.sqrt(max(val, 0.0)))
    P = ops.P[freeE][:, dofs.free].tocsr()
    PPt = (P @ P.T).toarray()
    lu, piv = scipy.linalg.lu_factor(PPt)
    gram = norm_matrix(pair.fine, omega)
    gram_free = free_block(gram, dofs).tocsr()
    f_free = np.asarray(f_vec)[dofs.free]
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_samples):
        v = rng.standard_normal(dofs.n_free)
        w = v - P.T @ scipy.linalg.lu_solve((lu, piv), P @ v)
        nw = np.sqrt(w @ (gram_free @ w))
        if nw <= 0:
            continue
        best = max(best, abs(f_free @ w) / nw)
    return best


# ---------------------------------------------------------------------------
# study driver
# ---------------------------------------------------------------------------

CSV_BASE_COLUMNS = ["run_id", "H", "h", "m", "omega", "coeff_kind", "seed",
                    "err_curl_omega", "err_coarse"]
CSV_TAIL_COLUMNS = ["nonconf_norm", "infsup_W", "infsup_LOD", "omegaH_flag",
                    "wall_ms", "status"]


@dataclass
class StudyRow:
    run_id: str
    H: float
    h: float
    m: int
    omega: float
    coeff_kind: str
    seed: int
    err_curl_omega: float | None = None
    err_coarse: float | None = None
    decay: list = field(default_factory=list)
    nonconf_norm: float | None = None
    infsup_W: float | None = None
    infsup_LOD: float | None = None
    omegaH_flag: bool = False
    wall_ms: float = 0.0
    status: str = "ok"


@dataclass
class StudyResult:
    rows: list
    decay_m_max: int = 0
    manifest: dict = field(default_factory=dict)

    def columns(self):
        decay_cols = [f"decay_m{m}" for m in range(self.decay_m_max + 1)]
        return CSV_BASE_COLUMNS + decay_cols + CSV_TAIL_COLUMNS

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for row in self.rows:
            decay = ["" if m >= len(row.decay) else _fmt(row.decay[m])
                     for m in range(self.decay_m_max + 1)]
            writer.writerow(
                [row.run_id, _fmt(row.H), _fmt(row.h), row.m, _fmt(row.omega),
                 row.coeff_kind, row.seed, _fmt(row.err_curl_omega),
                 _fmt(row.err_coarse)] + decay +
                [_fmt(row.nonconf_norm), _fmt(row.infsup_W),
                 _fmt(row.infsup_LOD), int(row.omegaH_flag),
                 _fmt(row.wall_ms), row.status])
        return buf.getvalue()

    def write(self, csv_path, manifest_path=None):
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv_text())
        if manifest_path is not None:
            with open(manifest_path, "w") as fh:
                json.dump(self.manifest, fh, indent=2, sort_keys=True)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _problem_from(cfg) -> ProblemSpec:
    return ProblemSpec(
        omega=cfg.omega,
        mu=CoefficientSpec(cfg.coeff_kind, contrast=cfg.contrast,
                           lo=cfg.lo, hi=cfg.hi),
        eps=CoefficientSpec(cfg.eps_kind, contrast=cfg.contrast,
                            lo=cfg.lo, hi=cfg.hi),
        source=SourceSpec(cfg.source_kind),
        seed=cfg.seed)


def run_study(cfg) -> StudyResult:
    """Execute one study ladder described by a configuration object.

    The configuration is duck-typed (the CLI's RunConfig fits); required
    attributes: command, n_fine, coarse_sizes, omega, omegas, m, m_max,
    coeff_kind, eps_kind, contrast, lo, hi, source_kind, seed,
    record_timings, dof_cap, seed_cell.
    """
    run_id = config_hash(cfg.to_payload() if hasattr(cfg, "to_payload")
                         else dict(vars(cfg)))
    if cfg.command == "study-convergence":
        result = _study_convergence(cfg, run_id)
    elif cfg.command == "study-decay":
        result = _study_decay(cfg, run_id)
    elif cfg.command == "study-infsup":
        result = _study_infsup(cfg, run_id)
    else:
        raise ValueError(f"unknown study command: {cfg.command}")
    result.manifest.setdefault("run_id", run_id)
    result.manifest.setdefault("command", cfg.command)
    return result


def _maybe_ms(t0: float, record: bool) -> float:
    # Wall-clock destroys bit-reproducibility; only recorded on request.
    return (time.perf_counter() - t0) * 1000.0 if record else 0.0


def _study_convergence(cfg, run_id: str) -> StudyResult:
    spec = _problem_from(cfg)
    rows = []
    fine = build_structured_mesh(cfg.n_fine)
    dofs = build_dof_map(fine)
    mu, eps = spec.materialize(fine)
    f_vec = assemble_load(fine, dofs, spec.source.as_callable())
    u_ref = fine_solve(fine, mu, eps, cfg.omega, f_vec)
    ref_norm = curl_omega_norm(u_ref, fine, cfg.omega)
    for n_coarse in cfg.coarse_sizes:
        t0 = time.perf_counter()
        H = 1.0 / n_coarse
        m = cfg.m if cfg.m is not None else lodmod.m_schedule(H)
        row = StudyRow(run_id=run_id, H=H, h=1.0 / cfg.n_fine, m=m,
                       omega=cfg.omega, coeff_kind=cfg.coeff_kind,
                       seed=cfg.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            row.omegaH_flag = check_resolution(cfg.omega, H)
        try:
            if cfg.n_fine % n_coarse:
                raise ValueError(f"n_fine={cfg.n_fine} not divisible by {n_coarse}")
            coarse = build_structured_mesh(n_coarse)
            pair = refine(coarse, cfg.n_fine // n_coarse)
            ops = build_interpolation(pair, R=embed_coarse(pair))
            basis = corr.assemble_corrector_basis(
                pair, mu, eps, cfg.omega, m,
                n_threads=corr.thread_count(), ops=ops)
            system = lodmod.assemble_lod(pair, mu, eps, cfg.omega, basis,
                                         f_vec, R=ops.R)
            u_Hm, u_ms = lodmod.solve_lod(system)
            row.err_curl_omega = curl_omega_norm(
                u_ref - u_ms, fine, cfg.omega) / max(ref_norm, 1e-300)
            pi_ref = np.zeros(pair.coarse.n_edges)
            freeE = np.flatnonzero(ops.free_coarse_edges)
            pi_ref[freeE] = (ops.P @ u_ref)[freeE]
            if u_Hm.size < pair.coarse.n_edges:
                u_Hm = np.concatenate(
                    [u_Hm, np.zeros(pair.coarse.n_edges - u_Hm.size)])
            row.err_coarse = curl_omega_norm(
                ops.R @ (pi_ref - u_Hm), fine, cfg.omega) / max(ref_norm, 1e-300)
            if system.matrix.shape[0] <= INFSUP_CAP:
                row.infsup_LOD = lod_infsup(system, pair, cfg.omega)
        except (corr.PatchResonanceError, lodmod.LodResonanceError,
                ResonantFrequencyError, ValueError) as exc:
            row.status = f"error: {exc}"
        row.wall_ms = _maybe_ms(t0, cfg.record_timings)
        rows.append(row)
    return StudyResult(rows=rows, decay_m_max=0,
                       manifest={"kind": "convergence",
                                 "n_fine": cfg.n_fine,
                                 "coarse_sizes": list(cfg.coarse_sizes),
                                 "row_semantics": "one row per coarse size"})


def _study_decay(cfg, run_id: str) -> StudyResult:
    """Three rows: exterior decay, truncation error, non-conformity.

    Row order is fixed and documented in the manifest; the decay_m columns of
    row 0 hold exterior norms for m = 0..m_max, rows 1 and 2 hold truncation
    and non-conformity for m = 1..m_max (column m0 left empty).
    """
    spec = _problem_from(cfg)
    n_coarse = cfg.coarse_sizes[0]
    coarse = build_structured_mesh(n_coarse)
    pair = refine(coarse, max(1, cfg.n_fine // n_coarse))
    mu, eps = spec.materialize(pair.fine)
    H = 1.0 / n_coarse
    m_used = cfg.m if cfg.m is not None else cfg.m_max
    T = cfg.seed_cell if cfg.seed_cell is not None else _central_cell(pair)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        flag = check_resolution(cfg.omega, H)

    def base_row():
        return StudyRow(run_id=run_id, H=H, h=1.0 / cfg.n_fine,
                        m=m_used, omega=cfg.omega, coeff_kind=cfg.coeff_kind,
                        seed=cfg.seed, omegaH_flag=flag)

    rows = [base_row() for _ in range(3)]
    t0 = time.perf_counter()
    try:
        green = corr.IdealCorrector(pair, mu, eps, cfg.omega, dof_cap=cfg.dof_cap)
        decay = measure_decay(pair, mu, eps, cfg.omega, T, cfg.m_max, green=green)
        trunc, nonconf = measure_truncation(pair, mu, eps, cfg.omega, T,
                                            cfg.m_max, green=green)
        rows[0].decay = list(decay)
        rows[1].decay = [None] + list(trunc)
        rows[2].decay = [None] + list(nonconf)
        rows[2].nonconf_norm = float(nonconf[-1])
    except (corr.PatchResonanceError, ResonantFrequencyError, ValueError) as exc:
        for row in rows:
            row.status = f"error: {exc}"
    ms = _maybe_ms(t0, cfg.record_timings)
    for row in rows:
        row.wall_ms = ms
    return StudyResult(
        rows=rows, decay_m_max=cfg.m_max,
        manifest={"kind": "decay", "seed_cell": int(T),
                  "row_semantics": ["exterior_norm", "truncation_error",
                                    "nonconformity_norm"]})


def _central_cell(pair: MeshPair) -> int:
    centroids = pair.coarse.vertices[pair.coarse.cells].mean(axis=1)
    center = 0.5 * (pair.coarse.box[0] + pair.coarse.box[1])
    return int(np.argmin(((centroids - center) ** 2).sum(axis=1)))


def _study_infsup(cfg, run_id: str) -> StudyResult:
    spec = _problem_from(cfg)
    n_coarse = cfg.coarse_sizes[0]
    coarse = build_structured_mesh(n_coarse)
    pair = refine(coarse, max(1, cfg.n_fine // n_coarse))
    mu, eps = spec.materialize(pair.fine)
    H = 1.0 / n_coarse
    rows = []
    omegas = cfg.omegas if cfg.omegas else [cfg.omega]
    ops = build_interpolation(pair)
    dofs = build_dof_map(pair.fine)
    f_vec = assemble_load(pair.fine, dofs, spec.source.as_callable())
    for omega in omegas:
        t0 = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            flag = check_resolution(omega, H)
        m = cfg.m if cfg.m is not None else lodmod.m_schedule(H)
        row = StudyRow(run_id=run_id, H=H, h=1.0 / cfg.n_fine, m=m,
                       omega=omega, coeff_kind=cfg.coeff_kind, seed=cfg.seed,
                       omegaH_flag=flag)
        try:
            row.infsup_W = estimate_infsup_W(pair, mu, eps, omega, ops=ops)
            basis = corr.assemble_corrector_basis(pair, mu, eps, omega, m)
            system = lodmod.assemble_lod(pair, mu, eps, omega, basis, f_vec)
            row.infsup_LOD = lod_infsup(system, pair, omega)
        except (corr.PatchResonanceError, ResonantFrequencyError,
                ValueError) as exc:
            row.status = f"error: {exc}"
        row.wall_ms = _maybe_ms(t0, cfg.record_timings)
        rows.append(row)
    return StudyResult(rows=rows, decay_m_max=0,
                       manifest={"kind": "infsup", "omegas": list(omegas)})
