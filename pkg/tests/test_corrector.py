import numpy as np
import pytest
import scipy.sparse as sp

from maxlod import corrector as corr
from maxlod.corrector import (CorrectorProblem, IdealCorrector,
                              PatchResonanceError, assemble_corrector_basis,
                              element_source, ideal_basis, solve_corrector)
from maxlod.fem import assemble_B, build_dof_map, curl_omega_norm
from maxlod.interp import build_interpolation, embed_coarse
from maxlod.mesh import build_structured_mesh, patch, refine

from conftest import identity_coeff


@pytest.fixture(scope="module")
def setting():
    pair = refine(build_structured_mesh(2), 2)
    mu = identity_coeff(pair.fine)
    return pair, mu, mu, 1.0


@pytest.fixture(scope="module")
def green(setting):
    pair, mu, eps, omega = setting
    return IdealCorrector(pair, mu, eps, omega)


class TestSolveCorrector:
    def _problem(self, setting, rhs_fn):
        pair, mu, eps, omega = setting
        dofs = build_dof_map(pair.fine)
        B = assemble_B(pair.fine, dofs, mu, eps, omega).tocsr()
        ops = build_interpolation(pair)
        ff = np.flatnonzero(ops.free_fine_edges)
        fe = np.flatnonzero(ops.free_coarse_edges)
        system = B[np.ix_(ff, ff)].tocsr()
        constraints = ops.P[fe][:, ff].tocsr()
        rhs = rhs_fn(ff.size)
        return CorrectorProblem(label="test", free_fine=ff, system=system,
                                constraints=constraints, rhs=rhs)

    def test_zero_source(self, setting):
        p = self._problem(setting, lambda n: np.zeros(n))
        w = solve_corrector(p)
        assert abs(w).max() < 1e-14

    def test_constraint_residual(self, setting):
        rng = np.random.default_rng(0)
        p = self._problem(setting, lambda n: rng.standard_normal(n))
        w = solve_corrector(p)
        assert abs(p.constraints @ w).max() <= 1e-10 * max(abs(w).max(), 1.0)

    def test_variational_identity(self, setting):
        # For any q with P q = 0, q' B w = q' F.
        rng = np.random.default_rng(1)
        p = self._problem(setting, lambda n: rng.standard_normal(n))
        w = solve_corrector(p)
        C = p.constraints.toarray()
        # Euclidean projector onto ker C
        pinv = np.linalg.pinv(C)
        for _ in range(50):
            q = rng.standard_normal(w.size)
            q = q - pinv @ (C @ q)
            lhs = q @ (p.system @ w)
            rhs = q @ p.rhs
            assert abs(lhs - rhs) <= 1e-9 * max(
                np.linalg.norm(q) * np.linalg.norm(p.rhs), 1e-300)

    def test_linearity(self, setting):
        rng = np.random.default_rng(2)
        p = self._problem(setting, lambda n: rng.standard_normal((n, 2)))
        w = solve_corrector(p)
        p_sum = CorrectorProblem(label="sum", free_fine=p.free_fine,
                                 system=p.system, constraints=p.constraints,
                                 rhs=p.rhs.sum(axis=1))
        w_sum = solve_corrector(p_sum)
        np.testing.assert_allclose(w.sum(axis=1), w_sum, atol=1e-9)


class TestIdealCorrector:
    def test_kernel_membership(self, setting, green):
        pair, mu, eps, omega = setting
        rng = np.random.default_rng(3)
        F = rng.standard_normal(pair.fine.n_edges)
        g = green.apply(F)
        freeE = np.flatnonzero(green.ops.free_coarse_edges)
        assert abs((green.ops.P @ g)[freeE]).max() <= 1e-10 * max(abs(g).max(), 1.0)

    def test_zero_functional(self, setting, green):
        g = green.apply(np.zeros(setting[0].fine.n_edges))
        assert abs(g).max() == 0.0

    def test_cap_enforced(self, setting):
        pair, mu, eps, omega = setting
        with pytest.raises(ValueError, match="cap"):
            IdealCorrector(pair, mu, eps, omega, dof_cap=10)

    def test_green_scales_with_H(self):
        # ||G(f)||_{curl,omega} at H=1/4 is observably smaller than at H=1/2
        # with a near-linear two-level slope.
        from maxlod.fem import assemble_load
        from conftest import smooth_source
        norms = {}
        for nc in (2, 4):
            pair = refine(build_structured_mesh(nc), 2)
            mu = identity_coeff(pair.fine)
            g = IdealCorrector(pair, mu, mu, 1.0)
            f = assemble_load(pair.fine, g.dofs, smooth_source)
            norms[nc] = curl_omega_norm(g.apply(f), pair.fine, 1.0)
        slope = np.log2(norms[2] / norms[4])
        assert slope >= 0.7


class TestElementSource:
    def test_sum_over_elements_is_global(self, setting):
        pair, mu, eps, omega = setting
        dofs = build_dof_map(pair.fine)
        R = embed_coarse(pair)
        B = assemble_B(pair.fine, dofs, mu, eps, omega)
        total = np.zeros((pair.fine.n_edges, pair.coarse.n_edges))
        for T in range(pair.coarse.n_cells):
            src = element_source(pair, dofs, mu, eps, omega, T, R)
            total[:, pair.coarse.cell2edge[T]] += src
        ref = np.asarray((B @ R).todense())
        np.testing.assert_allclose(total, ref, atol=1e-12)

    def test_support(self, setting):
        pair, mu, eps, omega = setting
        dofs = build_dof_map(pair.fine)
        R = embed_coarse(pair)
        src = element_source(pair, dofs, mu, eps, omega, 0, R)
        inside = np.zeros(pair.fine.n_edges, dtype=bool)
        cells = np.flatnonzero(pair.fine2coarse == 0)
        inside[pair.fine.cell2edge[cells]] = True
        assert abs(src[~inside]).max() == 0.0


class TestBasis:
    def test_saturation_matches_ideal(self, setting, green):
        pair, mu, eps, omega = setting
        ideal = ideal_basis(pair, mu, eps, omega, green=green)
        loc = assemble_corrector_basis(pair, mu, eps, omega, m=6)
        freeE = np.flatnonzero(green.ops.free_coarse_edges)
        for E in freeE:
            d = np.asarray((ideal.K[:, E] - loc.K[:, E]).todense()).ravel()
            ref = np.asarray(ideal.K[:, E].todense()).ravel()
            num = curl_omega_norm(d, pair.fine, omega)
            den = max(curl_omega_norm(ref, pair.fine, omega), 1e-300)
            assert num <= 1e-8 * den

    def test_support_in_patches(self, setting):
        pair, mu, eps, omega = setting
        m = 1
        basis = assemble_corrector_basis(pair, mu, eps, omega, m=m)
        Kc = basis.K.tocsc()
        coarse = pair.coarse
        for E in np.flatnonzero(~coarse.boundary_edge):
            col = Kc[:, E]
            if col.nnz == 0:
                continue
            support_T = np.flatnonzero(
                (coarse.cell2edge == E).any(axis=1))
            allowed = np.zeros(pair.fine.n_edges, dtype=bool)
            for T in support_T:
                # each element shares the m-layer patch of its subcube
                for Tc in range(6 * (T // 6), 6 * (T // 6) + 6):
                    cells = patch(coarse, Tc, m).cells
                    fcells = np.flatnonzero(np.isin(pair.fine2coarse, cells))
                    allowed[pair.fine.cell2edge[fcells]] = True
            assert allowed[col.indices].all()

    def test_nonconformity_decreases_with_m(self, setting, green):
        pair, mu, eps, omega = setting
        freeE = np.flatnonzero(green.ops.free_coarse_edges)
        norms = []
        for m in (1, 2):
            basis = assemble_corrector_basis(pair, mu, eps, omega, m=m)
            pk = green.ops.P @ basis.K
            norms.append(abs(pk[freeE]).max())
        assert norms[1] < norms[0]

    def test_invalid_m(self, setting):
        pair, mu, eps, omega = setting
        with pytest.raises(ValueError):
            assemble_corrector_basis(pair, mu, eps, omega, m=0)

    def test_export(self, tmp_path, setting):
        import json
        pair, mu, eps, omega = setting
        basis = assemble_corrector_basis(pair, mu, eps, omega, m=1)
        corr.export_basis(basis, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["m"] == 1
        assert len(manifest["columns"]) > 0
        first = manifest["columns"][0]
        assert (tmp_path / f"corrector_{first:06d}.txt").exists()
