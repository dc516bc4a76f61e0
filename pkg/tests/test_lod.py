import numpy as np
import pytest
import scipy.sparse as sp

from maxlod.corrector import CorrectorBasis, assemble_corrector_basis
from maxlod.fem import (SparseFactor, assemble_B, assemble_load,
                        build_dof_map, curl_omega_norm, free_block)
from maxlod.lod import (LodResonanceError, LodSystem, assemble_lod,
                        corrected_basis, m_schedule, solve_ideal, solve_lod)
from maxlod.mesh import build_structured_mesh, refine

from conftest import identity_coeff, smooth_source


@pytest.fixture(scope="module")
def setting():
    pair = refine(build_structured_mesh(2), 2)
    mu = identity_coeff(pair.fine)
    dofs = build_dof_map(pair.fine)
    f = assemble_load(pair.fine, dofs, smooth_source)
    return pair, mu, mu, 1.0, f


def _zero_basis(pair):
    K = sp.csr_matrix((pair.fine.n_edges, pair.coarse.n_edges))
    return CorrectorBasis(K=K, m=0, manifest={})


def test_m_schedule_values():
    assert m_schedule(0.5) == 2
    assert m_schedule(0.25) == 2
    assert m_schedule(1 / 8) == 3
    assert m_schedule(1 / 16) == 4
    assert m_schedule(1 / 10) == 4


def test_symmetric_matrix(setting):
    pair, mu, eps, omega, f = setting
    basis = assemble_corrector_basis(pair, mu, eps, omega, m=1)
    sys_ = assemble_lod(pair, mu, eps, omega, basis, f)
    np.testing.assert_allclose(sys_.matrix, sys_.matrix.T, atol=1e-12)
    assert sys_.meta["coarse_dim"] == sys_.free_edges.size
    assert sys_.meta["m"] == 1


def test_zero_source_gives_zero(setting):
    pair, mu, eps, omega, _ = setting
    basis = _zero_basis(pair)
    sys_ = assemble_lod(pair, mu, eps, omega, basis,
                        np.zeros(pair.fine.n_edges))
    u_full, u_ms = solve_lod(sys_)
    assert abs(u_full).max() == 0.0
    assert abs(u_ms).max(initial=0.0) == 0.0


def test_zero_basis_matrix_is_embedded_galerkin(setting):
    # With K = 0 the coarse matrix is R' B R on free coarse edges.
    pair, mu, eps, omega, f = setting
    from maxlod.interp import embed_coarse
    R = embed_coarse(pair)
    dofs = build_dof_map(pair.fine)
    B = assemble_B(pair.fine, dofs, mu, eps, omega)
    free = np.flatnonzero(~pair.coarse.boundary_edge)
    ref = np.asarray((R.T @ (B @ R)).todense())[np.ix_(free, free)]
    sys_ = assemble_lod(pair, mu, eps, omega, _zero_basis(pair), f)
    np.testing.assert_allclose(sys_.matrix, ref, atol=1e-12)


def test_galerkin_residual(setting):
    # The fine residual of u_ms is orthogonal to every corrected basis vector.
    pair, mu, eps, omega, f = setting
    basis = assemble_corrector_basis(pair, mu, eps, omega, m=2)
    sys_ = assemble_lod(pair, mu, eps, omega, basis, f)
    _, u_ms = solve_lod(sys_)
    dofs = build_dof_map(pair.fine)
    B = assemble_B(pair.fine, dofs, mu, eps, omega)
    res = sys_.basis_fine.T @ (B @ u_ms) - sys_.basis_fine.T @ f
    assert abs(res).max() <= 1e-9 * max(abs(f).max(), 1e-300)


def test_ideal_decomposition(setting):
    # u_ms + G(f) equals the fine Galerkin solution.
    pair, mu, eps, omega, f = setting
    u_full, u_ms, g_f, basis = solve_ideal(pair, mu, eps, omega, f)
    dofs = build_dof_map(pair.fine)
    B = assemble_B(pair.fine, dofs, mu, eps, omega)
    fac = SparseFactor(free_block(B, dofs).tocsc())
    u_h = np.zeros(pair.fine.n_edges)
    u_h[dofs.free] = fac.solve(f[dofs.free])
    err = curl_omega_norm(u_ms + g_f - u_h, pair.fine, omega)
    ref = max(curl_omega_norm(u_h, pair.fine, omega), 1e-300)
    assert err <= 1e-8 * ref


def test_saturated_localized_matches_ideal(setting):
    pair, mu, eps, omega, f = setting
    u_full_i, u_ms_i, _, _ = solve_ideal(pair, mu, eps, omega, f)
    basis = assemble_corrector_basis(pair, mu, eps, omega, m=6)
    sys_ = assemble_lod(pair, mu, eps, omega, basis, f)
    u_full_l, u_ms_l = solve_lod(sys_)
    np.testing.assert_allclose(u_full_l, u_full_i[:u_full_l.size], atol=1e-8)
    err = curl_omega_norm(u_ms_l - u_ms_i, pair.fine, omega)
    assert err <= 1e-8 * max(curl_omega_norm(u_ms_i, pair.fine, omega), 1e-300)


def test_basis_shape_validation(setting):
    pair, mu, eps, omega, f = setting
    bad = CorrectorBasis(K=sp.csr_matrix((3, 3)), m=1, manifest={})
    with pytest.raises(ValueError):
        assemble_lod(pair, mu, eps, omega, bad, f)


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_resonance_error():
    free = np.arange(2)
    sys_ = LodSystem(matrix=np.zeros((2, 2)), load=np.ones(2),
                     free_edges=free, basis_fine=sp.csr_matrix((5, 2)))
    with pytest.raises(LodResonanceError):
        solve_lod(sys_)


def test_corrected_basis_columns(setting):
    pair, mu, eps, omega, _ = setting
    basis = _zero_basis(pair)
    V, free_edges = corrected_basis(pair, basis)
    from maxlod.interp import embed_coarse
    R = embed_coarse(pair).tocsc()
    for j, E in enumerate(free_edges[:10]):
        d = (V[:, j] - R[:, E])
        assert abs(d.toarray()).max(initial=0.0) == 0.0
