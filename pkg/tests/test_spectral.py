import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from zdecay.errors import InvalidArgument, NumericFailure
from zdecay.fock import SparseHermitian, build_basis, toy_grid
from zdecay.hamiltonian import assemble, cutoff_family
from zdecay.kernels import zero_table
from zdecay.spectral import (SectorEigensystem, dense_eigenpairs, form_bound_constants, lanczos_eigenpairs,
                             lowest_eigenpairs, run_cascade, sector_eigenpairs, weyl_probe)

M_Z = 91.18


def test_free_eigenvalues_are_occupation_sums(basis):
    hs = assemble(basis, zero_table(basis.grid), 0.0)
    diag = np.sort(hs.h0_diag)
    for method in ("lanczos", "dense"):
        if method == "dense":
            b = build_basis(toy_grid(3, 3, 2), (2, 2, 2))
            h = assemble(b, zero_table(b.grid), 0.0)
            ep = lowest_eigenpairs(h.H, 10, method="dense")
            assert np.array_equal(ep.values, np.sort(h.h0_diag)[:10])
        else:
            ep = lowest_eigenpairs(hs.H, 6, method="lanczos")
            assert np.max(np.abs(ep.values - diag[:6])) <= 1e-12 * diag[-1]


def test_lanczos_matches_dense(toy_small, hset, eig):
    ep_l = lowest_eigenpairs(toy_small.H, 5, method="lanczos")
    ep_d = dense_eigenpairs(toy_small.H, 5)
    assert np.max(np.abs(ep_l.values - ep_d.values)) <= 1e-9
    ep = lowest_eigenpairs(hset.H, 6, method="lanczos")
    assert np.max(np.abs(ep.values - eig.values[:6])) <= 1e-9
    nrm = abs(hset.H.matrix).sum(axis=1).max()
    assert np.all(ep.residuals <= 1e-11 * nrm)
    assert np.all(np.diff(ep.values) >= 0)


def test_lanczos_sector_blocks(hset):
    M = hset.H.matrix.tocsr()
    for key, idx in sorted(hset.basis.sectors().items(), key=lambda kv: -len(kv[1]))[:2]:
        block = M[idx][:, idx]
        ep_l = lanczos_eigenpairs(block, 4)
        ep_d = dense_eigenpairs(block, 4)
        assert np.max(np.abs(ep_l.values - ep_d.values)) <= 1e-9


def test_degenerate_pair():
    b = build_basis(toy_grid(1, 1, 1), (1, 1, 1))
    hs = assemble(b, zero_table(b.grid), 0.0)
    # nu and nubar share the node m_Z/2; the boson shell lies elsewhere
    ep = lowest_eigenpairs(hs.H, 3, method="lanczos")
    assert abs(ep.values[0]) < 1e-12
    assert ep.values[1:3] == pytest.approx([M_Z / 2, M_Z / 2], abs=1e-12)
    M = sp.diags([0.0, 1.0, 1.0, 1.0, 2.0, 5.0, 5.0, 7.0])
    ep = lanczos_eigenpairs(M, 4)
    assert np.allclose(ep.values, [0, 1, 1, 1], atol=1e-12)


def test_lanczos_budget_exhausted():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((300, 300))
    with pytest.raises(NumericFailure):
        lanczos_eigenpairs(A + A.T, 20, tol=1e-15, krylov=25, max_restarts=1)


def test_bad_count_and_method(toy_small):
    with pytest.raises(InvalidArgument):
        lowest_eigenpairs(toy_small.H, 0)
    with pytest.raises(InvalidArgument):
        lowest_eigenpairs(toy_small.H, 2, method="magic")


def test_sector_system_matches_dense(toy_small):
    es = SectorEigensystem.build(toy_small.H, toy_small.basis)
    assert np.allclose(es.values, np.linalg.eigvalsh(toy_small.H.dense()), atol=1e-10)
    low = es.low(es.values[0] + 50.0)
    H = toy_small.H.dense()
    assert np.max(np.abs(H @ low.vectors - low.vectors * low.values)) <= 1e-10


def test_cascade_free(family):
    rec = run_cascade(family, g=0.0)
    assert np.all(rec.E_n == 0) and rec.E == 0
    assert np.all(rec.gap == rec.gap_free)
    assert np.all(rec.gap >= rec.sigma)
    assert np.all(rec.overlap_vac == 1)


def test_cascade_invariants(cascade):
    tol = 1e-10
    assert np.all(np.diff(cascade.E_n) <= tol)
    assert np.all(cascade.E <= cascade.E_n + tol)
    assert np.all((cascade.overlap_vac >= 0) & (cascade.overlap_vac <= 1 + tol))
    assert not cascade.degenerate


def test_overlap_ordering(family):
    weak = run_cascade(family, g=0.01, with_full=False)
    strong = run_cascade(family, g=0.1, with_full=False)
    assert np.all(weak.overlap_vac >= strong.overlap_vac - 1e-14)
    assert weak.overlap_vac.min() >= 0.5 and strong.overlap_vac.min() >= 0.5


def test_uniqueness_proxy(family):
    for g in (0.01, 0.05):
        rec = run_cascade(family, g=g, with_full=False)
        assert np.all(rec.gap / rec.sigma >= 0.5)


def test_gap_lower_bound(family, cascade):
    C_gap = form_bound_constants(family)["C_gap"]
    assert np.isfinite(C_gap) and C_gap > 0
    assert np.all(cascade.gap >= (1 - C_gap * cascade.g) * cascade.sigma)


def test_number_bound_printed_form(cascade):
    """||N^{1/2} phi_n|| <= (g/sqrt(m_Z)) (||F1/p1|| + ||F2/p1||) ||(H0+1)^{1/2} phi_n|| on every level."""
    for level in cascade.checks["number_bound"]:
        for side in ("plus", "minus"):
            assert level[side]["lhs"] <= level[side]["bound"] * (1 + 1e-9)


def test_number_bound_dimensionless_form(cascade):
    for level in cascade.checks["number_bound"]:
        for side in ("plus", "minus"):
            assert level[side]["lhs"] <= level[side]["bound_without_mz"] * (1 + 1e-9)


def test_weyl_exact_eigenvector(basis):
    hs = assemble(basis, zero_table(basis.grid), 0.0)
    lam = float(basis.grid.nu_p[3])
    rep = weyl_probe(hs, lam, length=2, width0=1e-3, ground=(0.0, basis.vacuum()))
    assert max(rep["residual"]) < 1e-12
    assert np.allclose(rep["norm"], 1.0, atol=1e-14)


def test_weyl_interacting(hset, eig):
    low = eig.low(eig.values[0] + 1.0)
    rep = weyl_probe(hset, 10.0, length=4, ground=(low.E, low.ground))
    assert np.allclose(rep["norm"], 1.0, atol=1e-10)
    r = rep["residual"]
    assert all(r[i + 1] <= 1.1 * r[i] for i in range(len(r) - 1))


def test_weyl_out_of_range(hset):
    with pytest.raises(InvalidArgument):
        weyl_probe(hset, 1e4)
