import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from zdecay.errors import InvalidArgument, ResolutionError
from zdecay.fock import NU, NUBAR, build_basis, toy_grid
from zdecay.hamiltonian import (pair_operator_check, assemble, contracted_bound_check, cutoff_family,
                                interior_vectors, load_operator, pull_through_residual, relative_bound_check,
                                restriction_residual, save_operator, shell_bound_check, shell_tail_scaling,
                                tensor_identity_residual)
from zdecay.kernels import KernelTable, zero_table
from zdecay.spectral import lowest_eigenpairs

from conftest import surrogate_table


def herm_residual(M):
    d = M - M.conj().T
    return float(abs(d).max()) if d.nnz else 0.0


def test_free_hamiltonian(basis, table):
    hs = assemble(basis, table, 0.0)
    assert abs(hs.H.matrix - hs.H0.matrix).max() == 0
    ep = lowest_eigenpairs(hs.H, 1, method="lanczos")
    assert abs(ep.values[0]) < 1e-12
    assert abs(abs(ep.vectors[0, 0]) - 1) < 1e-10


def test_single_entry_kernel_enumeration(toy8):
    b, _ = toy8
    g = b.grid
    c = 0.7 - 0.2j
    F = np.zeros((1, 1, 1), complex)
    F[0, 0, 0] = c
    hs = assemble(b, KernelTable(g, F, F.copy()), 1.0)
    M = hs.HI.matrix.tocoo()
    off = [(r, k, v) for r, k, v in zip(M.row, M.col, M.data) if r != k and v != 0]
    assert len(off) == 4
    mag = abs(c) * np.sqrt(g.nu_w[0] * g.nubar_w[0] * g.k_w[0])
    assert all(abs(abs(v) - mag) <= 1e-14 * mag for _, _, v in off)
    pair0 = b.index([0], [0], [0])
    vac1 = b.index((), (), [1])
    pair1 = b.index([0], [0], [1])
    assert {(r, k) for r, k, _ in off} == {(pair0, vac1), (vac1, pair0), (pair1, 0), (0, pair1)}


def test_dimension_mismatch(toy8):
    b, _ = toy8
    with pytest.raises(InvalidArgument):
        assemble(b, zero_table(toy_grid(2, 1, 1)), 0.1)


def test_negative_coupling(toy8):
    b, t = toy8
    with pytest.raises(InvalidArgument):
        assemble(b, t, -0.1)


def test_hermitian_and_linear(hset):
    for op in (hset.H, hset.HI, hset.H0):
        assert herm_residual(op.matrix) <= 1e-13
    diff = hset.H.matrix - hset.H0.matrix - hset.g * hset.HI.matrix
    assert (abs(diff).max() if diff.nnz else 0.0) <= 1e-15


def test_relative_bound(hset, toy_small):
    for hs in (hset, toy_small):
        rep = relative_bound_check(hs, trials=200)
        assert rep["violations"] == 0
        assert all(r <= 1 for r in rep["max_ratio"].values())


def test_family_levels(family):
    sig = family.sigmas
    assert sig[0] == pytest.approx(91.18)
    assert np.allclose(sig[1:] / sig[:-1], 0.25)
    assert [lv.sub_basis.dim for lv in family.levels] == [60, 240, 735, 1815]
    for lv in family.levels:
        assert herm_residual(lv.Hn.matrix) <= 1e-13
        assert herm_residual(lv.Kn.matrix) <= 1e-13


def test_family_restriction_and_tensor_identity(family):
    scale = abs(family.hset.H.matrix).max()
    for n in range(len(family.levels)):
        assert restriction_residual(family, n) <= 1e-15 * scale
        assert tensor_identity_residual(family, n) <= 1e-15 * scale


def test_tail_support(family):
    hs = family.hset
    grid = hs.basis.grid
    for n, lv in enumerate(family.levels):
        diff = hs.H.matrix - lv.Hn.matrix - hs.g * family.tail(n).matrix
        assert (abs(diff).max() if diff.nnz else 0.0) <= 1e-15
        tail_F = hs.table.F1 - lv.table.F1
        low = (grid.nu_p[:, None] < lv.sigma) | (grid.nubar_p[None, :] < lv.sigma)
        assert not np.any(tail_F[~low])
        assert np.array_equal(tail_F[low], hs.table.F1[low])


def test_level_zero_empty_on_toy():
    # every mode lies below m_Z: the level-0 interaction vanishes
    g = toy_grid(2, 2, 1)
    hs = assemble(build_basis(g, (1, 1, 1)), surrogate_table(g), 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fam = cutoff_family(hs, 0)
    assert fam.levels[0].HIn.matrix.nnz == 0


def test_depth_reduction_warns_or_raises(hset):
    with pytest.warns(UserWarning):
        fam = cutoff_family(hset, 6)
    assert len(fam.levels) == 4
    with pytest.raises(ResolutionError):
        cutoff_family(hset, 6, strict=True)


def test_shell_bound(family):
    for n in range(len(family.levels) - 1):
        rep = shell_bound_check(family, n)
        assert rep["violations"] == 0 and rep["max_ratio"] <= 1


def test_shell_slope_at_least_one(family):
    rep = shell_tail_scaling(family)
    assert rep["shell_slope"] >= 1 - 0.25
    assert all(np.isfinite(rep["tail1"])) and all(np.isfinite(rep["tail2"]))


def test_pull_through_free(toy_small):
    hs = toy_small.with_coupling(0.0)
    psi = interior_vectors(hs.basis, 5, np.random.default_rng(0))
    # exact up to rounding of (E + omega) - E
    scale = abs(hs.H.matrix).max()
    for species in (NU, NUBAR):
        for mode in range(2):
            assert pull_through_residual(hs, species, mode, psi) <= 1e-15 * scale


def test_pull_through_toy8(toy8):
    b, t = toy8
    hs = assemble(b, t, 0.1)
    psi = interior_vectors(b, 5, np.random.default_rng(1))
    for species in (NU, NUBAR):
        assert pull_through_residual(hs, species, 0, psi) <= 1e-12


def test_pull_through_interacting(toy_small, hset):
    rng = np.random.default_rng(2)
    for hs in (toy_small, hset):
        psi = interior_vectors(hs.basis, 3, rng)
        scale = abs(hs.H.matrix).max()
        for species in (NU, NUBAR):
            for mode in (0, 1):
                assert pull_through_residual(hs, species, mode, psi) <= 1e-12 * scale


def test_pull_through_cutoff_level(family):
    hs = family.hset
    lv = family.levels[1]
    psi = interior_vectors(hs.basis, 3, np.random.default_rng(3))
    r = pull_through_residual(hs, NU, 4, psi, H=lv.Hn.matrix, table=lv.table)
    assert r <= 1e-12 * abs(hs.H.matrix).max()


def test_contracted_bound(toy_small, hset):
    for hs in (toy_small, hset):
        for species in (NU, NUBAR):
            for mode in (0, 1):
                assert contracted_bound_check(hs, species, mode)["violations"] == 0


def test_contracted_bad_species(toy_small):
    with pytest.raises(InvalidArgument):
        pull_through_residual(toy_small, "boson", 0, toy_small.basis.vacuum())


def test_pair_operator_zero_kernel():
    rep = pair_operator_check(zero_table(toy_grid(2, 2, 1)), 0)
    assert all(v["max_lhs"] == 0 for k, v in rep.items() if not k.endswith("*") and k != "B2")
    assert rep["B1<=HD/p1"]["max_lhs"] == 0 and rep["B2"]["max_lhs"] == 0


def test_pair_operator_toy_and_default(toy_small, table):
    for tab, modes in ((toy_small.table, (0,)), (table, (0, 2))):
        for k in modes:
            rep = pair_operator_check(tab, k, trials=500)
            assert len(rep) == 6
            for key, v in rep.items():
                assert v["violations"] == 0 and v["min_slack"] >= -1e-12, key


def test_pair_operator_bad_mode(table):
    with pytest.raises(InvalidArgument):
        pair_operator_check(table, 99)


def test_operator_file_roundtrip(tmp_path, hset):
    path = tmp_path / "H.zdop"
    save_operator(hset.H, path)
    back = load_operator(path)
    assert back.dim == hset.H.dim
    d = back.matrix - hset.H.matrix
    assert d.nnz == 0 or abs(d).max() == 0


def test_operator_file_rejects_garbage(tmp_path):
    path = tmp_path / "x.zdop"
    path.write_bytes(b"JUNK" + bytes(40))
    with pytest.raises(InvalidArgument):
        load_operator(path)
