import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from zdecay.errors import InvalidArgument, ResourceLimit
from zdecay.fock import (BOSON, NU, NUBAR, SparseHermitian, algebra_residuals, annihilator, build_basis, dgamma,
                         geometric_grid, number_operator, toy_grid)


def brute_dim(n_nu, n_nubar, n_bos, caps):
    f = lambda n, c: sum(1 for occ in itertools.product((0, 1), repeat=n) if sum(occ) <= c)
    b = sum(1 for occ in itertools.product(range(caps[2] + 1), repeat=n_bos) if sum(occ) <= caps[2])
    return f(n_nu, caps[0]) * f(n_nubar, caps[1]) * b


def test_toy_dimensions():
    assert build_basis(toy_grid(1, 1, 1), (1, 1, 1)).dim == 8
    assert build_basis(toy_grid(2, 1, 1), (1, 0, 0)).dim == 3


def test_default_dimension():
    assert build_basis(geometric_grid(), (2, 2, 2)).dim == 7260


@settings(max_examples=25, deadline=None)
@given(n=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
       caps=st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)))
def test_dimension_matches_enumeration(n, caps):
    assert build_basis(toy_grid(*n), caps).dim == brute_dim(*n, caps)


def test_vacuum_first_and_creation_is_unit_vector():
    b = build_basis(toy_grid(3, 2, 2), (2, 2, 2))
    assert b.state(0) == ((), (), (0, 0))
    for s, mode in ((NU, 2), (NUBAR, 1), (BOSON, 1)):
        _, cdag = annihilator(b, s, mode)
        v = cdag @ b.vacuum()
        assert np.count_nonzero(v) == 1 and abs(np.sum(v) - 1) < 1e-15


def test_fermion_antisymmetry():
    b = build_basis(toy_grid(3, 3, 1), (2, 2, 1))
    vac = b.vacuum()
    c = {s: [annihilator(b, s, i)[1] for i in range(3)] for s in (NU, NUBAR)}
    for s in (NU, NUBAR):
        for i, j in itertools.combinations(range(3), 2):
            assert np.allclose(c[s][i] @ (c[s][j] @ vac), -(c[s][j] @ (c[s][i] @ vac)))
        assert np.count_nonzero(c[s][0] @ (c[s][0] @ vac)) == 0
    # nu and nubar anticommute
    assert np.allclose(c[NU][0] @ (c[NUBAR][1] @ vac), -(c[NUBAR][1] @ (c[NU][0] @ vac)))


def test_algebra_toy_exact():
    res = algebra_residuals(build_basis(toy_grid(1, 1, 1), (1, 1, 1)))
    assert max(res.values()) == 0.0


@settings(max_examples=15, deadline=None)
@given(n=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2)),
       caps=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)))
def test_algebra_random_instances(n, caps):
    res = algebra_residuals(build_basis(toy_grid(*n), caps))
    assert max(res.values()) <= 1e-12


def test_number_operator_is_dgamma_identity():
    b = build_basis(toy_grid(3, 2, 2), (2, 2, 2))
    for s, n in ((NU, 3), (NUBAR, 2), (BOSON, 2)):
        diff = dgamma(b, s, np.eye(n)).matrix - number_operator(b, s).matrix
        assert abs(diff).max() == 0 if diff.nnz else True


def test_dgamma_spectrum_is_subset_sums(rng):
    n, cap = 3, 2
    b = build_basis(toy_grid(n, 1, 1), (cap, 0, 0))
    M = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    h = M + M.conj().T
    ev = np.linalg.eigvalsh(h)
    sums = sorted(sum(c) for k in range(cap + 1) for c in itertools.combinations(ev, k))
    got = np.linalg.eigvalsh(dgamma(b, NU, h).dense())
    assert np.allclose(np.sort(got), sums, atol=1e-12)


def test_dgamma_adjoint_and_number_conservation(rng):
    b = build_basis(toy_grid(3, 2, 1), (2, 2, 1))
    h = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    A = dgamma(b, NU, h, hermitian=False).matrix
    Ad = dgamma(b, NU, h.conj().T, hermitian=False).matrix
    assert abs(A.conj().T - Ad).max() < 1e-14
    N = number_operator(b, NU).matrix
    assert abs(A @ N - N @ A).max() < 1e-13 if (A @ N - N @ A).nnz else True
    assert np.count_nonzero(A @ b.vacuum()) == 0


def test_dgamma_shape_mismatch():
    b = build_basis(toy_grid(2, 2, 1), (1, 1, 1))
    with pytest.raises(InvalidArgument):
        dgamma(b, NU, np.eye(3))


def test_mode_index_out_of_range():
    b = build_basis(toy_grid(2, 2, 1), (1, 1, 1))
    with pytest.raises(InvalidArgument):
        annihilator(b, NU, 2)
    with pytest.raises(InvalidArgument):
        annihilator(b, "muon", 0)


def test_resource_limit():
    with pytest.raises(ResourceLimit) as exc:
        build_basis(geometric_grid(12), (4, 4, 4), max_dim=10_000)
    assert exc.value.estimate > 10_000


def test_negative_cap_rejected():
    with pytest.raises(InvalidArgument):
        build_basis(toy_grid(), (1, -1, 1))


def test_sparse_hermitian_validation():
    with pytest.raises(InvalidArgument):
        SparseHermitian(sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=float)))
    with pytest.raises(InvalidArgument):
        SparseHermitian(sp.csr_matrix(np.ones((2, 3))))
    op = SparseHermitian(sp.csr_matrix(np.array([[1, 1j], [-1j, 2]])))
    assert op.dim == 2


def test_sector_labels_conserved_by_ladders():
    b = build_basis(toy_grid(2, 2, 1), (2, 2, 2))
    lab = b.sector_labels()
    for key, idx in b.sectors().items():
        assert np.all(lab[idx] == np.asarray(key))
