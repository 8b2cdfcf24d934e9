import numpy as np
import pytest

from zdecay.errors import InvalidArgument, ValidationError
from zdecay.fock import build_basis, geometric_grid, toy_grid
from zdecay.hamiltonian import assemble
from zdecay.kernels import (CutoffProfile, KernelTable, PhysicalConstants, build_kernel_table, h_block,
                            load_kernel_table, power_law_surrogate, restrict_kernel, save_kernel_table,
                            spinor_contraction_h, zero_table)
from zdecay.partialwave import Channel, envelope_A, zero_cutoff

M_Z = 91.18


def test_zero_profile_gives_zero_h():
    prof = CutoffProfile(f=zero_cutoff(1.0))
    assert spinor_contraction_h(1, (9.0, Channel()), (9.0, Channel()), (9.0, 1), prof) == 0


def test_h_double_resolution_oracle():
    prof = CutoffProfile()
    xi = (M_Z / 10, Channel())
    coarse = spinor_contraction_h(1, xi, xi, (M_Z / 10, 1), prof)
    fine = spinor_contraction_h(1, xi, xi, (M_Z / 10, 1), prof, resolution=2.0)
    assert abs(fine) > 0
    assert abs(coarse - fine) <= 1e-6 * abs(fine)


def _envelope_sup(p, deriv):
    prof, ch = CutoffProfile(), Channel()
    A, _ = envelope_A(p, ch, prof.f)
    out = 0.0
    for j, pol in ((1, 1), (1, -1), (2, 1), (2, -1)):
        for k in (27.35, 82.06):
            h = h_block(j, ch, p, ch, p, k, pol, prof, deriv=deriv)
            env = (k**2 + M_Z**2) ** 0.25 * np.outer(A, A)
            if deriv != (0, 0):
                env = env * (ch.ell + 1) / p[:, None]
            out = max(out, float(np.max(np.abs(h) / env)))
    return out


@pytest.mark.parametrize("deriv", [(0, 0), (1, 0)])
def test_envelope_constant_exists(deriv):
    # sup |h| / envelope is finite and stable under grid refinement
    coarse = _envelope_sup(np.geomspace(1e-3, 110, 41), deriv)
    fine = _envelope_sup(np.geomspace(1e-3, 110, 81), deriv)
    assert np.isfinite(fine) and fine > 0
    assert fine <= 1.1 * coarse


def test_surrogate_zero_gives_zero_interaction():
    g = toy_grid(2, 2, 1)
    tab = build_kernel_table(g, mode="surrogate", surrogate=lambda j, *a: 0.0)
    assert all(v == 0 for v in tab.norms().values())
    hs = assemble(build_basis(g, (2, 2, 2)), tab, 0.3)
    assert hs.HI.matrix.nnz == 0


def test_surrogate_envelope_violation():
    with pytest.raises(ValidationError):
        build_kernel_table(toy_grid(2, 2, 1), mode="surrogate", surrogate=lambda j, *a: 1.0)


def test_surrogate_needs_function():
    with pytest.raises(InvalidArgument):
        build_kernel_table(toy_grid(), mode="surrogate")


def test_norm_direct_summation():
    g = geometric_grid(4, n_boson=2, polarizations=(1, -1))
    tab = build_kernel_table(g, derivatives=False)
    ref = 0.0
    for i in range(g.n_nu):
        for l in range(g.n_nubar):
            for k in range(g.n_boson):
                ref += abs(tab.F1[i, l, k]) ** 2 / g.nubar_p[l] * g.nu_w[i] * g.nubar_w[l] * g.k_w[k]
    assert np.isfinite(ref) and ref > 0
    assert abs(tab.norm(1, "p2") ** 2 - ref) <= 1e-12 * ref


def test_relative_bound_constant_formula(table):
    C = table.relative_bound_constants()
    assert C["C1"] == pytest.approx(2 * table.norm(1, "omega3") ** 2 + table.norm(1, "p2omega3") ** 2, rel=1e-14)


def test_norms_finite_and_support(table, grid):
    assert all(np.isfinite(v) for v in table.norms().values())
    # F vanishes where G does (beyond 1.2 m_Z)
    out = (grid.nu_p[:, None] >= 1.2 * M_Z) | (grid.nubar_p[None, :] >= 1.2 * M_Z)
    assert np.all(table.F1[out] == 0) and np.all(table.F2[out] == 0)


def test_restrict_all_and_empty(table):
    same = restrict_kernel(table, lambda p1, p2: np.ones_like(p1, dtype=bool))
    assert np.array_equal(same.F1, table.F1) and np.array_equal(same.F2, table.F2)
    none = restrict_kernel(table, lambda p1, p2: np.zeros_like(p1, dtype=bool))
    assert not np.any(none.F1) and not np.any(none.F2)
    assert all(not np.any(v) for v in none.dF1.values())


def test_shell_norms_scale_with_shell_width(table):
    # the shell constants vanish with the shell: nested shells have growing norms
    sig = M_Z * 0.25 ** np.arange(4)
    vals = []
    for n in range(3):
        shell = restrict_kernel(table, lambda p1, p2: (np.minimum(p1, p2) >= sig[n + 1]) & (np.minimum(p1, p2) < sig[n]))
        vals.append(shell.norm(1, "p2omega3") ** 2)
    assert vals[0] > vals[1] > vals[2] > 0


def test_save_load_roundtrip(tmp_path, table):
    path = tmp_path / "k.zdkt"
    save_kernel_table(table, path)
    back = load_kernel_table(path)
    assert np.array_equal(back.F1, table.F1) and np.array_equal(back.F2, table.F2)
    assert set(back.dF1) == set(table.dF1)
    assert all(np.array_equal(back.dF2[k], table.dF2[k]) for k in table.dF2)
    assert np.array_equal(back.grid.nu_p, table.grid.nu_p)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.zdkt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(InvalidArgument):
        load_kernel_table(path)


def test_derivative_tables_second_order():
    g = toy_grid(3, 3, 1)
    F = power_law_surrogate()
    tab = build_kernel_table(g, mode="surrogate", surrogate=F)
    ch = Channel()
    for i in range(3):
        for l in range(3):
            p1, p2, k = g.nu_p[i], g.nubar_p[l], g.k[0]
            f = lambda a, b: F(1, a, ch, b, ch, k, 1)
            errs = []
            for h in (0.02 * p1, 0.01 * p1):
                fd = (f(p1 + h, p2) - f(p1 - h, p2)) / (2 * h)
                errs.append(abs(fd - tab.derivative(1, "p1")[i, l, 0]))
            # central differences converge to the table at second order
            assert errs[1] <= 0.3 * errs[0] + 1e-12
            h = 0.01 * p2
            fd2 = (f(p1, p2 + h) - 2 * f(p1, p2) + f(p1, p2 - h)) / h**2
            assert abs(fd2 - tab.derivative(1, "p2p2")[i, l, 0]) <= 1e-3 * max(abs(fd2), 1e-8)


def test_missing_derivative_table():
    tab = build_kernel_table(toy_grid(), mode="surrogate", surrogate=power_law_surrogate(), derivatives=False)
    with pytest.raises(InvalidArgument):
        tab.derivative(1, "p1")


def test_shape_mismatch():
    g = toy_grid(2, 2, 1)
    with pytest.raises(InvalidArgument):
        KernelTable(g, np.zeros((1, 2, 1)), np.zeros((2, 2, 1)))


def test_zero_table_norms():
    assert all(v == 0 for v in zero_table(toy_grid(2, 3, 2)).norms().values())


def test_physical_coupling():
    c = PhysicalConstants()
    assert c.coupling**2 / (8 * c.m_w**2) == pytest.approx(c.g_fermi / np.sqrt(2), rel=1e-14)
    assert 0 < c.cos_theta < 1
    with pytest.raises(InvalidArgument):
        PhysicalConstants(m_w=100.0)
    with pytest.raises(InvalidArgument):
        PhysicalConstants(g=-0.1)
