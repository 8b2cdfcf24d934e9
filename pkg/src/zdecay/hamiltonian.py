"""Discrete H = H_0 + g H_I, the infrared-cutoff family and its relative bounds.

The interaction is assembled from Wick monomials
    H_I^(1) = sum F1_ijk sqrt(w_i w_j w_k) b_i^+ c_j^+ a_k,
    H_I^(2) = sum F2_ijk sqrt(w_i w_j w_k) b_i^+ c_j^+ a_k^+,
plus adjoints, where b, c, a are the nu, nubar and Z0 ladder operators.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgument, ResolutionError
from .fock import (BOSON, NU, NUBAR, FockBasis, SparseHermitian, annihilator, build_basis,
                   occupation)
from .kernels import KernelTable, restrict_kernel


def free_parts(basis: FockBasis):
    """Diagonals of H_D = dGamma(p) (nu + nubar) and H_Z0 = dGamma(omega_3)."""
    g = basis.grid
    hd = occupation(basis, NU) @ g.nu_p + occupation(basis, NUBAR) @ g.nubar_p
    hz = occupation(basis, BOSON) @ g.omega3
    return hd, hz


def _pair_creators(basis: FockBasis):
    nu = [annihilator(basis, NU, i)[1] for i in range(basis.grid.n_nu)]
    nubar = [annihilator(basis, NUBAR, j)[1] for j in range(basis.grid.n_nubar)]
    return nu, nubar


def interaction_monomials(basis: FockBasis, table: KernelTable):
    """(M1, M2): the non-Hermitian monomial sums H_I^(1), H_I^(2) as CSR."""
    if table.grid.n_nu != basis.grid.n_nu or table.grid.n_nubar != basis.grid.n_nubar \
            or table.grid.n_boson != basis.grid.n_boson:
        raise InvalidArgument("kernel table and basis have different mode counts")
    F1, F2 = table.discrete(1), table.discrete(2)
    nu, nubar = _pair_creators(basis)
    bos = [annihilator(basis, BOSON, k)[0] for k in range(basis.grid.n_boson)]
    bos_dag = [sp.csr_matrix(a.T) for a in bos]
    dim = basis.dim
    M1 = sp.csr_matrix((dim, dim), dtype=complex)
    M2 = sp.csr_matrix((dim, dim), dtype=complex)
    for i in range(basis.grid.n_nu):
        for j in range(basis.grid.n_nubar):
            if not (np.any(F1[i, j]) or np.any(F2[i, j])):
                continue
            pair = nu[i] @ nubar[j]
            s1 = sum((F1[i, j, k] * bos[k] for k in range(len(bos)) if F1[i, j, k] != 0),
                     sp.csr_matrix((dim, dim)))
            s2 = sum((F2[i, j, k] * bos_dag[k] for k in range(len(bos)) if F2[i, j, k] != 0),
                     sp.csr_matrix((dim, dim)))
            M1 = M1 + pair @ s1
            M2 = M2 + pair @ s2
    M1.eliminate_zeros()
    M2.eliminate_zeros()
    return sp.csr_matrix(M1), sp.csr_matrix(M2)


def _hermitian_part(M1, M2):
    return M1 + M2 + (M1 + M2).conj().T


@dataclass(eq=False)
class HamiltonianSet:
    """H_0, H_D, H_Z0, H_I and H = H_0 + g H_I on one basis."""

    basis: FockBasis
    table: KernelTable
    g: float
    H0: SparseHermitian
    HD: SparseHermitian
    HZ0: SparseHermitian
    HI: SparseHermitian
    H: SparseHermitian
    M1: sp.csr_matrix = field(repr=False)
    M2: sp.csr_matrix = field(repr=False)

    @property
    def h0_diag(self) -> np.ndarray:
        return self.H0.matrix.diagonal().real

    def with_coupling(self, g: float) -> "HamiltonianSet":
        if g < 0:
            raise InvalidArgument("coupling must be non-negative")
        H = SparseHermitian(self.H0.matrix + g * self.HI.matrix)
        return HamiltonianSet(self.basis, self.table, g, self.H0, self.HD, self.HZ0, self.HI, H,
                              self.M1, self.M2)


def assemble(basis: FockBasis, table: KernelTable, g: float) -> HamiltonianSet:
    """Build every operator of the model on ``basis`` with coupling ``g``."""
    if g < 0:
        raise InvalidArgument("coupling must be non-negative")
    hd, hz = free_parts(basis)
    HD = SparseHermitian(sp.diags(hd).tocsr())
    HZ0 = SparseHermitian(sp.diags(hz).tocsr())
    H0 = SparseHermitian(sp.diags(hd + hz).tocsr())
    M1, M2 = interaction_monomials(basis, table)
    HI = SparseHermitian(sp.csr_matrix(_hermitian_part(M1, M2)))
    H = SparseHermitian(H0.matrix + g * HI.matrix)
    return HamiltonianSet(basis, table, g, H0, HD, HZ0, HI, H, M1, M2)


# random test vectors --------------------------------------------------------

def low_energy_vectors(h0_diag: np.ndarray, trials: int, e_max: float, rng,
                       support: Optional[np.ndarray] = None) -> np.ndarray:
    """Random normalized vectors in the H_0 spectral subspace {H_0 <= e_max}, as columns."""
    mask = h0_diag <= e_max
    if support is not None:
        mask &= support
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise InvalidArgument("no basis states below the energy cap")
    out = np.zeros((len(h0_diag), trials), dtype=complex)
    z = rng.standard_normal((len(idx), trials)) + 1j * rng.standard_normal((len(idx), trials))
    # mix a few sparse vectors in, which probe single-state ratios
    n_sparse = trials // 4
    for t in range(n_sparse):
        keep = rng.choice(len(idx), size=min(3, len(idx)), replace=False)
        col = np.zeros(len(idx), dtype=complex)
        col[keep] = z[keep, t]
        z[:, t] = col
    out[idx] = z
    return out / np.linalg.norm(out, axis=0)


def relative_bound_rhs(constants: dict, h0_psi_norm, psi_norm, eps: float):
    """Right-hand side of the H_I relative bound for given norms."""
    a = h0_psi_norm**2
    total = 0.0
    for j in (1, 2):
        total = total + constants[f"C{j}"] * a + constants[f"Ct{j}"] * ((1 + eps) * a + psi_norm**2 / (4 * eps))
    return 4.0 * total


def relative_bound_check(hset: HamiltonianSet, trials: int = 200, eps_values=(0.1, 1.0, 10.0),
                         e_max: Optional[float] = None, seed: int = 0, table: Optional[KernelTable] = None,
                         HI: Optional[sp.spmatrix] = None, h0: Optional[np.ndarray] = None) -> dict:
    """Sample ||H_I psi||^2 against the closed-form bound on random low-energy psi.

    Returns the largest LHS/RHS ratio per epsilon and the violation count.
    """
    rng = np.random.default_rng(seed)
    table = hset.table if table is None else table
    HI = hset.HI.matrix if HI is None else HI
    h0 = hset.h0_diag if h0 is None else h0
    e_max = 2.0 * table.grid.m_z if e_max is None else e_max
    C = table.relative_bound_constants()
    psi = low_energy_vectors(h0, trials, e_max, rng)
    lhs = np.linalg.norm(HI @ psi, axis=0) ** 2
    a = np.linalg.norm((h0 + 1.0)[:, None] * psi, axis=0)
    out = {"constants": C, "trials": trials, "max_ratio": {}, "violations": 0}
    for eps in eps_values:
        rhs = relative_bound_rhs(C, a, 1.0, eps)
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
        out["max_ratio"][eps] = float(ratio.max())
        out["violations"] += int(np.sum(lhs > rhs * (1 + 1e-12) + 1e-300))
    return out


# cutoff family --------------------------------------------------------------

def cascade_sigmas(n_max: int, sigma0: float, gamma: float = 0.25) -> np.ndarray:
    if not 0 < gamma < 1:
        raise InvalidArgument("gamma must lie in (0, 1)")
    return sigma0 * gamma ** np.arange(n_max + 1)


def resolved_depth(grid, sigma0: float, gamma: float = 0.25, n_max: int = 64) -> int:
    """Largest n such that some fermion mode lies strictly below sigma_n."""
    p_min = min(np.min(grid.nu_p, initial=np.inf), np.min(grid.nubar_p, initial=np.inf))
    sig = cascade_sigmas(n_max, sigma0, gamma)
    ok = np.flatnonzero(sig > p_min)
    if len(ok) == 0:
        raise ResolutionError("no fermion mode lies below sigma_0")
    return int(ok[-1])


def _map_masks(cfgs, keep_idx):
    """Full-basis bitmask of each sub-basis configuration."""
    out = np.zeros(len(cfgs), dtype=np.int64)
    for b, full in enumerate(keep_idx):
        out |= ((np.asarray(cfgs, dtype=np.int64) >> b) & 1) << int(full)
    return out


def embedding(sub: FockBasis, full: FockBasis, nu_keep, nubar_keep, low_nu: int = 0,
              low_nubar: int = 0):
    """Indices (sub_idx, full_idx) of states |h> (x) |L> with L = (low_nu, low_nubar) masks.

    Only sub states whose union with L fits the caps of ``full`` are returned.
    """
    m1 = _map_masks(sub.nu_cfg, np.flatnonzero(nu_keep)) | low_nu
    m2 = _map_masks(sub.nubar_cfg, np.flatnonzero(nubar_keep)) | low_nubar
    l1 = np.array([full.nu_lookup.get(int(m), -1) for m in m1])
    l2 = np.array([full.nubar_lookup.get(int(m), -1) for m in m2])
    if sub.bos_cfg != full.bos_cfg:
        raise InvalidArgument("sub-basis and basis must share the boson configurations")
    n1, n2, n3 = full.shape
    a = l1[sub.i_nu]
    b = l2[sub.i_nubar]
    ok = (a >= 0) & (b >= 0)
    sub_idx = np.flatnonzero(ok)
    full_idx = (a[ok] * n2 + b[ok]) * n3 + sub.i_bos[ok]
    return sub_idx, full_idx


@dataclass(eq=False)
class CutoffLevel:
    n: int
    sigma: float
    nu_keep: np.ndarray
    nubar_keep: np.ndarray
    table: KernelTable
    HIn: SparseHermitian
    Hn: SparseHermitian
    sub_basis: FockBasis
    sub_set: HamiltonianSet
    embed: np.ndarray
    check_diag: np.ndarray

    @property
    def Kn(self) -> SparseHermitian:
        return self.sub_set.H


@dataclass(eq=False)
class CutoffFamily:
    hset: HamiltonianSet
    sigma0: float
    gamma: float
    levels: list

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([lv.sigma for lv in self.levels])

    def shell(self, n: int) -> SparseHermitian:
        """H_{I,n+1}^n = H_{I,n+1} - H_{I,n} on the full basis."""
        return SparseHermitian(self.levels[n + 1].HIn.matrix - self.levels[n].HIn.matrix)

    def tail(self, n: int) -> SparseHermitian:
        """H_{I,inf}^n = H_I - H_{I,n} on the full basis."""
        return SparseHermitian(self.hset.HI.matrix - self.levels[n].HIn.matrix)

    def tail_monomial(self, n: int, j: int) -> sp.csr_matrix:
        lv = self.levels[n]
        M1, M2 = interaction_monomials(self.hset.basis, lv.table)
        return (self.hset.M1 - M1) if j == 1 else (self.hset.M2 - M2)


def _level_masks(grid, sigma):
    return grid.nu_p >= sigma, grid.nubar_p >= sigma


def cutoff_family(hset: HamiltonianSet, n_max: int, sigma0: Optional[float] = None,
                  gamma: float = 0.25, strict: bool = False) -> CutoffFamily:
    """Cutoff Hamiltonians H_n, K_n and below-cutoff free energies for n <= n_max.

    n_max is reduced (with a warning) to the deepest level that has a fermion
    mode below sigma_n, unless ``strict`` is set, in which case a
    ResolutionError is raised.
    """
    grid = hset.basis.grid
    sigma0 = grid.m_z if sigma0 is None else float(sigma0)
    depth = resolved_depth(grid, sigma0, gamma)
    if n_max > depth:
        if strict:
            raise ResolutionError(f"grid resolves only {depth} cascade levels, {n_max} requested")
        warnings.warn(f"cascade depth reduced from {n_max} to {depth}: grid too coarse", stacklevel=2)
        n_max = depth
    levels = []
    caps = (hset.basis.nu_cap, hset.basis.nubar_cap, hset.basis.boson_cap)
    for n, sigma in enumerate(cascade_sigmas(n_max, sigma0, gamma)):
        nu_keep, nubar_keep = _level_masks(grid, sigma)
        mask = np.outer(nu_keep, nubar_keep)
        tab = restrict_kernel(hset.table, mask)
        M1, M2 = interaction_monomials(hset.basis, tab)
        HIn = SparseHermitian(sp.csr_matrix(_hermitian_part(M1, M2)))
        Hn = SparseHermitian(hset.H0.matrix + hset.g * HIn.matrix)
        sub_grid = grid.subgrid(nu_keep, nubar_keep)
        sub = build_basis(sub_grid, caps)
        sub_tab = KernelTable(sub_grid, tab.F1[np.ix_(nu_keep, nubar_keep)], tab.F2[np.ix_(nu_keep, nubar_keep)],
                              {k: v[np.ix_(nu_keep, nubar_keep)] for k, v in tab.dF1.items()},
                              {k: v[np.ix_(nu_keep, nubar_keep)] for k, v in tab.dF2.items()},
                              tab.mode, dict(tab.meta))
        sub_set = assemble(sub, sub_tab, hset.g)
        _, full_idx = embedding(sub, hset.basis, nu_keep, nubar_keep)
        low_nu = occupation(hset.basis, NU) @ np.where(nu_keep, 0.0, grid.nu_p)
        low_nubar = occupation(hset.basis, NUBAR) @ np.where(nubar_keep, 0.0, grid.nubar_p)
        levels.append(CutoffLevel(n, float(sigma), nu_keep, nubar_keep, tab, HIn, Hn, sub, sub_set,
                                  full_idx, low_nu + low_nubar))
    return CutoffFamily(hset, sigma0, gamma, levels)


def restriction_residual(family: CutoffFamily, n: int) -> float:
    """max |K_n - H_n restricted to the embedded sub-basis| (entrywise)."""
    lv = family.levels[n]
    block = lv.Hn.matrix[lv.embed][:, lv.embed]
    diff = block - lv.Kn.matrix
    return float(abs(diff).max()) if diff.nnz else 0.0


def tensor_identity_residual(family: CutoffFamily, n: int) -> float:
    """Largest entry of H_n - (K_n (x) 1 + 1 (x) H_check) over all low-mode blocks.

    The identification |h> (x) |L> carries the fermionic sign (-1)^{N_nubar(L)}
    on the pair-creating interaction; blocks respect the caps of the basis.
    """
    lv = family.levels[n]
    full = family.hset.basis
    grid = full.grid
    low_nu_modes = np.flatnonzero(~lv.nu_keep)
    low_nubar_modes = np.flatnonzero(~lv.nubar_keep)
    from .fock import _fermion_configs
    worst = 0.0
    Hn = lv.Hn.matrix.tocsr()
    seen = np.zeros(full.dim, dtype=bool)
    for c1 in _fermion_configs(len(low_nu_modes), full.nu_cap):
        L1 = sum(1 << int(low_nu_modes[b]) for b in range(len(low_nu_modes)) if (c1 >> b) & 1)
        for c2 in _fermion_configs(len(low_nubar_modes), full.nubar_cap):
            L2 = sum(1 << int(low_nubar_modes[b]) for b in range(len(low_nubar_modes)) if (c2 >> b) & 1)
            sub_idx, full_idx = embedding(lv.sub_basis, full, lv.nu_keep, lv.nubar_keep, L1, L2)
            if len(full_idx) == 0:
                continue
            seen[full_idx] = True
            sign = -1.0 if bin(c2).count("1") % 2 else 1.0
            e_low = sum(grid.nu_p[m] for m in low_nu_modes if (L1 >> int(m)) & 1) \
                + sum(grid.nubar_p[m] for m in low_nubar_modes if (L2 >> int(m)) & 1)
            ss = lv.sub_set
            K = ss.H0.matrix[sub_idx][:, sub_idx] + sign * ss.g * ss.HI.matrix[sub_idx][:, sub_idx]
            block = Hn[full_idx][:, full_idx]
            diff = block - K - e_low * sp.identity(len(full_idx))
            worst = max(worst, float(abs(diff).max()) if diff.nnz else 0.0)
            # no coupling out of the block
            rest = Hn[full_idx].tocoo()
            outside = ~np.isin(rest.col, full_idx) & (rest.data != 0)
            if outside.any():
                worst = max(worst, float(np.abs(rest.data[outside]).max()))
    if not np.all(seen):
        raise InvalidArgument("low-mode blocks do not cover the basis")
    return worst


def level_constants(family: CutoffFamily, n: int) -> dict:
    return family.levels[n].table.relative_bound_constants()


def cutoff_relative_bound_check(family: CutoffFamily, n: int, trials: int = 200,
                                eps_values=(0.1, 1.0, 10.0), seed: int = 0) -> dict:
    """Relative bound of H_{I,n} with respect to H_{0,n} on the K_n sub-basis."""
    return relative_bound_check(family.levels[n].sub_set, trials, eps_values, seed=seed)


def operator_norm(M) -> float:
    """Largest singular value of a sparse or dense matrix."""
    M = sp.csr_matrix(M)
    if M.nnz == 0:
        return 0.0
    rows = np.unique(M.nonzero()[0])
    cols = np.unique(M.nonzero()[1])
    M = M[rows][:, cols]
    if M.shape[0] * M.shape[1] <= 4_000_000 or min(M.shape) < 3:
        return float(np.linalg.norm(M.toarray(), 2))
    return float(spla.svds(M, k=1, return_singular_vectors=False, tol=1e-12, random_state=0)[0])


def shell_norm(family: CutoffFamily, n: int) -> float:
    """||H_{I,n+1}^n (H_{0,n+1} + 1)^{-1}|| on the level n+1 sub-basis."""
    nxt = family.levels[n + 1]
    sh = family.shell(n).matrix[nxt.embed][:, nxt.embed]
    d = 1.0 / (nxt.sub_set.h0_diag + 1.0)
    return operator_norm(sh @ sp.diags(d))


def shell_bound_check(family: CutoffFamily, n: int, trials: int = 200, seed: int = 0) -> dict:
    """Fit (a, b) in ||H_sh psi|| <= (sigma_n - sigma_{n+1})(a ||H_{0,n+1} psi|| + b ||psi||).

    a = b = ||H_sh (H_{0,n+1}+1)^{-1}|| / (sigma_n - sigma_{n+1}) is a valid pair;
    random vectors confirm it with their largest observed ratio.
    """
    nxt = family.levels[n + 1]
    delta = family.levels[n].sigma - nxt.sigma
    norm = shell_norm(family, n)
    a = b = norm / delta
    rng = np.random.default_rng(seed)
    h0 = nxt.sub_set.h0_diag
    sh = family.shell(n).matrix[nxt.embed][:, nxt.embed]
    psi = low_energy_vectors(h0, trials, 2.0 * family.hset.basis.grid.m_z, rng)
    lhs = np.linalg.norm(sh @ psi, axis=0)
    rhs = delta * (a * np.linalg.norm(h0[:, None] * psi, axis=0) + b)
    return {"n": n, "delta": delta, "norm": norm, "a": a, "b": b,
            "max_ratio": float(np.max(lhs / rhs)) if np.all(rhs > 0) else 0.0,
            "violations": int(np.sum(lhs > rhs * (1 + 1e-12)))}


def tail_norm(family: CutoffFamily, n: int, j: int) -> float:
    """||(H_check_inf^n)^{-1/2} H_{I,inf}^{(j) n} (N_Z0 + 1)^{-1/2}|| on the full basis.

    H_check vanishes only on states without below-cutoff fermions, which lie
    outside the range of the tail monomial, so the pseudo-inverse is exact.
    """
    lv = family.levels[n]
    basis = family.hset.basis
    T = family.tail_monomial(n, j)
    hc = lv.check_diag
    left = np.where(hc > 0, 1.0 / np.sqrt(np.where(hc > 0, hc, 1.0)), 0.0)
    right = 1.0 / np.sqrt(basis.n_bos + 1.0)
    return operator_norm(sp.diags(left) @ T @ sp.diags(right))


def loglog_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def shell_tail_scaling(family: CutoffFamily) -> dict:
    """Shell norms vs (sigma_n - sigma_{n+1}) and tail norms vs sigma_n, with log-log slopes."""
    L = len(family.levels)
    deltas = [family.levels[n].sigma - family.levels[n + 1].sigma for n in range(L - 1)]
    shells = [shell_norm(family, n) for n in range(L - 1)]
    tails = {j: [tail_norm(family, n, j) for n in range(L)] for j in (1, 2)}
    sig = family.sigmas
    tail_sum = [tails[1][n] + tails[2][n] for n in range(L)]
    return {
        "sigma": sig.tolist(), "delta": deltas, "shell": shells, "tail1": tails[1], "tail2": tails[2],
        "shell_slope": loglog_slope(deltas, shells),
        "tail_slope": loglog_slope(sig, tail_sum),
    }


# pull-through ---------------------------------------------------------------

def contracted_operator(hset: HamiltonianSet, species: str, mode: int,
                        table: Optional[KernelTable] = None) -> sp.csr_matrix:
    """V_+(xi) (nu mode) or V_-(xi) (nubar mode) with the sign fixed by our ordering.

    H b_i - b_i H + p_i b_i = g V_+(i) with V_+(i) = -sum_jk (F1_ijk c_j^+ a_k + F2_ijk c_j^+ a_k^+),
    H c_j - c_j H + p_j c_j = g V_-(j) with V_-(j) = +sum_ik (F1_ijk b_i^+ a_k + F2_ijk b_i^+ a_k^+);
    the second monomial carries a_k^+ since H_I^(2) creates a boson.
    """
    basis = hset.basis
    table = hset.table if table is None else table
    F1, F2 = table.discrete(1), table.discrete(2)
    bos = [annihilator(basis, BOSON, k)[0] for k in range(basis.grid.n_boson)]
    dim = basis.dim
    V = sp.csr_matrix((dim, dim), dtype=complex)
    if species == NU:
        partners = [annihilator(basis, NUBAR, j)[1] for j in range(basis.grid.n_nubar)]
        for j, cd in enumerate(partners):
            for k, a in enumerate(bos):
                if F1[mode, j, k] != 0:
                    V = V - F1[mode, j, k] * (cd @ a)
                if F2[mode, j, k] != 0:
                    V = V - F2[mode, j, k] * (cd @ a.T)
    elif species == NUBAR:
        partners = [annihilator(basis, NU, i)[1] for i in range(basis.grid.n_nu)]
        for i, bd in enumerate(partners):
            for k, a in enumerate(bos):
                if F1[i, mode, k] != 0:
                    V = V + F1[i, mode, k] * (bd @ a)
                if F2[i, mode, k] != 0:
                    V = V + F2[i, mode, k] * (bd @ a.T)
    else:
        raise InvalidArgument("pull-through is defined for nu and nubar modes")
    return sp.csr_matrix(V)


def pull_through_residual(hset: HamiltonianSet, species: str, mode: int, psi: np.ndarray,
                          H: Optional[sp.spmatrix] = None, table: Optional[KernelTable] = None) -> float:
    """||H b psi - b H psi + omega b psi - g V psi|| for a fermion mode.

    ``H``/``table`` select a cutoff Hamiltonian H_n and its restricted kernel.
    The identity is exact for psi supported strictly below the caps.
    """
    H = hset.H.matrix if H is None else H
    b = annihilator(hset.basis, species, mode)[0]
    omega = hset.basis.grid.energies(species)[mode]
    V = contracted_operator(hset, species, mode, table)
    r = H @ (b @ psi) - b @ (H @ psi) + omega * (b @ psi) - hset.g * (V @ psi)
    return float(np.linalg.norm(r))


def interior_vectors(basis: FockBasis, trials: int, rng) -> np.ndarray:
    idx = np.flatnonzero(basis.interior_mask())
    out = np.zeros((basis.dim, trials), dtype=complex)
    out[idx] = rng.standard_normal((len(idx), trials)) + 1j * rng.standard_normal((len(idx), trials))
    return out / np.linalg.norm(out, axis=0)


def contracted_bound_check(hset: HamiltonianSet, species: str, mode: int, trials: int = 50,
                           seed: int = 0) -> dict:
    """||V(xi) psi|| <= sum_j ||F^(j)(xi, ., .)|| ||(N_Z0 + 1)^{1/2} psi||."""
    rng = np.random.default_rng(seed)
    basis = hset.basis
    V = contracted_operator(hset, species, mode)
    psi = interior_vectors(basis, trials, rng)
    t = hset.table
    wts = t.weights()
    bound = 0.0
    for j in (1, 2):
        F = t.kernel(j)
        sl = (F[mode] * np.sqrt(wts[mode] / t.grid.nu_w[mode])) if species == NU else \
            (F[:, mode] * np.sqrt(wts[:, mode] / t.grid.nubar_w[mode]))
        bound += float(np.linalg.norm(sl))
    lhs = np.linalg.norm(V @ psi, axis=0)
    rhs = bound * np.linalg.norm(np.sqrt(basis.n_bos + 1.0)[:, None] * psi, axis=0) \
        * np.sqrt(basis.grid.nu_w[mode] if species == NU else basis.grid.nubar_w[mode])
    return {"max_ratio": float(np.max(lhs / np.maximum(rhs, 1e-300))),
            "violations": int(np.sum(lhs > rhs * (1 + 1e-12)))}


# contracted pair operators -------------------------------------------------

def pair_operator_check(table: KernelTable, k_index: int, trials: int = 500, seed: int = 0,
                    caps=(2, 2)) -> dict:
    """The four contracted-operator inequalities at one boson mode on the fermion space.

    B^(1) = -sum conj(F1_ij.) b_i c_j, B^(2) = sum F2_ij. b_i^+ c_j^+, with the
    fermion weights sqrt(w_i w_j) (the boson mode is held fixed).
    """
    grid = table.grid
    if not 0 <= k_index < grid.n_boson:
        raise InvalidArgument("boson mode outside the grid")
    basis = build_basis(grid, (caps[0], caps[1], 0))
    ww = np.sqrt(grid.nu_w[:, None] * grid.nubar_w[None, :])
    F1 = table.F1[:, :, k_index] * ww
    F2 = table.F2[:, :, k_index] * ww
    nu, nubar = _pair_creators(basis)
    dim = basis.dim
    B1 = sp.csr_matrix((dim, dim), dtype=complex)
    B2 = sp.csr_matrix((dim, dim), dtype=complex)
    for i in range(grid.n_nu):
        for j in range(grid.n_nubar):
            pair = nu[i] @ nubar[j]
            # b_i c_j = -(b_i^+ c_j^+)^dagger and the ladder matrices are real
            if F1[i, j] != 0:
                B1 = B1 + np.conj(F1[i, j]) * pair.T
            if F2[i, j] != 0:
                B2 = B2 + F2[i, j] * pair
    hd = free_parts(basis)[0]
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((dim, trials)) + 1j * rng.standard_normal((dim, trials))
    psi /= np.linalg.norm(psi, axis=0)
    sqrt_hd = np.linalg.norm(np.sqrt(hd)[:, None] * psi, axis=0)
    w1 = table.weights()[:, :, k_index] / grid.k_w[k_index]
    out = {}
    for pj, name in ((grid.nu_p[:, None], "p1"), (grid.nubar_p[None, :], "p2")):
        c1 = np.sqrt(np.sum(np.abs(table.F1[:, :, k_index]) ** 2 / pj * w1))
        c2 = np.sqrt(np.sum(np.abs(table.F2[:, :, k_index]) ** 2 / pj * w1))
        out[f"B1<=HD/{name}"] = (np.linalg.norm(B1 @ psi, axis=0), c1 * sqrt_hd)
        out[f"B2*<=HD/{name}"] = (np.linalg.norm(B2.conj().T @ psi, axis=0), c2 * sqrt_hd)
    n1 = np.sqrt(np.sum(np.abs(F1) ** 2))
    n2 = np.sqrt(np.sum(np.abs(F2) ** 2))
    b1 = np.linalg.norm(B1 @ psi, axis=0)
    b2s = np.linalg.norm(B2.conj().T @ psi, axis=0)
    out["B1*"] = (np.linalg.norm(B1.conj().T @ psi, axis=0), np.sqrt(2 * n1**2 + b1**2))
    out["B2"] = (np.linalg.norm(B2 @ psi, axis=0), np.sqrt(2 * n2**2 + b2s**2))
    report = {}
    for key, (lhs, rhs) in out.items():
        slack = rhs - lhs
        report[key] = {"min_slack": float(slack.min()), "max_lhs": float(lhs.max()),
                       "violations": int(np.sum(lhs > rhs * (1 + 1e-12) + 1e-14))}
    return report


# operator files -------------------------------------------------------------

_OP_MAGIC = b"ZDOP"
_OP_VERSION = 1
_ROW = np.dtype([("row", "<i8"), ("col", "<i8"), ("re", "<f8"), ("im", "<f8")])


def save_operator(op: SparseHermitian, path) -> None:
    """Sparse triplet file: magic, version, dim, flags, nnz, then (row, col, re, im) records."""
    r, c, v = op.triplets()
    flags = (1 if op.hermitian else 0) | (2 if op.real else 0)
    rec = np.empty(len(r), dtype=_ROW)
    rec["row"], rec["col"], rec["re"], rec["im"] = r, c, np.real(v), np.imag(v)
    with open(path, "wb") as fh:
        fh.write(_OP_MAGIC)
        fh.write(struct.pack("<IQQQ", _OP_VERSION, op.dim, flags, len(r)))
        fh.write(rec.tobytes())


def load_operator(path) -> SparseHermitian:
    with open(path, "rb") as fh:
        if fh.read(4) != _OP_MAGIC:
            raise InvalidArgument(f"{path} is not an operator file")
        version, dim, flags, nnz = struct.unpack("<IQQQ", fh.read(28))
        if version != _OP_VERSION:
            raise InvalidArgument(f"unsupported operator file version {version}")
        rec = np.frombuffer(fh.read(nnz * _ROW.itemsize), dtype=_ROW)
    m = sp.csr_matrix((rec["re"] + 1j * rec["im"], (rec["row"], rec["col"])), shape=(dim, dim))
    return SparseHermitian(m, hermitian=bool(flags & 1))
