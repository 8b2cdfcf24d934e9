"""Conjugate operator, commutators, Mourre estimate, limiting absorption and weight lemmas."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConsistencyError, InvalidArgument, ResolutionError
from .fock import NU, NUBAR, FockBasis, SparseHermitian, build_basis, dgamma
from .hamiltonian import (HamiltonianSet, _hermitian_part, cascade_sigmas, interaction_monomials,
                          loglog_slope, operator_norm)
from .kernels import KernelTable, smooth_step
from .spectral import SectorEigensystem, boson_gauge

GAMMA = 0.25


# one-particle operators on the radial grid ------------------------------------

def radial_derivative(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Real antisymmetric d/dp in the orthonormal mode basis u_i = sqrt(w_i) f(p_i).

    Centered differences in the interior, one-sided at the ends, conjugated
    by W^{1/2} and antisymmetrized so that iD is Hermitian.
    """
    p = np.asarray(p, dtype=float)
    n = len(p)
    if n < 2:
        raise ResolutionError("derivative needs at least 2 radial nodes")
    Df = np.zeros((n, n))
    Df[0, 0], Df[0, 1] = -1 / (p[1] - p[0]), 1 / (p[1] - p[0])
    Df[-1, -2], Df[-1, -1] = -1 / (p[-1] - p[-2]), 1 / (p[-1] - p[-2])
    for i in range(1, n - 1):
        h = p[i + 1] - p[i - 1]
        Df[i, i - 1], Df[i, i + 1] = -1 / h, 1 / h
    s = np.sqrt(np.asarray(w, dtype=float))
    Du = s[:, None] * Df / s[None, :]
    return 0.5 * (Du - Du.T)


def dilation_generator(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """a = (i/2)(P D + D P) with D from radial_derivative; Hermitian with zero diagonal."""
    D = radial_derivative(p, w)
    P = np.diag(p)
    return 0.5j * (P @ D + D @ P)


def cutoff_chi(p, sigma: float) -> np.ndarray:
    """Smooth chi: 1 on [0, sigma/2], 0 on [sigma, inf)."""
    return smooth_step(p, sigma / 2, sigma)


def _chi_derivatives(p, sigma: float):
    h = 1e-4 * sigma
    f = lambda x: cutoff_chi(x, sigma)
    d1 = (f(p + h) - f(p - h)) / (2 * h)
    d2 = (f(p + h) - 2 * f(p) + f(p - h)) / h**2
    return d1, d2


# conjugate operator ---------------------------------------------------------

def fermion_basis(basis: FockBasis) -> FockBasis:
    """The fermion factor of ``basis`` (boson cap 0); full = fermion x boson configs."""
    return build_basis(basis.grid, (basis.nu_cap, basis.nubar_cap, 0))


def lift(op_f, basis: FockBasis) -> sp.csr_matrix:
    """op_f (x) 1 on the boson configurations."""
    return sp.kron(sp.csr_matrix(op_f), sp.identity(len(basis.bos_cfg), format="csr"), format="csr")


def apply_fermion(mat_f: np.ndarray, X: np.ndarray, basis: FockBasis) -> np.ndarray:
    """(mat_f (x) 1) X for X of shape (dim,) or (dim, m)."""
    nb = len(basis.bos_cfg)
    nf = mat_f.shape[0]
    vec = X.ndim == 1
    Y = X.reshape(nf, nb, -1)
    out = np.einsum("ab,bcm->acm", mat_f, Y).reshape(nf * nb, -1)
    return out[:, 0] if vec else out


def fermion_function(mat_f: np.ndarray, fn) -> np.ndarray:
    """fn(M) for Hermitian dense M by eigendecomposition."""
    w, U = np.linalg.eigh(mat_f)
    return (U * fn(w)) @ U.conj().T


@dataclass(eq=False)
class ConjugateOperator:
    n: int
    sigma: float
    chi1: np.ndarray
    chi2: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    A_f: np.ndarray = field(repr=False)
    A: SparseHermitian = field(repr=False)
    basis: FockBasis = field(repr=False)

    def bracket_power(self, s: float) -> np.ndarray:
        """<A>^s on the fermion factor (dense)."""
        return fermion_function(self.A_f, lambda x: (1 + x**2) ** (s / 2))

    def apply(self, X, s: float = 1.0, bracket: bool = True):
        """<A>^s X (bracket) or A X."""
        M = self.bracket_power(s) if bracket else self.A_f
        return apply_fermion(M, X, self.basis)


def build_conjugate(basis: FockBasis, n: int, sigma0: Optional[float] = None,
                    gamma: float = GAMMA) -> ConjugateOperator:
    """A_{sigma_n} = dGamma(chi a1 chi) + dGamma(chi a2 chi) with chi = chi_[0, sigma_n/2]."""
    grid = basis.grid
    sigma0 = grid.m_z if sigma0 is None else sigma0
    sigma = float(cascade_sigmas(n, sigma0, gamma)[n])
    low = min(np.sum(grid.nu_p < sigma / 2), np.sum(grid.nubar_p < sigma / 2))
    if low < 2:
        raise ResolutionError(f"level {n}: fewer than 2 fermion modes below sigma_n/2 = {sigma / 2:.4g}")
    ops = []
    for p, w in ((grid.nu_p, grid.nu_w), (grid.nubar_p, grid.nubar_w)):
        chi = cutoff_chi(p, sigma)
        a = dilation_generator(p, w)
        ops.append((chi, chi[:, None] * a * chi[None, :]))
    fb = fermion_basis(basis)
    A_f = (dgamma(fb, NU, ops[0][1]).matrix + dgamma(fb, NUBAR, ops[1][1]).matrix).toarray()
    A_f = 0.5 * (A_f + A_f.conj().T)
    A = SparseHermitian(lift(A_f, basis))
    return ConjugateOperator(n, sigma, ops[0][0], ops[1][0], ops[0][1], ops[1][1], A_f, A, basis)


# spectral window ------------------------------------------------------------

def _bump(x, lo_out, lo_in, hi_in, hi_out):
    """C-infinity: 1 on [lo_in, hi_in], 0 outside (lo_out, hi_out)."""
    x = np.asarray(x, dtype=float)
    return (1 - smooth_step(x, lo_out, lo_in)) * smooth_step(x, hi_in, hi_out)


@dataclass
class SpectralWindow:
    n: int
    sigma: float
    E: float
    rho: float
    gamma: float = GAMMA

    @property
    def sigma_next(self) -> float:
        return self.gamma * self.sigma

    @property
    def interval(self):
        """I_n relative to E."""
        return self.rho * self.sigma_next / 4, self.rho * self.sigma / 3

    @property
    def lap_interval(self):
        """Re z - E range of the LAP strip J_n."""
        return self.gamma * self.rho * self.sigma / 4, self.rho * self.sigma / 3

    def phi(self, x):
        r, g, s = self.rho, self.gamma, self.sigma
        return _bump(np.asarray(x) / s, r * g / 5, r * g / 4, r / 3, r / 2)

    def psi(self, x):
        r, g, s = self.rho, self.gamma, self.sigma
        return _bump(np.asarray(x) / s, r * g / 6, r * g / 5, r / 2, 2 * r / 3)

    @property
    def threshold(self) -> float:
        return self.rho * self.gamma * self.sigma / 6


def make_window(n: int, E: float, g: float, c_gap: float, sigma0: float, gamma: float = GAMMA,
                rho_floor: float = 0.5) -> SpectralWindow:
    rho = max(rho_floor, 1.0 - c_gap * g)
    sigma = float(cascade_sigmas(n, sigma0, gamma)[n])
    return SpectralWindow(n, sigma, E, rho, gamma)


def x_phi_prime_bound(window: SpectralWindow, samples: int = 4001) -> float:
    """sup |x phi'_{sigma_n}(x)| on a sample grid (scale invariant in n)."""
    x = np.linspace(0, window.sigma, samples)
    d = np.gradient(window.phi(x), x)
    return float(np.max(np.abs(x * d)))


# commutators ----------------------------------------------------------------

def _interaction_from_discrete(hset: HamiltonianSet, D1: np.ndarray, D2: np.ndarray) -> sp.csr_matrix:
    """H_I built from discrete monomial coefficients (D = G sqrt(w))."""
    tab = hset.table
    s = np.sqrt(tab.weights())
    shim = KernelTable(tab.grid, D1 / s, D2 / s, {}, {}, tab.mode, dict(tab.meta))
    M1, M2 = interaction_monomials(hset.basis, shim)
    return sp.csr_matrix(_hermitian_part(M1, M2))


def _act(a1, a2, F):
    """(a1 (x) 1 + 1 (x) a2) acting on the two fermion indices of F."""
    return np.einsum("ki,ijl->kjl", a1, F) + np.einsum("kj,ijl->ikl", a2, F)


def _free_dgamma(basis: FockBasis, h1, h2) -> sp.csr_matrix:
    return dgamma(basis, NU, h1, hermitian=False).matrix + dgamma(basis, NUBAR, h2, hermitian=False).matrix


def commutator_direct(H, A) -> SparseHermitian:
    """i(HA - AH)."""
    Hm = H.matrix if isinstance(H, SparseHermitian) else H
    Am = A.matrix if isinstance(A, SparseHermitian) else A
    return SparseHermitian(1j * (Hm @ Am - Am @ Hm), tol=1e-10)


def commutators_structural(hset: HamiltonianSet, conj: ConjugateOperator):
    """C1, C2 from one-particle commutators and the transformed discrete kernels."""
    grid = hset.basis.grid
    p1, p2 = np.diag(grid.nu_p), np.diag(grid.nubar_p)
    a1, a2 = conj.a1, conj.a2
    c1 = [1j * (p1 @ a1 - a1 @ p1), 1j * (p2 @ a2 - a2 @ p2)]
    c2 = [1j * (c1[0] @ a1 - a1 @ c1[0]), 1j * (c1[1] @ a2 - a2 @ c1[1])]
    F1, F2 = hset.table.discrete(1), hset.table.discrete(2)
    G1, G2 = -1j * _act(a1, a2, F1), -1j * _act(a1, a2, F2)
    K1, K2 = -1j * _act(a1, a2, G1), -1j * _act(a1, a2, G2)
    C1 = _free_dgamma(hset.basis, *c1) + hset.g * _interaction_from_discrete(hset, G1, G2)
    C2 = _free_dgamma(hset.basis, *c2) + hset.g * _interaction_from_discrete(hset, K1, K2)
    return SparseHermitian(C1, tol=1e-10), SparseHermitian(C2, tol=1e-10)


def commutators(hset: HamiltonianSet, conj: ConjugateOperator, tol: float = 1e-9):
    """(C1, C2, report): direct matrix commutators checked against the structural assembly."""
    C1d = commutator_direct(hset.H, conj.A)
    C2d = commutator_direct(C1d, conj.A)
    C1s, C2s = commutators_structural(hset, conj)
    report = {}
    for name, d, s in (("C1", C1d, C1s), ("C2", C2d, C2s)):
        diff = d.matrix - s.matrix
        scale = max(abs(d.matrix).max() if d.matrix.nnz else 0.0, 1e-300)
        rel = float(abs(diff).max() / scale) if diff.nnz else 0.0
        report[name] = rel
        if rel > tol:
            raise ConsistencyError(f"{name}: direct and structural commutators differ by {rel:.3e} (relative)")
    return C1d, C2d, report


def _symbol_ops(p, sigma):
    chi = cutoff_chi(p, sigma)
    d1, d2 = _chi_derivatives(p, sigma)
    alpha = chi**2 * p
    beta = chi**2 / 2 + p * chi * d1
    dalpha = 2 * chi * d1 * p + chi**2
    dbeta = 2 * chi * d1 + p * (d1**2 + chi * d2)
    return chi, alpha, beta, dalpha, dbeta


def commutators_symbol(hset: HamiltonianSet, conj: ConjugateOperator):
    """Continuum form of [H, iA] and [[H, iA], iA] sampled on the grid.

    Free part dGamma(chi^2 p) (and dGamma(chi^2 p (chi^2 + 2 p chi chi'))),
    interaction part H_I(L F), H_I(L^2 F) with L_j = chi_j (p_j d_j + 1/2) chi_j
    evaluated from the kernel derivative tables.  Unlike the matrix
    commutator this form does not satisfy the finite-dimensional virial
    identity, which is what makes it usable in the Mourre estimate.
    """
    tab = hset.table
    if not tab.dF1:
        raise InvalidArgument("kernel table has no derivative tables")
    grid = hset.basis.grid
    sig = conj.sigma
    c1, al1, be1, dal1, dbe1 = _symbol_ops(grid.nu_p, sig)
    c2, al2, be2, dal2, dbe2 = _symbol_ops(grid.nubar_p, sig)
    A1, B1, dA1, dB1 = (x[:, None, None] for x in (al1, be1, dal1, dbe1))
    A2, B2, dA2, dB2 = (x[None, :, None] for x in (al2, be2, dal2, dbe2))
    s = np.sqrt(tab.weights())
    G, K = [], []
    for j in (1, 2):
        F = tab.kernel(j)
        d = tab.derivative
        F1_, F2_ = d(j, "p1"), d(j, "p2")
        F11, F22, F12 = d(j, "p1p1"), d(j, "p2p2"), d(j, "p1p2")
        LF = A1 * F1_ + B1 * F + A2 * F2_ + B2 * F
        L1L1 = A1 * (dA1 * F1_ + A1 * F11 + dB1 * F + B1 * F1_) + B1 * (A1 * F1_ + B1 * F)
        L2L2 = A2 * (dA2 * F2_ + A2 * F22 + dB2 * F + B2 * F2_) + B2 * (A2 * F2_ + B2 * F)
        L1L2 = A1 * (A2 * F12 + B2 * F1_) + B1 * (A2 * F2_ + B2 * F)
        G.append(LF * s)
        K.append((L1L1 + L2L2 + 2 * L1L2) * s)
    basis = hset.basis
    free1 = _free_dgamma(basis, np.diag(al1), np.diag(al2))
    free2 = _free_dgamma(basis, np.diag(al1 * (c1**2 + 2 * grid.nu_p * c1 * _chi_derivatives(grid.nu_p, sig)[0])),
                         np.diag(al2 * (c2**2 + 2 * grid.nubar_p * c2 * _chi_derivatives(grid.nubar_p, sig)[0])))
    C1 = free1 + hset.g * _interaction_from_discrete(hset, G[0], G[1])
    C2 = free2 + hset.g * _interaction_from_discrete(hset, K[0], K[1])
    return SparseHermitian(C1, tol=1e-10), SparseHermitian(C2, tol=1e-10)


def relative_commutator_norm(C: SparseHermitian, hset: HamiltonianSet) -> float:
    """||C (H_0 + i)^{-1}||."""
    d = sp.diags(1.0 / (hset.h0_diag + 1j))
    return operator_norm(C.matrix @ d)


def interaction_commutator_norm(hset: HamiltonianSet, conj: ConjugateOperator) -> float:
    """||H_I(-i a_chi F) (H_0 + i)^{-1}|| with the discrete one-particle action."""
    F1, F2 = hset.table.discrete(1), hset.table.discrete(2)
    G1, G2 = -1j * _act(conj.a1, conj.a2, F1), -1j * _act(conj.a1, conj.a2, F2)
    M = _interaction_from_discrete(hset, G1, G2)
    return operator_norm(M @ sp.diags(1.0 / (hset.h0_diag + 1j)))


def c2_regularity_check(hset: HamiltonianSet, conj: ConjugateOperator, vectors: np.ndarray,
                        eps=(1e-3, 1e-4)) -> dict:
    """||(e^{i eps A} H e^{-i eps A} - H)/eps - i[A, H]|| on span(vectors), per eps."""
    w, U = np.linalg.eigh(conj.A_f)
    H = hset.H.matrix
    comm = -commutator_direct(hset.H, conj.A).matrix  # i[A, H]
    Q, _ = np.linalg.qr(vectors)
    target = comm @ Q
    out = {}
    for e in eps:
        Um = (U * np.exp(-1j * e * w)) @ U.conj().T
        X = apply_fermion(Um, Q, conj.basis)
        Y = apply_fermion(Um.conj().T, H @ X, conj.basis)
        R = (Y - H @ Q) / e - target
        out[e] = float(np.linalg.norm(R, 2))
    e0, e1 = eps[0], eps[1]
    out["ratio"] = out[e0] / out[e1] if out[e1] > 0 else float("inf")
    return out


# Mourre estimate ------------------------------------------------------------

def window_vectors(spectrum, window: SpectralWindow):
    lo, hi = window.interval
    x = spectrum.values - window.E
    sel = (x >= lo) & (x <= hi)
    return spectrum.values[sel], spectrum.vectors[:, sel]


def mourre_check(hset: HamiltonianSet, conj: ConjugateOperator, window: SpectralWindow, spectrum,
                 C1: Optional[SparseHermitian] = None, tol: float = 1e-10) -> dict:
    """lambda_min of 1_I(H) C1 1_I(H) on Ran 1_I(H) against rho gamma sigma_n / 6.

    ``C1`` defaults to the continuum-form commutator; the matrix commutator
    is reported alongside (its diagonal in the eigenbasis vanishes).
    """
    if spectrum.e_max < window.E + window.interval[1]:
        raise InvalidArgument("spectrum does not cover the window")
    vals, V = window_vectors(spectrum, window)
    out = {"n": window.n, "sigma": window.sigma, "rho": window.rho, "threshold": window.threshold,
           "window": [window.E + x for x in window.interval], "count": int(len(vals))}
    if len(vals) == 0:
        out.update(status="window-empty", lambda_min=None, passed=None)
        return out
    if C1 is None:
        C1 = commutators_symbol(hset, conj)[0]
    P = V.conj().T @ (C1.matrix @ V)
    lam = float(np.linalg.eigvalsh(0.5 * (P + P.conj().T))[0])
    D = V.conj().T @ (commutator_direct(hset.H, conj.A).matrix @ V)
    out.update(status="ok", lambda_min=lam, margin=lam - window.threshold,
               passed=bool(lam >= window.threshold - tol),
               lambda_min_matrix_commutator=float(np.linalg.eigvalsh(0.5 * (D + D.conj().T))[0]))
    return out


# limiting absorption --------------------------------------------------------

def _mul(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """M @ v without upcasting a real M to complex."""
    if np.isrealobj(M) and np.iscomplexobj(v):
        return M @ v.real + 1j * (M @ v.imag)
    return M @ v


def _sector_norm(B: np.ndarray, d: np.ndarray) -> float:
    """||B^* diag(d) B|| exactly (dense SVD for small blocks, ARPACK otherwise)."""
    if len(d) <= 600:
        return float(np.linalg.norm(B.conj().T @ (d[:, None] * B), 2))
    Bh = B.conj().T
    op = spla.LinearOperator((len(d), len(d)), dtype=complex,
                             matvec=lambda v: _mul(Bh, d * _mul(B, np.ravel(v))),
                             rmatvec=lambda v: _mul(Bh, np.conj(d) * _mul(B, np.ravel(v))))
    return float(spla.svds(op, k=1, tol=1e-9, return_singular_vectors=False, random_state=0)[0])


class _WeightedResolvent:
    """<A>^{-s} (H - z)^{-1} <A>^{-s} in the sector eigenbases, with exact pruning bounds."""

    def __init__(self, eig: SectorEigensystem, conj: ConjugateOperator, s: float):
        Wf = conj.bracket_power(-s)
        if np.abs(Wf.imag).max() <= 1e-12:
            Wf = Wf.real
        Wfull = sp.csr_matrix(lift(Wf, conj.basis))
        gauge = boson_gauge(conj.basis)
        # per sector B = U^* W, so the weighted resolvent is B^* diag(1/(w - z)) B.  W commutes
        # with the boson gauge, so B may be replaced by the real U_r^T W when U = gauge * U_r.
        self.blocks = []
        for _, idx, w, U in eig.blocks:
            Ws = Wfull[idx][:, idx]
            Ur = np.conj(gauge[idx])[:, None] * U
            if np.isrealobj(Wf) and np.abs(Ur.imag).max() <= 1e-12:
                B = (Ws.T @ Ur.real).T
            else:
                B = (Ws.conj().T @ U).conj().T
            self.blocks.append((w, np.ascontiguousarray(B), np.sum(np.abs(B) ** 2, axis=1)))
        self.values = eig.values

    @staticmethod
    def _bound(w, rows, z):
        """||B^* D B|| <= |d_j| ||b_j||^2 + max_{i != j} |d_i| with j the dominant index (||B|| <= 1)."""
        ad = np.abs(1.0 / (w - z))
        j = int(np.argmax(ad))
        rest = np.max(np.delete(ad, j)) if len(ad) > 1 else 0.0
        return ad[j] * rows[j] + rest

    def bound(self, z: complex) -> float:
        return max(self._bound(w, rows, z) for w, _, rows in self.blocks)

    def norm(self, z: complex, floor: float = 0.0) -> float:
        """The weighted norm, or a value <= floor when it cannot exceed floor."""
        best = floor
        cand = sorted(((self._bound(w, rows, z), k) for k, (w, _, rows) in enumerate(self.blocks)), reverse=True)
        for bnd, k in cand:
            if bnd <= best:
                break
            w, B, _ = self.blocks[k]
            best = max(best, _sector_norm(B, 1.0 / (w - z)))
        return best


def lap_scan(hset: HamiltonianSet, conj: ConjugateOperator, window: SpectralWindow, s: float = 1.0,
             eig: Optional[SectorEigensystem] = None, n_re: int = 9, im_values=None,
             im_floor: float = 1e-3) -> dict:
    """sup over a z-grid in J_n of ||<A>^{-s} (H - z)^{-1} <A>^{-s}||.

    Re z - E runs over the LAP interval plus every eigenvalue inside it; Im z
    over a geometric grid from 1 down to im_floor * sigma_n.  Points are
    visited in decreasing order of an exact upper bound on the weighted norm
    and skipped once that bound falls below the running sup, so the sup is
    exact on the grid.
    Also returns the weighted and unweighted norms against Im z at the Re z
    attaining the sup.
    """
    if not 0.5 < s <= 1:
        raise InvalidArgument("s must lie in (1/2, 1]")
    eig = eig or SectorEigensystem.build(hset.H, hset.basis)
    lo, hi = window.lap_interval
    E = window.E
    allvals = eig.values
    re = set(np.linspace(lo, hi, n_re).tolist())
    re |= {float(v - E) for v in allvals if lo <= v - E <= hi}
    re = np.array(sorted(re))
    if im_values is None:
        im_values = np.geomspace(1.0, im_floor * window.sigma, 7)
    im_values = np.asarray(im_values, dtype=float)
    if np.any(im_values <= 0):
        raise InvalidArgument("Im z must be positive on the scan grid")
    res = _WeightedResolvent(eig, conj, s)
    pts = [(x, y, res.bound(E + x + 1j * y)) for y in im_values for x in re]
    pts.sort(key=lambda t: -t[2])
    sup, arg, evaluated = 0.0, None, 0
    for x, y, bound in pts:
        if bound <= sup:
            break
        val = res.norm(E + x + 1j * y, sup)
        evaluated += 1
        if val > sup:
            sup, arg = val, (float(x), float(y))
    curve_w, curve_u = [], []
    if arg is not None:
        for y in im_values:
            z = E + arg[0] + 1j * y
            curve_w.append(res.norm(z))
            curve_u.append(float(1.0 / np.min(np.abs(allvals - z))))
    return {"n": window.n, "sigma": window.sigma, "s": s, "sup": sup, "sup_times_sigma": sup * window.sigma,
            "sup_unweighted": float(max(1.0 / np.min(np.abs(allvals - (E + x + 1j * y))) for x in re for y in im_values)), "argmax": arg,
            "im": im_values.tolist(), "weighted_vs_im": curve_w, "unweighted_vs_im": curve_u,
            "points": len(pts), "evaluated": evaluated}


def resolvent_norm_weighted(hset: HamiltonianSet, conj: ConjugateOperator, z: complex, s: float = 1.0,
                            eig: Optional[SectorEigensystem] = None) -> float:
    """||<A>^{-s}(H - z)^{-1}<A>^{-s}|| at a single z."""
    eig = eig or SectorEigensystem.build(hset.H, hset.basis)
    return _WeightedResolvent(eig, conj, s).norm(z)


# weight lemmas --------------------------------------------------------------

def _product_norm(X: np.ndarray, Y: np.ndarray) -> float:
    """||X Y^*|| for tall X, Y."""
    if X.shape[1] == 0:
        return 0.0
    _, R1 = np.linalg.qr(X)
    _, R2 = np.linalg.qr(Y)
    return float(np.linalg.norm(R1 @ R2.conj().T, 2))


def weight_lemma_norms(hset: HamiltonianSet, conj: ConjugateOperator, window: SpectralWindow, spectrum,
                       weight, s: float = 1.0) -> dict:
    """The five measured norms of the weight lemmas at one level."""
    basis = hset.basis
    x = spectrum.values - window.E
    f = window.phi(x)
    sel = f > 0
    V, fv = spectrum.vectors[:, sel], f[sel]
    Qinv = weight.bracket_f(-1.0)
    out = {"n": window.n, "sigma": window.sigma, "count": int(sel.sum())}
    # <A>^s phi(H-E) <A>^{-s}
    X = conj.apply(V * fv, s)
    Y = conj.apply(V, -s)
    out["A_conjugated_phi"] = _product_norm(X, Y)
    # Hardy: (dGamma(q) + rho)^{-1} restricted to states with a fermion below sigma_n
    fb = weight.fermion_basis
    Pmask = fb.low_mode_mask(window.sigma)
    if Pmask.any():
        R = fermion_function(weight.Q_f, lambda t: 1.0 / (t + window.rho))
        out["hardy"] = float(np.linalg.norm(R[:, Pmask], 2))
    else:
        out["hardy"] = 0.0
    # <Q>^{-1} phi(H-E)
    Z = apply_fermion(Qinv, V * fv, basis)
    out["Q_phi"] = float(np.linalg.norm(Z, 2)) if Z.size else 0.0
    # A <Q>^{-1}
    out["A_Q"] = float(np.linalg.norm(conj.A_f @ Qinv, 2))
    # <Q>^{-1} phi(H-E) A
    out["Q_phi_A"] = _product_norm(Z, conj.apply(V, bracket=False))
    return out


def weight_lemma_checks(records: list) -> dict:
    """Log-log slopes over levels of the weight-lemma norms."""
    sig = np.array([r["sigma"] for r in records])
    out = {"levels": [r["n"] for r in records]}
    for key in ("A_conjugated_phi", "hardy", "Q_phi", "A_Q", "Q_phi_A"):
        vals = np.array([r[key] for r in records])
        ok = vals > 0
        out[key] = vals.tolist()
        out[key + "_slope"] = loglog_slope(sig[ok], vals[ok]) if ok.sum() >= 2 else float("nan")
    a = np.array(out["A_conjugated_phi"])
    out["A_conjugated_phi_spread"] = float(a.max() / a.min()) if np.all(a > 0) else float("inf")
    return out
