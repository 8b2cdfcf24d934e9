"""Eigensolvers, the infrared cascade and the Weyl-sequence probe."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidArgument, NumericFailure
from .fock import NU, NUBAR, FockBasis, SparseHermitian, annihilator
from .hamiltonian import (CutoffFamily, HamiltonianSet, loglog_slope, operator_norm,
                          low_energy_vectors)

DENSE_LIMIT = 4096


@dataclass
class Eigenpairs:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    method: str


def _matrix(op):
    return op.matrix if isinstance(op, SparseHermitian) else sp.csr_matrix(op)


def _norm_bound(M) -> float:
    """Cheap upper bound on ||M||_2 (max absolute row sum for Hermitian M)."""
    return float(abs(M).sum(axis=1).max()) if M.nnz else 0.0


def dense_eigenpairs(op, count: Optional[int] = None) -> Eigenpairs:
    M = _matrix(op)
    n = M.shape[0]
    A = M.toarray()
    if count is None or count >= n:
        vals, vecs = np.linalg.eigh(A)
    else:
        vals, vecs = sla.eigh(A, subset_by_index=[0, count - 1], driver="evr")
    res = np.linalg.norm(A @ vecs - vecs * vals, axis=0)
    return Eigenpairs(vals, vecs, res, "dense")


def _orth(x, *bases):
    """Twice-iterated Gram-Schmidt of x against the given orthonormal column blocks."""
    for _ in range(2):
        for Q in bases:
            if Q.shape[1]:
                x = x - Q @ (Q.conj().T @ x)
    return x


def lanczos_eigenpairs(op, count: int, tol: float = 1e-11, krylov: Optional[int] = None,
                       max_restarts: int = 500, seed: int = 0) -> Eigenpairs:
    """Lowest ``count`` eigenpairs by thick-restart Lanczos with locking.

    Every cycle extends the retained Ritz vectors by ``krylov`` Lanczos steps
    (fully reorthogonalized, deflated against locked vectors), performs a
    Rayleigh-Ritz step and locks pairs with ||Hv - lambda v|| <= tol ||H||,
    ||H|| estimated by the maximal absolute row sum.  A fresh random
    direction enters every cycle so degenerate levels are resolved.
    """
    M = _matrix(op)
    n = M.shape[0]
    if count >= n:
        raise InvalidArgument("count must be smaller than the dimension")
    scale = max(_norm_bound(M), 1e-300)
    m = min(n, krylov or max(40, 2 * count + 20))
    keep = count + 4
    rng = np.random.default_rng(seed)
    rand = lambda: rng.standard_normal(n) + 1j * rng.standard_normal(n)
    locked = np.zeros((n, 0), dtype=complex)
    lvals, lres = [], []
    V = np.zeros((n, 0), dtype=complex)
    best = np.inf
    for cycle in range(max_restarts):
        if len(lvals) >= count:
            break
        # extend V by a Krylov sequence started from the residual of the lowest Ritz vector
        cols = [V[:, i] for i in range(V.shape[1])]
        start = rand() if not cols else M @ cols[0]
        extra = [rand(), start]
        for x in extra:
            Q = np.column_stack(cols) if cols else np.zeros((n, 0), dtype=complex)
            x = _orth(x, locked, Q)
            nx = np.linalg.norm(x)
            if nx > 1e-10 * max(1.0, np.linalg.norm(start)):
                cols.append(x / nx)
        steps = min(m, n - locked.shape[1]) - len(cols)
        for _ in range(max(steps, 0)):
            Q = np.column_stack(cols)
            x = _orth(M @ cols[-1], locked, Q)
            nx = np.linalg.norm(x)
            if nx < 1e-12 * scale:
                x = _orth(rand(), locked, Q)
                nx = np.linalg.norm(x)
                if nx < 1e-12:
                    break
            cols.append(x / nx)
        Q = np.column_stack(cols)
        HQ = M @ Q
        T = Q.conj().T @ HQ
        theta, S = np.linalg.eigh(0.5 * (T + T.conj().T))
        X = Q @ S[:, :keep]
        R = HQ @ S[:, :keep] - X * theta[:keep]
        rn = np.linalg.norm(R, axis=0)
        best = min(best, rn[0])
        nlock = 0
        while nlock < len(rn) and rn[nlock] <= tol * scale and len(lvals) < count:
            lvals.append(theta[nlock])
            lres.append(rn[nlock])
            nlock += 1
        if nlock:
            locked = np.hstack([locked, X[:, :nlock]])
        V = X[:, nlock:keep]
    else:
        raise NumericFailure(f"Lanczos did not converge (best residual {best:.3e})", achieved=best)
    Hs = locked.conj().T @ (M @ locked)
    w, U = np.linalg.eigh(0.5 * (Hs + Hs.conj().T))
    vecs = locked @ U
    resid = np.linalg.norm(M @ vecs - vecs * w, axis=0)
    return Eigenpairs(w, vecs, resid, "lanczos")


def lowest_eigenpairs(op, count: int, tol: float = 1e-11, method: str = "auto",
                      seed: int = 0) -> Eigenpairs:
    """Lowest eigenpairs, dense below DENSE_LIMIT and Lanczos above (or as requested)."""
    M = _matrix(op)
    n = M.shape[0]
    if count < 1:
        raise InvalidArgument("count must be positive")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "lanczos"
    if method == "dense":
        return dense_eigenpairs(M, min(count, n))
    if method == "lanczos":
        return lanczos_eigenpairs(M, count, tol, seed=seed)
    raise InvalidArgument(f"unknown method {method!r}")


def boson_gauge(basis: FockBasis) -> np.ndarray:
    """Phases i^{N_Z}: every interaction monomial changes N_Z by one, so this gauge makes H real."""
    return 1j ** (basis.n_bos % 4)


def dense_sector_eigh(block, phases: Optional[np.ndarray] = None, count: Optional[int] = None):
    """(values, vectors) of a Hermitian block, in real arithmetic when the gauge allows it."""
    A = block.toarray() if sp.issparse(block) else np.asarray(block)
    if phases is not None:
        G = np.conj(phases)[:, None] * A * phases[None, :]
        scale = max(np.abs(G).max(), 1e-300)
        if np.abs(G.imag).max() <= 1e-13 * scale:
            A_r = 0.5 * (G.real + G.real.T)
            sub = None if count is None or count >= len(A_r) else [0, count - 1]
            w, U = sla.eigh(A_r, subset_by_index=sub, driver="evr")
            return w, phases[:, None] * U
    sub = None if count is None or count >= len(A) else [0, count - 1]
    w, U = sla.eigh(0.5 * (A + A.conj().T), subset_by_index=sub, driver="evr")
    return w, U.astype(complex)


def sector_eigenpairs(op, basis: FockBasis, count: int = 2) -> dict:
    """Lowest ``count`` eigenpairs per conserved sector, as {label: Eigenpairs} on the full basis."""
    M = _matrix(op).tocsr()
    gauge = boson_gauge(basis)
    out = {}
    for key, idx in basis.sectors().items():
        block = M[idx][:, idx]
        k = min(count, len(idx))
        if len(idx) <= DENSE_LIMIT:
            w, U = dense_sector_eigh(block, gauge[idx], k)
            res = np.linalg.norm(block @ U - U * w, axis=0)
            ep = Eigenpairs(w, U, res, "dense")
        else:
            ep = lanczos_eigenpairs(block, k)
        vecs = np.zeros((basis.dim, len(ep.values)), dtype=complex)
        vecs[idx] = ep.vectors
        out[key] = Eigenpairs(ep.values, vecs, ep.residuals, ep.method)
    return out


def merged_spectrum(sectors: dict):
    """Concatenate sector eigenpairs sorted by energy: (values, vectors, labels)."""
    vals, vecs, labels = [], [], []
    for key, ep in sectors.items():
        vals.append(ep.values)
        vecs.append(ep.vectors)
        labels.extend([key] * len(ep.values))
    vals = np.concatenate(vals)
    vecs = np.hstack(vecs)
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order], [labels[i] for i in order]


@dataclass(eq=False)
class SectorEigensystem:
    """Every eigenpair of H, per conserved sector: blocks of (label, indices, values, vectors)."""

    dim: int
    blocks: list

    @classmethod
    def build(cls, op, basis: FockBasis) -> "SectorEigensystem":
        M = _matrix(op).tocsr()
        gauge = boson_gauge(basis)
        blocks = []
        for key, idx in basis.sectors().items():
            w, U = dense_sector_eigh(M[idx][:, idx], gauge[idx])
            blocks.append((key, idx, w, U))
        return cls(basis.dim, blocks)

    @property
    def values(self) -> np.ndarray:
        return np.sort(np.concatenate([b[2] for b in self.blocks]))

    def low(self, e_max: float) -> "LowSpectrum":
        vals, vecs, labels = [], [], []
        for key, idx, w, U in self.blocks:
            sel = w <= e_max
            V = np.zeros((self.dim, int(sel.sum())), dtype=complex)
            V[idx] = U[:, sel]
            vals.append(w[sel])
            vecs.append(V)
            labels.extend([key] * int(sel.sum()))
        vals = np.concatenate(vals)
        order = np.argsort(vals, kind="stable")
        return LowSpectrum(vals[order], np.hstack(vecs)[:, order], [labels[i] for i in order], e_max)


@dataclass
class LowSpectrum:
    """All eigenpairs of H below a cutoff, merged over sectors."""

    values: np.ndarray
    vectors: np.ndarray
    labels: list
    e_max: float

    @property
    def E(self) -> float:
        return float(self.values[0])

    @property
    def ground(self) -> np.ndarray:
        return self.vectors[:, 0]


def low_spectrum(op, basis: FockBasis, e_max: float, eig: Optional[SectorEigensystem] = None) -> LowSpectrum:
    """Every eigenpair of ``op`` below e_max (dense per sector)."""
    eig = eig or SectorEigensystem.build(op, basis)
    return eig.low(e_max)


# cascade --------------------------------------------------------------------

@dataclass
class CascadeRecord:
    g: float
    sigma: np.ndarray
    E_n: np.ndarray
    gap: np.ndarray
    gap_free: np.ndarray
    overlap_vac: np.ndarray
    N_plus: np.ndarray
    N_minus: np.ndarray
    phi: list = field(repr=False)
    E: float = 0.0
    phi_gs: Optional[np.ndarray] = field(default=None, repr=False)
    gs_overlap: Optional[np.ndarray] = None
    degenerate: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        """JSON-ready per-level scalars."""
        return {
            "g": self.g, "E": self.E, "sigma": self.sigma.tolist(), "E_n": self.E_n.tolist(),
            "gap": self.gap.tolist(), "gap_free": self.gap_free.tolist(),
            "overlap_vac": self.overlap_vac.tolist(), "N_plus": self.N_plus.tolist(),
            "N_minus": self.N_minus.tolist(),
            "gs_overlap": None if self.gs_overlap is None else self.gs_overlap.tolist(),
            "degenerate": self.degenerate, "checks": self.checks,
        }

    @property
    def P_gs(self) -> np.ndarray:
        return np.outer(self.phi_gs, self.phi_gs.conj())


def _ground_and_gap(op, basis: FockBasis):
    secs = sector_eigenpairs(op, basis, count=2)
    vals, vecs, _ = merged_spectrum(secs)
    return vals[0], vals[1] - vals[0], vecs[:, 0]


def form_bound_constants(family: CutoffFamily) -> dict:
    """(a~, b~) of the shell form bound |<H_sh psi, psi>| <= delta_n (a~ <H_0 psi, psi> + b~ ||psi||^2).

    Per shell, c_n = ||(H_{0,n+1}+1)^{-1/2} H_sh (H_{0,n+1}+1)^{-1/2}|| gives
    a~ = b~ = c_n / delta_n; the maxima over shells are returned.
    """
    per = []
    for n in range(len(family.levels) - 1):
        nxt = family.levels[n + 1]
        sh = family.shell(n).matrix[nxt.embed][:, nxt.embed]
        d = sp.diags(1.0 / np.sqrt(nxt.sub_set.h0_diag + 1.0))
        c = operator_norm(d @ sh @ d)
        per.append(c / (family.levels[n].sigma - nxt.sigma))
    a = max(per) if per else 0.0
    return {"a_tilde": a, "b_tilde": a, "per_shell": per,
            "C_gap": family.sigma0 * a + 4 * a}


def number_bound_check(family: CutoffFamily, n: int, phi: np.ndarray) -> dict:
    """||N_+^{1/2} phi_n|| against (g/sqrt(m_Z)) (||F1/p1|| + ||F2/p1||) ||(H_0+1)^{1/2} phi_n||.

    Also reports the bound without the 1/sqrt(m_Z) factor, which is what the
    pull-through argument gives when N_Z0 + 1 <= H_0 + 1 (m_Z >= 1 GeV).
    """
    hs = family.hset
    basis = hs.basis
    tab = family.levels[n].table
    m_z = basis.grid.m_z
    h0 = hs.h0_diag
    w = np.abs(phi) ** 2
    out = {}
    for name, count, key in (("plus", basis.n_nu, "p1inv"), ("minus", basis.n_nubar, "p2inv")):
        lhs = float(np.sqrt(np.sum(count * w)))
        knorm = tab.norm(1, key) + tab.norm(2, key)
        energy = float(np.sqrt(np.sum((h0 + 1.0) * w)))
        printed = hs.g / np.sqrt(m_z) * knorm * energy
        plain = hs.g * knorm * energy
        out[name] = {"lhs": lhs, "bound": printed, "bound_without_mz": plain,
                     "holds": bool(lhs <= printed * (1 + 1e-9)),
                     "holds_without_mz": bool(lhs <= plain * (1 + 1e-9))}
    return out


def run_cascade(family: CutoffFamily, g: Optional[float] = None, with_full: bool = True) -> CascadeRecord:
    """Ground states and gaps of K_n for every level, plus the full ground state."""
    if g is not None and g != family.hset.g:
        family = family_with_coupling(family, g)
    g = family.hset.g
    basis = family.hset.basis
    L = len(family.levels)
    E_n, gaps, gfree, ov, npl, nmi, phis = [], [], [], [], [], [], []
    degenerate = []
    for lv in family.levels:
        sub = lv.sub_basis
        e, gap, v = _ground_and_gap(lv.Kn, sub)
        free = np.sort(lv.sub_set.h0_diag)
        gfree.append(float(free[1] - free[0]) if len(free) > 1 else np.inf)
        phi = np.zeros(basis.dim, dtype=complex)
        phi[lv.embed] = v
        k = np.argmax(np.abs(phi))
        phi *= np.exp(-1j * np.angle(phi[k]))
        E_n.append(e)
        gaps.append(gap)
        if gap < 1e-10 * lv.sigma:
            degenerate.append(lv.n)
            warnings.warn(f"K_{lv.n} ground state is degenerate (gap {gap:.3e})", stacklevel=2)
        ov.append(float(np.abs(phi[0]) ** 2))
        w = np.abs(phi) ** 2
        npl.append(float(np.sum(basis.n_nu * w)))
        nmi.append(float(np.sum(basis.n_nubar * w)))
        phis.append(phi)
    rec = CascadeRecord(g, family.sigmas, np.array(E_n), np.array(gaps), np.array(gfree), np.array(ov),
                        np.array(npl), np.array(nmi), phis, degenerate=degenerate)
    if with_full:
        E, _, phi_gs = _ground_and_gap(family.hset.H, basis)
        phi_gs = phi_gs * np.exp(-1j * np.angle(phi_gs[np.argmax(np.abs(phi_gs))]))
        rec.E = float(E)
        rec.phi_gs = phi_gs
        rec.gs_overlap = np.array([abs(np.vdot(phi_gs, p)) ** 2 for p in phis])
    rec.checks = cascade_checks(rec, family)
    return rec


def cascade_checks(rec: CascadeRecord, family: CutoffFamily, tol: float = 1e-10) -> dict:
    E_n = rec.E_n
    out = {
        "monotone": bool(np.all(np.diff(E_n) <= tol)),
        "nonpositive": bool(np.all(E_n <= tol)),
        "E_below_En": bool(np.all(rec.E <= E_n + tol)),
        "overlap_in_unit": bool(np.all((rec.overlap_vac >= -tol) & (rec.overlap_vac <= 1 + tol))),
    }
    diff = E_n - rec.E
    out["E_minus_En"] = diff.tolist()
    out["energy_slope"] = loglog_slope(rec.sigma, diff) if rec.g > 0 else float("nan")
    gap_ratio = rec.gap / rec.sigma
    out["gap_ratio"] = gap_ratio.tolist()
    if rec.g > 0:
        c_fit = (rec.gap_free - rec.gap) / (rec.g * rec.sigma)
        out["C_fit"] = c_fit.tolist()
    out["delta_g"] = float(1.0 - rec.overlap_vac.min())
    nbc = [number_bound_check(family, n, rec.phi[n]) for n in range(len(family.levels))]
    out["number_bound"] = nbc
    out["number_bound_holds"] = bool(all(x["plus"]["holds"] and x["minus"]["holds"] for x in nbc))
    out["number_bound_holds_without_mz"] = bool(all(x["plus"]["holds_without_mz"]
                                                     and x["minus"]["holds_without_mz"] for x in nbc))
    return out


def family_with_coupling(family: CutoffFamily, g: float) -> CutoffFamily:
    """The same cutoff family at another coupling (operators re-scaled, not rebuilt)."""
    from dataclasses import replace
    hs = family.hset.with_coupling(g)
    levels = []
    for lv in family.levels:
        Hn = SparseHermitian(hs.H0.matrix + g * lv.HIn.matrix)
        levels.append(replace(lv, Hn=Hn, sub_set=lv.sub_set.with_coupling(g)))
    return CutoffFamily(hs, family.sigma0, family.gamma, levels)


# Weyl probe -----------------------------------------------------------------

def wave_packet(p: np.ndarray, center: float, width: float) -> np.ndarray:
    """Normalized Gaussian in log p on the grid nodes."""
    x = np.log(p / center) / width
    f = np.exp(-0.5 * x**2)
    return f / np.linalg.norm(f)


def weyl_probe(hset: HamiltonianSet, lam: float, length: int = 4, width0: float = 2.0,
               ground: Optional[tuple] = None) -> dict:
    """Residuals ||(H - E - lam) psi_n|| of the Weyl-type states over ``length`` refinements.

    psi_n = 2^{-1/2} (b_+(f_n) + b_+^*(f_n) + b_-(g_n) + b_-^*(g_n)) phi with
    f_n = g_n Gaussian packets in log p centered at lam, width halving each
    step; phi is the numerical ground state (or ``ground`` = (E, phi)).
    """
    grid = hset.basis.grid
    lo = min(grid.nu_p.min(), grid.nubar_p.min())
    hi = max(grid.nu_p.max(), grid.nubar_p.max())
    if not lo <= lam <= hi:
        raise InvalidArgument(f"lambda={lam} outside the grid energy range [{lo}, {hi}]")
    H = hset.H.matrix
    if ground is None:
        E, _, phi = _ground_and_gap(hset.H, hset.basis)
    else:
        E, phi = ground
    b_nu = [annihilator(hset.basis, NU, i)[0] for i in range(grid.n_nu)]
    b_nb = [annihilator(hset.basis, NUBAR, j)[0] for j in range(grid.n_nubar)]
    res, norms = [], []
    for step in range(length):
        width = width0 / 2**step
        f = wave_packet(grid.nu_p, lam, width)
        h = wave_packet(grid.nubar_p, lam, width)
        Bp = sum(np.conj(f[i]) * b_nu[i] for i in range(grid.n_nu))
        Bm = sum(np.conj(h[j]) * b_nb[j] for j in range(grid.n_nubar))
        op = Bp + Bp.conj().T + Bm + Bm.conj().T
        psi = (op @ phi) / np.sqrt(2.0)
        norms.append(float(np.linalg.norm(psi)))
        res.append(float(np.linalg.norm(H @ psi - (E + lam) * psi)))
    return {"lambda": lam, "E": float(E), "residual": res, "norm": norms}
