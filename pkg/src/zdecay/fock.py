"""Mode grids, truncated Fock bases and sparse ladder operators.

The fermion sign convention orders all neutrino modes before all
antineutrino modes, so a neutrino operator picks up (-1)^(occupied nu
modes below it) and an antineutrino operator additionally (-1)^(N_nu).
Neutrino and antineutrino operators therefore anticommute; fermion and
boson operators commute.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, ResourceLimit
from .partialwave import Channel

M_Z = 91.18

NU, NUBAR, BOSON = "nu", "nubar", "boson"
SPECIES = (NU, NUBAR, BOSON)


@dataclass(frozen=True, eq=False)
class ModeGrid:
    """Discretized one-particle spaces with quadrature weights.

    Fermion modes are (node, channel) pairs ordered node-major; boson modes
    are (|k|, polarization) pairs.  Smeared operators carry sqrt(w) so the
    discrete CAR/CCR read delta_ij.
    """

    nu_p: np.ndarray
    nu_w: np.ndarray
    nu_channels: tuple
    nubar_p: np.ndarray
    nubar_w: np.ndarray
    nubar_channels: tuple
    k: np.ndarray
    k_w: np.ndarray
    k_pol: np.ndarray
    p_max: float
    k_max: float
    m_z: float = M_Z

    def __post_init__(self):
        for name in ("nu_w", "nubar_w", "k_w"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise InvalidArgument(f"{name} must be positive")
        for p in (self.nu_p, self.nubar_p):
            if np.any(np.asarray(p) <= 0):
                raise InvalidArgument("fermion momenta must be > 0")
            if np.any(np.diff(np.asarray(p, dtype=float)) < 0):
                raise InvalidArgument("fermion modes must be ordered by momentum")
        if len(self.k) == 0:
            raise InvalidArgument("boson grid needs at least one mode")

    @property
    def n_nu(self) -> int:
        return len(self.nu_p)

    @property
    def n_nubar(self) -> int:
        return len(self.nubar_p)

    @property
    def n_boson(self) -> int:
        return len(self.k)

    @property
    def omega3(self) -> np.ndarray:
        return np.sqrt(self.k**2 + self.m_z**2)

    def modes(self, species: str):
        if species == NU:
            return self.nu_p, self.nu_w
        if species == NUBAR:
            return self.nubar_p, self.nubar_w
        if species == BOSON:
            return self.k, self.k_w
        raise InvalidArgument(f"unknown species {species!r}")

    def energies(self, species: str) -> np.ndarray:
        return self.omega3 if species == BOSON else self.modes(species)[0]

    def subgrid(self, nu_keep, nubar_keep) -> "ModeGrid":
        """Grid restricted to the selected fermion modes (bosons unchanged)."""
        i1 = np.flatnonzero(nu_keep)
        i2 = np.flatnonzero(nubar_keep)
        return ModeGrid(self.nu_p[i1], self.nu_w[i1], tuple(self.nu_channels[i] for i in i1),
                        self.nubar_p[i2], self.nubar_w[i2], tuple(self.nubar_channels[i] for i in i2),
                        self.k, self.k_w, self.k_pol, self.p_max, self.k_max, self.m_z)

    def to_dict(self) -> dict:
        ch = lambda cs: [[c.j, c.m_j, c.kappa] for c in cs]
        return {
            "nu_p": self.nu_p.tolist(), "nu_w": self.nu_w.tolist(), "nu_channels": ch(self.nu_channels),
            "nubar_p": self.nubar_p.tolist(), "nubar_w": self.nubar_w.tolist(),
            "nubar_channels": ch(self.nubar_channels),
            "k": self.k.tolist(), "k_w": self.k_w.tolist(), "k_pol": self.k_pol.tolist(),
            "p_max": self.p_max, "k_max": self.k_max, "m_z": self.m_z,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModeGrid":
        ch = lambda rows: tuple(Channel(float(a), float(b), int(c)) for a, b, c in rows)
        arr = lambda key: np.asarray(d[key], dtype=float)
        return cls(arr("nu_p"), arr("nu_w"), ch(d["nu_channels"]), arr("nubar_p"), arr("nubar_w"),
                   ch(d["nubar_channels"]), arr("k"), arr("k_w"), np.asarray(d["k_pol"], dtype=int),
                   float(d["p_max"]), float(d["k_max"]), float(d.get("m_z", M_Z)))


def geometric_nodes(n: int, p_min: float, p_max: float):
    """Geometric nodes with log-midpoint weights w_i = p_i ln(ratio)."""
    if n < 1:
        raise InvalidArgument("need at least one node")
    if n == 1:
        return np.array([p_min]), np.array([p_min])
    nodes = np.geomspace(p_min, p_max, n)
    ratio = (p_max / p_min) ** (1.0 / (n - 1))
    return nodes, nodes * np.log(ratio)


def boson_nodes(n: int, k_max: float):
    """Midpoint |k| nodes on (0, k_max] with the full solid angle in the weight."""
    dk = k_max / n
    k = (np.arange(n) + 0.5) * dk
    return k, 4.0 * np.pi * k**2 * dk


def geometric_grid(n_nodes: int = 6, p_min: float = M_Z / 256, p_max: float = 2 * M_Z,
                   channels=(Channel(),), n_boson: int = 2, k_max: float = 1.2 * M_Z,
                   polarizations=(1, -1), m_z: float = M_Z) -> ModeGrid:
    """Default radial grid: geometric fermion nodes, midpoint boson shells."""
    p, w = geometric_nodes(n_nodes, p_min, p_max)
    channels = tuple(channels)
    fp = np.repeat(p, len(channels))
    fw = np.repeat(w, len(channels))
    fch = tuple(channels) * n_nodes
    k, kw = boson_nodes(n_boson, k_max)
    pols = tuple(polarizations)
    bk = np.repeat(k, len(pols))
    bw = np.repeat(kw, len(pols))
    bpol = np.array(pols * n_boson, dtype=int)
    return ModeGrid(fp, fw, fch, fp.copy(), fw.copy(), fch, bk, bw, bpol, float(p_max),
                    float(k_max), m_z)


def toy_grid(n_nu: int = 1, n_nubar: int = 1, n_boson: int = 1, m_z: float = M_Z) -> ModeGrid:
    """Small grid used by oracle tests: nodes spread over (0, m_z)."""
    def fermions(n):
        p = m_z * np.arange(1, n + 1) / (n + 1)
        return p, np.full(n, m_z / (n + 1))
    p1, w1 = fermions(n_nu)
    p2, w2 = fermions(n_nubar)
    k, kw = boson_nodes(n_boson, m_z)
    return ModeGrid(p1, w1, (Channel(),) * n_nu, p2, w2, (Channel(),) * n_nubar, k, kw,
                    np.ones(n_boson, dtype=int), float(m_z), float(m_z), m_z)


@dataclass(frozen=True)
class SparseHermitian:
    """CSR operator with hermiticity metadata, verified on construction."""

    matrix: sp.csr_matrix
    hermitian: bool = True
    real: bool = False
    tol: float = 1e-13

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix)
        object.__setattr__(self, "matrix", m)
        if m.shape[0] != m.shape[1]:
            raise InvalidArgument("operator must be square")
        if self.hermitian:
            diff = m - m.conj().T
            scale = max(1.0, abs(m).max() if m.nnz else 0.0)
            if diff.nnz and abs(diff).max() > self.tol * scale:
                raise InvalidArgument(f"operator is not Hermitian (max deviation {abs(diff).max():.3e})")
        if self.real is False and m.nnz and np.all(np.imag(m.data) == 0):
            object.__setattr__(self, "real", True)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    def triplets(self):
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data


def _fermion_configs(n_modes: int, cap: int) -> list[int]:
    out = []
    for k in range(min(cap, n_modes) + 1):
        for combo in itertools.combinations(range(n_modes), k):
            out.append(sum(1 << i for i in combo))
    return out


def _boson_configs(n_modes: int, cap: int) -> list[tuple]:
    out = []
    for total in range(cap + 1):
        level = []
        for combo in itertools.combinations_with_replacement(range(n_modes), total):
            occ = [0] * n_modes
            for i in combo:
                occ[i] += 1
            level.append(tuple(occ))
        out.extend(sorted(set(level), reverse=True))
    return out


def _popcount(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    count = np.zeros_like(x)
    while np.any(x):
        count += x & 1
        x = x >> 1
    return count


@dataclass(eq=False)
class FockBasis:
    """Enumerated occupation basis of F_a (nu) x F_a (nubar) x F_s (Z0).

    Index = (i_nu * n_nubar_cfg + i_nubar) * n_boson_cfg + i_boson; the
    vacuum sits at index 0.
    """

    grid: ModeGrid
    nu_cap: int
    nubar_cap: int
    boson_cap: int
    nu_cfg: list = field(init=False)
    nubar_cfg: list = field(init=False)
    bos_cfg: list = field(init=False)

    def __post_init__(self):
        self.nu_cfg = _fermion_configs(self.grid.n_nu, self.nu_cap)
        self.nubar_cfg = _fermion_configs(self.grid.n_nubar, self.nubar_cap)
        self.bos_cfg = _boson_configs(self.grid.n_boson, self.boson_cap)
        self.nu_lookup = {m: i for i, m in enumerate(self.nu_cfg)}
        self.nubar_lookup = {m: i for i, m in enumerate(self.nubar_cfg)}
        self.bos_lookup = {o: i for i, o in enumerate(self.bos_cfg)}
        n1, n2, n3 = len(self.nu_cfg), len(self.nubar_cfg), len(self.bos_cfg)
        idx = np.arange(n1 * n2 * n3)
        self.i_nu = idx // (n2 * n3)
        self.i_nubar = (idx // n3) % n2
        self.i_bos = idx % n3
        self.nu_mask = np.asarray(self.nu_cfg, dtype=np.int64)[self.i_nu]
        self.nubar_mask = np.asarray(self.nubar_cfg, dtype=np.int64)[self.i_nubar]
        self.bos_occ = np.asarray(self.bos_cfg, dtype=np.int64).reshape(n3, -1)[self.i_bos]
        self.n_nu = _popcount(self.nu_mask)
        self.n_nubar = _popcount(self.nubar_mask)
        self.n_bos = self.bos_occ.sum(axis=1)

    @property
    def dim(self) -> int:
        return len(self.i_nu)

    @property
    def shape(self):
        return len(self.nu_cfg), len(self.nubar_cfg), len(self.bos_cfg)

    def index(self, nu_modes=(), nubar_modes=(), bosons=None) -> int:
        """Basis index of the state with the given occupied modes."""
        m1 = sum(1 << i for i in nu_modes)
        m2 = sum(1 << i for i in nubar_modes)
        occ = tuple(bosons) if bosons is not None else (0,) * self.grid.n_boson
        n1, n2, n3 = self.shape
        try:
            return (self.nu_lookup[m1] * n2 + self.nubar_lookup[m2]) * n3 + self.bos_lookup[occ]
        except KeyError as exc:
            raise InvalidArgument("state not in truncated basis") from exc

    def state(self, index: int):
        occ = lambda mask: tuple(i for i in range(64) if (int(mask) >> i) & 1)
        return occ(self.nu_mask[index]), occ(self.nubar_mask[index]), tuple(self.bos_occ[index])

    def vacuum(self) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[0] = 1.0
        return v

    def interior_mask(self) -> np.ndarray:
        """States strictly below every cap (where truncated CAR/CCR are exact)."""
        return (self.n_nu < self.nu_cap) & (self.n_nubar < self.nubar_cap) & (self.n_bos < self.boson_cap)

    def sector_labels(self) -> np.ndarray:
        """Conserved labels of H: (N_nu - N_nubar, (N_nu + N_Z) mod 2)."""
        return np.stack([self.n_nu - self.n_nubar, (self.n_nu + self.n_bos) % 2], axis=1)

    def sectors(self, subset=None) -> dict:
        """Map sector label -> sorted array of basis indices (optionally within ``subset``)."""
        labels = self.sector_labels()
        idx = np.arange(self.dim) if subset is None else np.asarray(subset)
        out = {}
        for key in sorted({tuple(int(v) for v in x) for x in labels[idx]}):
            sel = np.all(labels[idx] == key, axis=1)
            out[key] = idx[sel]
        return out

    def low_mode_mask(self, sigma: float) -> np.ndarray:
        """States with at least one fermion in a mode of momentum < sigma."""
        low_nu = sum(1 << i for i, p in enumerate(self.grid.nu_p) if p < sigma)
        low_nubar = sum(1 << i for i, p in enumerate(self.grid.nubar_p) if p < sigma)
        return ((self.nu_mask & low_nu) != 0) | ((self.nubar_mask & low_nubar) != 0)


def build_basis(grid: ModeGrid, caps=(2, 2, 2), max_dim: int = 200_000) -> FockBasis:
    """Enumerate the truncated Fock basis; caps = (nu, nubar, boson)."""
    nu_cap, nubar_cap, boson_cap = (int(c) for c in caps)
    if min(nu_cap, nubar_cap, boson_cap) < 0:
        raise InvalidArgument("caps must be non-negative")
    from math import comb
    n1 = sum(comb(grid.n_nu, k) for k in range(min(nu_cap, grid.n_nu) + 1))
    n2 = sum(comb(grid.n_nubar, k) for k in range(min(nubar_cap, grid.n_nubar) + 1))
    n3 = sum(comb(grid.n_boson + t - 1, t) for t in range(boson_cap + 1))
    estimate = n1 * n2 * n3
    if estimate > max_dim:
        raise ResourceLimit(f"basis dimension {estimate} exceeds budget {max_dim}", estimate=estimate)
    return FockBasis(grid, nu_cap, nubar_cap, boson_cap)


def _species_count(basis: FockBasis, species: str) -> int:
    return {NU: basis.grid.n_nu, NUBAR: basis.grid.n_nubar, BOSON: basis.grid.n_boson}[species]


def annihilator(basis: FockBasis, species: str, mode: int):
    """Sparse (b, b^dagger) for one mode of one species."""
    if species not in SPECIES:
        raise InvalidArgument(f"unknown species {species!r}")
    if not 0 <= mode < _species_count(basis, species):
        raise InvalidArgument(f"mode index {mode} out of range for {species}")
    n1, n2, n3 = basis.shape
    if species == BOSON:
        occ = basis.bos_occ[:, mode]
        src = np.nonzero(occ > 0)[0]
        cfg_map = np.full(n3, -1)
        for i, o in enumerate(basis.bos_cfg):
            if o[mode] > 0:
                lowered = list(o)
                lowered[mode] -= 1
                cfg_map[i] = basis.bos_lookup[tuple(lowered)]
        dst = (basis.i_nu[src] * n2 + basis.i_nubar[src]) * n3 + cfg_map[basis.i_bos[src]]
        vals = np.sqrt(occ[src].astype(float))
    else:
        bit = 1 << mode
        below = bit - 1
        if species == NU:
            masks = basis.nu_mask
            cfgs, lookup = basis.nu_cfg, basis.nu_lookup
        else:
            masks = basis.nubar_mask
            cfgs, lookup = basis.nubar_cfg, basis.nubar_lookup
        src = np.nonzero(masks & bit)[0]
        cfg_map = np.full(len(cfgs), -1)
        for i, m in enumerate(cfgs):
            if m & bit:
                cfg_map[i] = lookup[m & ~bit]
        parity = _popcount(masks[src] & below)
        if species == NU:
            dst = (cfg_map[basis.i_nu[src]] * n2 + basis.i_nubar[src]) * n3 + basis.i_bos[src]
        else:
            parity = parity + basis.n_nu[src]
            dst = (basis.i_nu[src] * n2 + cfg_map[basis.i_nubar[src]]) * n3 + basis.i_bos[src]
        vals = np.where(parity % 2 == 0, 1.0, -1.0)
    b = sp.csr_matrix((vals, (dst, src)), shape=(basis.dim, basis.dim))
    return b, sp.csr_matrix(b.T)


def ladder_set(basis: FockBasis, species: str):
    """All annihilators of one species, as a list of CSR matrices."""
    return [annihilator(basis, species, i)[0] for i in range(_species_count(basis, species))]


def number_operator(basis: FockBasis, species: str) -> SparseHermitian:
    n = {NU: basis.n_nu, NUBAR: basis.n_nubar, BOSON: basis.n_bos}[species]
    return SparseHermitian(sp.diags(n.astype(float)).tocsr())


def occupation(basis: FockBasis, species: str) -> np.ndarray:
    """(dim, n_modes) 0/1 (or boson count) occupation table."""
    if species == BOSON:
        return basis.bos_occ.astype(float)
    masks = basis.nu_mask if species == NU else basis.nubar_mask
    n = _species_count(basis, species)
    return ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(float)


def dgamma(basis: FockBasis, species: str, h, hermitian: bool = True):
    """Second quantization sum_ij h_ij c_i^dagger c_j for one species."""
    h = np.asarray(h)
    n = _species_count(basis, species)
    if h.shape != (n, n):
        raise InvalidArgument(f"one-particle matrix must be {n}x{n}, got {h.shape}")
    if np.count_nonzero(h - np.diag(np.diag(h))) == 0:
        diag = occupation(basis, species) @ np.diag(h)
        mat = sp.diags(diag).tocsr()
    else:
        ops = ladder_set(basis, species)
        mat = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
        for i in range(n):
            for j in range(n):
                if h[i, j] != 0:
                    mat = mat + h[i, j] * (ops[i].T @ ops[j])
        mat = sp.csr_matrix(mat)
    if hermitian:
        return SparseHermitian(mat)
    return SparseHermitian(mat, hermitian=False)


def algebra_residuals(basis: FockBasis) -> dict:
    """Largest entry of each truncated CAR/CCR residual on states strictly below the caps.

    Keys: 'car' ({b_i, b_j^+} - delta_ij and {b_i, b_j} within a species),
    'cross' (anticommutators between nu and nubar operators), 'mixed'
    (commutators of fermion and Z0 operators), 'ccr' ([a_k, a_l^+] - delta_kl).
    """
    cols = np.flatnonzero(basis.interior_mask())
    eye = sp.identity(basis.dim, format="csr")

    def res(M):
        M = sp.csr_matrix(M)[:, cols]
        return float(abs(M).max()) if M.nnz else 0.0

    ops = {s: ladder_set(basis, s) for s in SPECIES}
    out = {"car": 0.0, "cross": 0.0, "mixed": 0.0, "ccr": 0.0}
    for s in (NU, NUBAR):
        L = ops[s]
        for i, b in enumerate(L):
            for j, c in enumerate(L):
                d = eye if i == j else 0 * eye
                out["car"] = max(out["car"], res(b @ c.T + c.T @ b - d), res(b @ c + c @ b))
    for b in ops[NU]:
        for c in ops[NUBAR]:
            out["cross"] = max(out["cross"], res(b @ c + c @ b), res(b @ c.T + c.T @ b))
    for s in (NU, NUBAR):
        for b in ops[s]:
            for a in ops[BOSON]:
                out["mixed"] = max(out["mixed"], res(b @ a - a @ b), res(b @ a.T - a.T @ b))
    for k, a in enumerate(ops[BOSON]):
        for l, c in enumerate(ops[BOSON]):
            d = eye if k == l else 0 * eye
            out["ccr"] = max(out["ccr"], res(a @ c.T - c.T @ a - d))
    return out
