"""Interaction kernels F^(j) = h^(j) G^(j) on the mode grid and their norms.

h^(j) is the x-integral of f(|x|) psi_+^dagger gamma^0 gamma^mu (1 - gamma_5)
psi~_- eps_mu / sqrt(2 omega_3) exp(+-i k.x), evaluated on a spherical product
grid with k along the z axis (one angular point per |k| shell).  Because
the radial amplitudes factor out of the angular integral, h is a sum over
radial nodes of products R_1(p_1, r) R_2(p_2, r) M(r), which makes the
p-derivative tables cheap.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, NumericFailure, ValidationError
from .fock import M_Z, ModeGrid
from .partialwave import (Channel, RadialCutoff, bump_cutoff, channel_spinors, radial_quadrature,
                          radial_wave)


@dataclass(frozen=True)
class PhysicalConstants:
    """Masses in GeV, Fermi constant in GeV^-2."""

    m_z: float = 91.18
    m_w: float = 80.41
    g_fermi: float = 1.16e-5
    g: Optional[float] = None

    def __post_init__(self):
        if self.g is not None and self.g < 0:
            raise InvalidArgument("coupling must be non-negative")
        if not 0 < self.cos_theta < 1:
            raise InvalidArgument("cos(theta) = m_W/m_Z must lie in (0, 1)")

    @property
    def cos_theta(self) -> float:
        return self.m_w / self.m_z

    @property
    def g_physical(self) -> float:
        """Coupling fixed by g^2 / (8 m_W^2) = G_F / sqrt(2)."""
        return float(np.sqrt(8.0 * self.m_w**2 * self.g_fermi / np.sqrt(2.0)))

    @property
    def coupling(self) -> float:
        return self.g_physical if self.g is None else self.g

    @property
    def field_prefactor(self) -> float:
        """-(1/(4 cos theta)) (2 pi)^(-3/2): constants of the interaction density."""
        return -1.0 / (4.0 * self.cos_theta) * (2.0 * np.pi) ** -1.5


def smooth_step(x, start: float, stop: float):
    """C-infinity step: 1 for x <= start, 0 for x >= stop."""
    x = np.asarray(x, dtype=float)
    t = np.clip((x - start) / (stop - start), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t < 1.0, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
        b = np.where(t > 0.0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
    return a / (a + b)


def bump_form_factor(m_z: float = M_Z, edge: float = 1.2):
    """G = 1 on [0, m_z]^2 x {|k| <= m_z}, smoothly zero beyond edge * m_z."""

    def G(p1, c1, p2, c2, k, pol):
        return (smooth_step(p1, m_z, edge * m_z) * smooth_step(p2, m_z, edge * m_z)
                * smooth_step(k, m_z, edge * m_z))

    return G


@dataclass(frozen=True)
class CutoffProfile:
    """Spatial cutoff f, form factors G1/G2 and a constant amplitude on h."""

    f: RadialCutoff = field(default_factory=bump_cutoff)
    G1: Callable = field(default_factory=bump_form_factor)
    G2: Callable = field(default_factory=bump_form_factor)
    amplitude: complex = 1.0
    support: float = 1.2 * M_Z

    def __post_init__(self):
        self.f.check_compact()


_SIGMA = [np.array([[0, 1], [1, 0]], dtype=complex),
          np.array([[0, -1j], [1j, 0]], dtype=complex),
          np.array([[1, 0], [0, -1]], dtype=complex)]
_I2 = np.eye(2, dtype=complex)
_Z2 = np.zeros((2, 2), dtype=complex)
GAMMA0 = np.block([[_I2, _Z2], [_Z2, -_I2]])
GAMMA = [GAMMA0] + [np.block([[_Z2, s], [-s, _Z2]]) for s in _SIGMA]
GAMMA5 = np.block([[_Z2, _I2], [_I2, _Z2]])


def polarization(k: float, pol: int, m_z: float = M_Z) -> np.ndarray:
    """Contravariant polarization eps^mu(k, pol) for k along the z axis."""
    if pol == 1:
        return np.array([0, -1, -1j, 0]) / np.sqrt(2.0)
    if pol == -1:
        return np.array([0, 1, -1j, 0]) / np.sqrt(2.0)
    if pol == 0:
        w = np.sqrt(k**2 + m_z**2)
        return np.array([k, 0, 0, w], dtype=complex) / m_z
    raise InvalidArgument("polarization must be -1, 0 or 1")


def vertex_matrix(eps_upper: np.ndarray) -> np.ndarray:
    """gamma^0 gamma^mu eps_mu (1 - gamma_5) with eps_mu = eta_{mu nu} eps^nu."""
    slash = GAMMA[0] * eps_upper[0] - sum(GAMMA[i] * eps_upper[i] for i in (1, 2, 3))
    return GAMMA0 @ slash @ (np.eye(4) - GAMMA5)


_FD = {
    0: ((0,), (1.0,), 0),
    1: ((-2, -1, 1, 2), (1 / 12, -8 / 12, 8 / 12, -1 / 12), 1),
    2: ((-2, -1, 0, 1, 2), (-1 / 12, 16 / 12, -30 / 12, 16 / 12, -1 / 12), 2),
}


class HQuadrature:
    """Spherical product rule for h^(j) on a ball, shared by many (p1, p2, k).

    The radial rule is composite Gauss-Legendre sized from the largest phase
    rate p1 + p2 + |k|; the polar rule is Gauss-Legendre in cos(theta) and the
    azimuthal rule is uniform (exact for the few Fourier modes present).
    Radial tables and angular moments are cached.
    """

    def __init__(self, profile: CutoffProfile, p_scale: float, k_scale: float, lmax: int = 2,
                 m_z: float = M_Z, resolution: float = 1.0, step: float = 1e-3):
        if resolution <= 0:
            raise InvalidArgument("resolution must be positive")
        self.profile, self.m_z, self.step = profile, m_z, step
        radius = profile.f.radius
        panels = int(np.ceil(resolution * (4 + p_scale * radius / 8.0)))
        self.r, wr = radial_quadrature(radius, panels, order=20)
        n_t = int(np.ceil(resolution * (16 + 2 * lmax + k_scale * radius)))
        self.cos_t, self.w_t = np.polynomial.legendre.leggauss(n_t)
        self.phi = 2.0 * np.pi * np.arange(8) / 8
        self.w_phi = 2.0 * np.pi / 8
        self.wr_f = wr * self.r**2 * profile.f(self.r)
        self._radial = {}
        self._moments = {}

    def radial(self, ch: Channel, sign: int, p, order: int = 0):
        """(g, f) tables of shape (len(p), n_r), or their p-derivatives."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        key = (ch, sign, order, p.tobytes())
        if key not in self._radial:
            offsets, coeffs, power = _FD[order]
            h = self.step * p
            g = np.zeros((len(p), len(self.r)))
            f = np.zeros((len(p), len(self.r)))
            for o, c in zip(offsets, coeffs):
                gg, ff = radial_wave(ch, sign, (p + o * h)[:, None], self.r[None, :])
                g += c * gg
                f += c * ff
            scale = (h**power)[:, None]
            self._radial[key] = (g / scale, f / scale)
        return self._radial[key]

    def moments(self, j: int, c1: Channel, c2: Channel, k: float, pol: int) -> np.ndarray:
        """M_xy(r) = int dOmega Phi_x(c1)^dag V_xy Phi_y(c2~) exp(+-i k r cos theta)."""
        key = (j, c1, c2, float(k), int(pol))
        if key not in self._moments:
            eps = polarization(k, pol, self.m_z)
            if j == 2:
                eps = eps.conj()
            V = vertex_matrix(eps)
            TH, PH = np.meshgrid(np.arccos(self.cos_t), self.phi, indexing="ij")
            left = channel_spinors(c1, TH, PH)
            right = channel_spinors(c2.flipped(), TH, PH)
            sign = 1.0 if j == 1 else -1.0
            phase = np.exp(sign * 1j * k * np.outer(self.r, self.cos_t))
            out = np.empty((2, 2, len(self.r)), dtype=complex)
            for x in (0, 1):
                for y in (0, 1):
                    B = V[2 * x:2 * x + 2, 2 * y:2 * y + 2]
                    ang = np.einsum("atp,ab,btp->t", left[x].conj(), B, right[y]) * self.w_phi
                    out[x, y] = phase @ (ang * self.w_t)
            self._moments[key] = out
        return self._moments[key]

    def h(self, j: int, c1: Channel, p1, c2: Channel, p2, k: float, pol: int,
          deriv: tuple = (0, 0)) -> np.ndarray:
        """Matrix h^(j)(p1_a, c1; p2_b, c2; k, pol), optionally p-differentiated."""
        M = self.moments(j, c1, c2, k, pol)
        W = self.wr_f / np.sqrt(2.0 * np.sqrt(k**2 + self.m_z**2))
        g1, f1 = self.radial(c1, 1, p1, deriv[0])
        g2, f2 = self.radial(c2.flipped(), -1, p2, deriv[1])
        Wm = M * W[None, None, :]
        val = (g1 @ (Wm[0, 0][:, None] * g2.T) + 1j * g1 @ (Wm[0, 1][:, None] * f2.T)
               - 1j * f1 @ (Wm[1, 0][:, None] * g2.T) + f1 @ (Wm[1, 1][:, None] * f2.T))
        return self.profile.amplitude * val


def h_block(j: int, c1: Channel, p1, c2: Channel, p2, k: float, pol: int,
            profile: CutoffProfile, m_z: float = M_Z, resolution: float = 1.0,
            deriv: tuple = (0, 0), step: float = 1e-3) -> np.ndarray:
    """h^(j)(p1_a, c1; p2_b, c2; k, pol) for arrays p1, p2 (matrix result).

    ``deriv`` = (n1, n2) returns the n1-th p1-derivative and n2-th
    p2-derivative (0, 1 or 2) by five-point differences of the radial
    amplitudes with relative step ``step``.
    """
    if j not in (1, 2):
        raise InvalidArgument("j must be 1 or 2")
    p1 = np.atleast_1d(np.asarray(p1, dtype=float))
    p2 = np.atleast_1d(np.asarray(p2, dtype=float))
    if np.any(p1 <= 0) or np.any(p2 <= 0) or k < 0:
        raise InvalidArgument("h needs p1, p2 > 0 and |k| >= 0")
    lmax = max(c1.l_upper, c1.l_lower, c2.l_upper, c2.l_lower)
    q = HQuadrature(profile, p1.max() + p2.max() + k, k, lmax, m_z, resolution, step)
    return q.h(j, c1, p1, c2, p2, k, pol, deriv)


def spinor_contraction_h(j: int, xi1, xi2, xi3, profile: CutoffProfile, m_z: float = M_Z,
                         resolution: float = 1.0) -> complex:
    """h^(j)(xi1, xi2, xi3) for xi1 = (p1, Channel), xi2 = (p2, Channel), xi3 = (|k|, pol)."""
    (p1, c1), (p2, c2), (k, pol) = xi1, xi2, xi3
    return complex(h_block(j, c1, [p1], c2, [p2], k, pol, profile, m_z, resolution)[0, 0])


DERIV_KEYS = ("p1", "p2", "p1p1", "p2p2", "p1p2")
_DERIV_ORDERS = {"p1": (1, 0), "p2": (0, 1), "p1p1": (2, 0), "p2p2": (0, 2), "p1p2": (1, 1)}


@dataclass(eq=False)
class KernelTable:
    """Continuum kernel values F^(1), F^(2) on the grid (without sqrt(w))."""

    grid: ModeGrid
    F1: np.ndarray
    F2: np.ndarray
    dF1: dict = field(default_factory=dict)
    dF2: dict = field(default_factory=dict)
    mode: str = "surrogate"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.grid.n_nu, self.grid.n_nubar, self.grid.n_boson)
        for F in (self.F1, self.F2):
            if F.shape != shape:
                raise InvalidArgument(f"kernel shape {F.shape} does not match grid {shape}")
            if not np.all(np.isfinite(F)):
                raise NumericFailure("kernel contains non-finite entries")

    def kernel(self, j: int) -> np.ndarray:
        return self.F1 if j == 1 else self.F2

    def derivative(self, j: int, key: str) -> np.ndarray:
        d = self.dF1 if j == 1 else self.dF2
        if key not in d:
            raise InvalidArgument(f"derivative table {key!r} not available")
        return d[key]

    def weights(self) -> np.ndarray:
        g = self.grid
        return g.nu_w[:, None, None] * g.nubar_w[None, :, None] * g.k_w[None, None, :]

    def discrete(self, j: int, F: Optional[np.ndarray] = None) -> np.ndarray:
        """F_ijk sqrt(w_i w_j w_k): the coefficient of the discrete Wick monomial."""
        F = self.kernel(j) if F is None else F
        return F * np.sqrt(self.weights())

    def norm(self, j: int, weight: str = "plain") -> float:
        """Discrete L^2 norm of F^(j) divided by a named weight."""
        g = self.grid
        p1 = g.nu_p[:, None, None]
        p2 = g.nubar_p[None, :, None]
        w3 = g.omega3[None, None, :]
        div = {
            "plain": 1.0, "omega3": np.sqrt(w3), "p1": np.sqrt(p1), "p2": np.sqrt(p2),
            "p2omega3": np.sqrt(p2 * w3), "p1omega3": np.sqrt(p1 * w3),
            "p1inv": p1, "p2inv": p2,
        }[weight]
        val = np.abs(self.kernel(j) / div) ** 2 * self.weights()
        return float(np.sqrt(val.sum()))

    def norms(self) -> dict:
        keys = ("plain", "omega3", "p1", "p2", "p2omega3", "p1inv", "p2inv")
        return {f"F{j}/{k}": self.norm(j, k) for j in (1, 2) for k in keys}

    def relative_bound_constants(self) -> dict:
        """C_F and C~_F of the relative bound of H_I with respect to H_0."""
        n = lambda j, k: self.norm(j, k) ** 2
        return {
            "C1": 2 * n(1, "omega3") + n(1, "p2omega3"),
            "C2": n(2, "p2omega3"),
            "Ct1": max(n(1, "p2"), n(1, "p2omega3")),
            "Ct2": max(2 * n(2, "omega3") + n(2, "p2omega3"), 2 * n(2, "plain") + n(2, "p2")),
        }


def _fill_quadrature(grid: ModeGrid, profile: CutoffProfile, m_z: float, resolution: float,
                     derivatives: bool, step: float):
    shape = (grid.n_nu, grid.n_nubar, grid.n_boson)
    F = {1: np.zeros(shape, complex), 2: np.zeros(shape, complex)}
    dF = {j: ({k: np.zeros(shape, complex) for k in DERIV_KEYS} if derivatives else {}) for j in (1, 2)}
    P1, P2 = np.meshgrid(grid.nu_p, grid.nubar_p, indexing="ij")
    nu_ch = sorted(set(grid.nu_channels), key=lambda c: (c.j, c.m_j, c.kappa))
    nubar_ch = sorted(set(grid.nubar_channels), key=lambda c: (c.j, c.m_j, c.kappa))
    lmax = max(max(c.l_upper, c.l_lower) for c in nu_ch + nubar_ch)
    q = HQuadrature(profile, (1 + 4 * step) * (grid.nu_p.max() + grid.nubar_p.max()) + grid.k.max(),
                    grid.k.max(), lmax, m_z, resolution, step)
    orders = [(0, 0)] + ([_DERIV_ORDERS[x] for x in DERIV_KEYS] if derivatives else [])
    for kk in range(grid.n_boson):
        k, pol = float(grid.k[kk]), int(grid.k_pol[kk])
        for j, G in ((1, profile.G1), (2, profile.G2)):
            for c1 in nu_ch:
                i1 = np.flatnonzero([c == c1 for c in grid.nu_channels])
                for c2 in nubar_ch:
                    i2 = np.flatnonzero([c == c2 for c in grid.nubar_channels])
                    blk = np.ix_(i1, i2)
                    g_val = G(P1[blk], c1, P2[blk], c2, k, pol)
                    h = {d: q.h(j, c1, grid.nu_p[i1], c2, grid.nubar_p[i2], k, pol, d) for d in orders}
                    F[j][np.ix_(i1, i2, [kk])] = (h[(0, 0)] * g_val)[:, :, None]
                    if derivatives:
                        Gd = _form_factor_derivatives(G, P1[blk], c1, P2[blk], c2, k, pol, step)
                        for key in DERIV_KEYS:
                            dF[j][key][np.ix_(i1, i2, [kk])] = _product_rule(key, h, Gd)[:, :, None]
    return F, dF


def _form_factor_derivatives(G, P1, c1, P2, c2, k, pol, step):
    out = {}
    for key in ("", *DERIV_KEYS):
        n1, n2 = _DERIV_ORDERS.get(key, (0, 0))
        o1, w1, pw1 = _FD[n1]
        o2, w2, pw2 = _FD[n2]
        h1, h2 = step * P1, step * P2
        acc = np.zeros_like(P1, dtype=float)
        for a, ca in zip(o1, w1):
            for b, cb in zip(o2, w2):
                acc += ca * cb * G(P1 + a * h1, c1, P2 + b * h2, c2, k, pol)
        out[key] = acc / (h1**pw1 * h2**pw2)
    return out


def _product_rule(key: str, h: dict, Gd: dict):
    h0, G0 = h[(0, 0)], Gd[""]
    if key == "p1":
        return h[(1, 0)] * G0 + h0 * Gd["p1"]
    if key == "p2":
        return h[(0, 1)] * G0 + h0 * Gd["p2"]
    if key == "p1p1":
        return h[(2, 0)] * G0 + 2 * h[(1, 0)] * Gd["p1"] + h0 * Gd["p1p1"]
    if key == "p2p2":
        return h[(0, 2)] * G0 + 2 * h[(0, 1)] * Gd["p2"] + h0 * Gd["p2p2"]
    return (h[(1, 1)] * G0 + h[(1, 0)] * Gd["p2"] + h[(0, 1)] * Gd["p1"] + h0 * Gd["p1p2"])


def power_law_surrogate(amplitude: float = 1.0, radius: float = 1.0, m_z: float = M_Z,
                        edge: float = 1.2):
    """Closed-form kernel with the small-p envelope (p r)^l of |h|.

    F = amplitude * prod_i (p_i R)^{l_i} / (1 + (p_i R)^2)^{l_i/2}
        * (k^2 + m_z^2)^(-1/4) * G_bump.
    """
    G = bump_form_factor(m_z, edge)

    def F(j, p1, c1, p2, c2, k, pol):
        s1 = (p1 * radius) ** c1.ell / (1.0 + (p1 * radius) ** 2) ** (c1.ell / 2.0)
        s2 = (p2 * radius) ** c2.ell / (1.0 + (p2 * radius) ** 2) ** (c2.ell / 2.0)
        return amplitude * s1 * s2 * (k**2 + m_z**2) ** -0.25 * G(p1, c1, p2, c2, k, pol)

    return F


def _validate_surrogate(func, grid: ModeGrid, tol: float = 0.05):
    """Reject closed forms that do not vanish like p^l as p -> 0."""
    eps = 1e-3 * min(grid.nu_p.min(), grid.nubar_p.min())
    for j in (1, 2):
        for c1 in set(grid.nu_channels):
            for c2 in set(grid.nubar_channels):
                for k, pol in zip(grid.k, grid.k_pol):
                    ref = float(np.median(grid.nubar_p))
                    a = abs(func(j, eps, c1, ref, c2, k, pol))
                    b = abs(func(j, eps / 2, c1, ref, c2, k, pol))
                    c = abs(func(j, ref, c1, eps, c2, k, pol))
                    d = abs(func(j, ref, c1, eps / 2, c2, k, pol))
                    for hi, lo, ell in ((a, b, c1.ell), (c, d, c2.ell)):
                        if hi == 0 and lo == 0:
                            continue
                        if lo == 0 or np.log2(hi / lo) < ell - tol:
                            raise ValidationError(
                                f"surrogate kernel does not vanish like p^{ell} at small momentum")


def _fill_surrogate(grid: ModeGrid, func, step: float, derivatives: bool):
    P1 = grid.nu_p[:, None]
    P2 = grid.nubar_p[None, :]
    shape = (grid.n_nu, grid.n_nubar, grid.n_boson)
    F = {1: np.zeros(shape, complex), 2: np.zeros(shape, complex)}
    dF = {1: {}, 2: {}}
    for j in (1, 2):
        for i in range(grid.n_nu):
            for l in range(grid.n_nubar):
                for kk in range(grid.n_boson):
                    F[j][i, l, kk] = func(j, grid.nu_p[i], grid.nu_channels[i], grid.nubar_p[l],
                                          grid.nubar_channels[l], grid.k[kk], grid.k_pol[kk])
        if derivatives:
            for key in DERIV_KEYS:
                n1, n2 = _DERIV_ORDERS[key]
                o1, w1, pw1 = _FD[n1]
                o2, w2, pw2 = _FD[n2]
                out = np.zeros(shape, complex)
                for i in range(grid.n_nu):
                    for l in range(grid.n_nubar):
                        p1, p2 = grid.nu_p[i], grid.nubar_p[l]
                        h1, h2 = step * p1, step * p2
                        for kk in range(grid.n_boson):
                            acc = 0.0
                            for a, ca in zip(o1, w1):
                                for b, cb in zip(o2, w2):
                                    acc += ca * cb * func(j, p1 + a * h1, grid.nu_channels[i], p2 + b * h2,
                                                          grid.nubar_channels[l], grid.k[kk], grid.k_pol[kk])
                            out[i, l, kk] = acc / (h1**pw1 * h2**pw2)
                dF[j][key] = out
    return F, dF


def build_kernel_table(grid: ModeGrid, profile: Optional[CutoffProfile] = None,
                       mode: str = "quadrature", surrogate: Optional[Callable] = None,
                       resolution: float = 1.0, derivatives: bool = True,
                       step: float = 1e-3) -> KernelTable:
    """Fill F^(1), F^(2) (and derivative tables) on the grid.

    ``mode="quadrature"`` evaluates h^(j) by 3D quadrature and multiplies by
    G^(j); ``mode="surrogate"`` uses ``surrogate(j, p1, c1, p2, c2, k, pol)``,
    validated against the small-p envelope.
    """
    profile = profile or CutoffProfile()
    if mode == "quadrature":
        F, dF = _fill_quadrature(grid, profile, grid.m_z, resolution, derivatives, step)
        meta = {"resolution": resolution, "radius": profile.f.radius}
    elif mode == "surrogate":
        if surrogate is None:
            raise InvalidArgument("surrogate mode needs a closed-form kernel")
        _validate_surrogate(surrogate, grid)
        F, dF = _fill_surrogate(grid, surrogate, step, derivatives)
        meta = {}
    else:
        raise InvalidArgument(f"unknown kernel mode {mode!r}")
    meta.update({"step": step})
    return KernelTable(grid, F[1], F[2], dF[1], dF[2], mode, meta)


def zero_table(grid: ModeGrid) -> KernelTable:
    shape = (grid.n_nu, grid.n_nubar, grid.n_boson)
    z = np.zeros(shape, complex)
    return KernelTable(grid, z, z.copy(), {k: z.copy() for k in DERIV_KEYS},
                       {k: z.copy() for k in DERIV_KEYS}, "surrogate", {})


def region_mask(grid: ModeGrid, region: Callable) -> np.ndarray:
    """Boolean (n_nu, n_nubar) mask of ``region(p1, p2)`` on the grid."""
    P1, P2 = np.meshgrid(grid.nu_p, grid.nubar_p, indexing="ij")
    return np.asarray(region(P1, P2), dtype=bool)


def restrict_kernel(table: KernelTable, region) -> KernelTable:
    """Zero the kernel (and its derivative tables) outside ``region``.

    ``region`` is a predicate on (p1, p2) arrays or a precomputed mask.
    """
    mask = region if isinstance(region, np.ndarray) else region_mask(table.grid, region)
    m = mask[:, :, None].astype(float)
    return replace(table, F1=table.F1 * m, F2=table.F2 * m,
                   dF1={k: v * m for k, v in table.dF1.items()},
                   dF2={k: v * m for k, v in table.dF2.items()},
                   meta=dict(table.meta))


# persistence ---------------------------------------------------------------

_MAGIC = b"ZDKT"
_VERSION = 1


def save_kernel_table(table: KernelTable, path) -> None:
    """Write a versioned file: magic, version, JSON header, little-endian complex data."""
    arrays = {"F1": table.F1, "F2": table.F2}
    for j, d in ((1, table.dF1), (2, table.dF2)):
        for key, val in d.items():
            arrays[f"dF{j}/{key}"] = val
    names = sorted(arrays)
    header = {
        "format": "zdecay-kernel-table", "version": _VERSION, "mode": table.mode,
        "meta": table.meta, "grid": table.grid.to_dict(), "units": "GeV",
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<c16").tobytes())


def load_kernel_table(path) -> KernelTable:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise InvalidArgument(f"{path} is not a kernel table file")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise InvalidArgument(f"unsupported kernel table version {version}")
        header = json.loads(fh.read(n))
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"]))
            arrays[spec["name"]] = np.frombuffer(fh.read(16 * count), dtype="<c16").reshape(spec["shape"]).astype(complex)
    grid = ModeGrid.from_dict(header["grid"])
    dF = {1: {}, 2: {}}
    for name, val in arrays.items():
        if name.startswith("dF"):
            dF[int(name[2])][name.split("/", 1)[1]] = val
    return KernelTable(grid, arrays["F1"], arrays["F2"], dF[1], dF[2], header["mode"], header["meta"])
