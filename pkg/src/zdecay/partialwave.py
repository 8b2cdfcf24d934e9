"""Massless Dirac partial waves: radial functions, spherical spinors, envelopes.

Radial amplitudes follow the explicit sine/cosine integral representation
for kappa = +(j+1/2) on the positive-energy branch; the other three
(kappa, branch) combinations are obtained from the branch symmetry
relations.  The confluent function L(gamma+1, 2gamma+1, z) uses the
standard weight u^gamma (1-u)^(gamma-1), which normalizes to L(., ., 0) = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import beta as beta_fn
from scipy.special import gamma as gamma_fn
from scipy.special import sph_harm_y

from .errors import InvalidArgument, NumericFailure

SQRT_PI = np.sqrt(np.pi)


@dataclass(frozen=True)
class Channel:
    """Angular quantum numbers (j, m_j, kappa_j) of one Dirac partial wave."""

    j: float = 0.5
    m_j: float = 0.5
    kappa: int = 1

    def __post_init__(self):
        two_j = 2 * self.j
        if abs(two_j - round(two_j)) > 1e-12 or round(two_j) % 2 != 1 or self.j < 0.5:
            raise InvalidArgument(f"j must be a positive half-integer, got {self.j}")
        two_m = 2 * self.m_j
        if abs(two_m - round(two_m)) > 1e-12 or round(two_m) % 2 != 1:
            raise InvalidArgument(f"m_j must be a half-integer, got {self.m_j}")
        if abs(self.m_j) > self.j:
            raise InvalidArgument(f"|m_j| must not exceed j (m_j={self.m_j}, j={self.j})")
        if abs(self.kappa) != self.ell:
            raise InvalidArgument(f"kappa must be +-(j+1/2), got {self.kappa}")

    @property
    def ell(self) -> int:
        return int(round(self.j + 0.5))

    @property
    def gamma(self) -> int:
        return abs(self.kappa)

    @property
    def eta(self) -> float:
        # exp(2i eta) = -kappa/gamma
        return 0.5 * np.pi if self.kappa > 0 else 0.0

    @property
    def l_upper(self) -> int:
        """Orbital momentum of the upper spinor Phi^(1)."""
        return self.ell if self.kappa > 0 else self.ell - 1

    @property
    def l_lower(self) -> int:
        """Orbital momentum of the lower spinor Phi^(2)."""
        return int(round(2 * self.j)) - self.l_upper

    def flipped(self) -> "Channel":
        """Quantum numbers (j, -m_j, -kappa_j) used by the antiparticle wave."""
        return Channel(self.j, -self.m_j, -self.kappa)

    def label(self) -> str:
        return f"j={self.j:g},m={self.m_j:+g},k={self.kappa:+d}"


def default_channels(j: float = 0.5) -> list[Channel]:
    """All (m_j, kappa) combinations of a single j."""
    out = []
    for kappa in (int(j + 0.5), -int(j + 0.5)):
        m = -j
        while m <= j + 1e-12:
            out.append(Channel(j, m, kappa))
            m += 1.0
    return out


@lru_cache(maxsize=None)
def _gl(order: int):
    x, w = leggauss(order)
    return x, w


def _gl_panel(func, a, b, order=20):
    x, w = _gl(order)
    half = 0.5 * (b - a)
    u = a + half * (x + 1.0)
    return half * np.dot(w, func(u))


def confluent_L(gamma_j: float, z: complex, rtol: float = 1e-12, order: int = 20,
                max_depth: int = 60) -> complex:
    """Confluent hypergeometric 1F1(gamma+1; 2gamma+1; z) from its integral form.

    Parameters
    ----------
    gamma_j : float
        Parameter gamma >= 1.
    z : complex
        Argument; oscillation is resolved by starting with ~|z|/2 panels.

    Returns
    -------
    complex
        Gamma(2g+1)/(Gamma(g+1)Gamma(g)) * int_0^1 e^{zu} u^g (1-u)^(g-1) du.
    """
    z = complex(z)
    if not np.isfinite(z.real) or not np.isfinite(z.imag):
        raise InvalidArgument("z must be finite")
    if gamma_j < 1:
        raise InvalidArgument("gamma_j must be >= 1")
    g = float(gamma_j)

    def integrand(u):
        return np.exp(z * u) * u**g * (1.0 - u) ** (g - 1.0)

    n0 = max(1, int(np.ceil(abs(z) / 2.0)))
    edges = np.linspace(0.0, 1.0, n0 + 1)
    # scale for the absolute tolerance: integral of |integrand|
    scale = sum(abs(_gl_panel(lambda u: np.abs(integrand(u)), a, b, order))
                for a, b in zip(edges[:-1], edges[1:]))
    atol = rtol * max(scale, 1e-300) * 0.1
    total = 0.0 + 0.0j
    err = 0.0
    stack = [(a, b, 0) for a, b in zip(edges[:-1], edges[1:])]
    while stack:
        a, b, depth = stack.pop()
        m = 0.5 * (a + b)
        coarse = _gl_panel(integrand, a, b, order)
        fine = _gl_panel(integrand, a, m, order) + _gl_panel(integrand, m, b, order)
        delta = abs(fine - coarse)
        # stop refining once the panel is at round-off level
        floor = 64.0 * np.finfo(float).eps * _gl_panel(lambda u: np.abs(integrand(u)), a, b, order)
        if delta <= max(atol * (b - a), floor) or depth >= max_depth:
            if depth >= max_depth and delta > atol * (b - a):
                err += delta
            total += fine
        else:
            stack.append((a, m, depth + 1))
            stack.append((m, b, depth + 1))
    value = total / beta_fn(g + 1.0, g)
    if err > rtol * max(abs(value), 1e-300) * 1e3:
        raise NumericFailure("confluent_L quadrature did not converge", achieved=err)
    return complex(value)


def oscillatory_moment(gamma_j: float, a, order: int = 24, rtol: float = 1e-12,
                       chunk: int = 256) -> np.ndarray:
    """Return int_0^1 exp(i a (2u-1)) u^g (1-u)^(g-1) du for real array ``a``.

    Composite Gauss-Legendre with a panel count proportional to max|a|;
    the panel count is doubled until two successive results agree.
    """
    a = np.asarray(a, dtype=float)
    flat = a.ravel()
    out = np.empty(flat.shape, dtype=complex)
    g = float(gamma_j)
    x, w = _gl(order)
    for start in range(0, flat.size, chunk):
        part = flat[start:start + chunk]
        amax = float(np.max(np.abs(part))) if part.size else 0.0
        panels = 1 + int(amax / 3.0)
        prev = None
        for _ in range(12):
            edges = np.linspace(0.0, 1.0, panels + 1)
            half = 0.5 * np.diff(edges)
            u = (edges[:-1, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
            wu = (half[:, None] * w[None, :]).ravel() * u**g * (1.0 - u) ** (g - 1.0)
            val = np.exp(1j * np.outer(part, 2.0 * u - 1.0)) @ wu
            if prev is not None and np.max(np.abs(val - prev)) <= rtol * max(1.0, np.max(np.abs(val))):
                break
            prev = val
            panels *= 2
        else:
            raise NumericFailure("oscillatory moment did not converge",
                                 achieved=float(np.max(np.abs(val - prev))))
        out[start:start + chunk] = val
    return out.reshape(a.shape)


def _base_amplitudes(gamma_j: int, p, r):
    """(g, f) for kappa = +gamma on the positive-energy branch."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    pr = p * r
    mom = oscillatory_moment(gamma_j, pr)
    pref = -(2.0 * p / SQRT_PI) * (2.0 * pr) ** (gamma_j - 1) / gamma_fn(gamma_j)
    return pref * mom.imag, pref * mom.real


def radial_wave(channel: Channel, sign: int, p, r):
    """Radial amplitudes g_{kappa,sign}(p, r) and f_{kappa,sign}(p, r).

    ``p`` and ``r`` broadcast against each other.  r = 0 is evaluated by the
    limiting form of the integral representation (finite for gamma >= 1).
    """
    if sign not in (1, -1):
        raise InvalidArgument("sign must be +1 or -1")
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(p <= 0) or np.any(r < 0):
        raise InvalidArgument("radial_wave needs p > 0 and r >= 0")
    g0, f0 = _base_amplitudes(channel.gamma, p, r)
    if channel.kappa > 0:
        return (g0, f0) if sign > 0 else (g0, -f0)
    return (-f0, g0) if sign > 0 else (-f0, -g0)


def radial_bounds(gamma_j: int, p, r) -> dict:
    """Closed-form envelopes for g, f and their first two p-derivatives."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    x = 2.0 * p * r
    G = gamma_fn(gamma_j)
    c = 1.0 / SQRT_PI
    with np.errstate(divide="ignore", invalid="ignore"):
        xm2 = np.where(x > 0, x ** (gamma_j - 2.0), 0.0) if gamma_j < 2 else x ** (gamma_j - 2.0)
    return {
        "g": p * c * x**gamma_j / G,
        "f": 2.0 * p * c * x ** (gamma_j - 1) / G,
        "dg": (gamma_j + 1) * c * x**gamma_j / G,
        "df": 2.0 * gamma_j * c * x ** (gamma_j - 1) / G + 0.5 * c * x ** (gamma_j + 1) / G,
        "d2g": (6.0 * r * c * gamma_j * x ** (gamma_j - 1)
                + 2.0 * r * c * (gamma_j - 1) ** 2 * x**gamma_j
                + 0.5 * r * c * x ** (gamma_j + 1)) / G,
        "d2f": (3.0 * r * c * gamma_j * x**gamma_j
                + 4.0 * r * c * gamma_j * (gamma_j - 1) * xm2) / G,
    }


@dataclass(frozen=True)
class RadialCutoff:
    """Spatial cutoff f(|x|) with support radius ``radius``."""

    func: Callable
    radius: float

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r < self.radius, self.func(np.minimum(r, self.radius)), 0.0)

    def check_compact(self, samples: int = 64) -> None:
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise InvalidArgument("cutoff radius must be positive and finite")
        outside = np.linspace(self.radius, 4.0 * self.radius, samples)[1:]
        if np.any(np.asarray(self.func(outside)) != 0.0):
            raise InvalidArgument("f_cutoff is not compactly supported in [0, radius]")


def bump_cutoff(radius: float = 1.0) -> RadialCutoff:
    """Smooth bump exp(1 - 1/(1 - (r/R)^2)) on [0, R), zero beyond; f(0) = 1."""

    def f(r):
        t = np.asarray(r, dtype=float) / radius
        out = np.zeros_like(t)
        inside = t < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
        return out

    return RadialCutoff(f, radius)


def zero_cutoff(radius: float = 1.0) -> RadialCutoff:
    return RadialCutoff(lambda r: np.zeros_like(np.asarray(r, dtype=float)), radius)


def radial_quadrature(radius: float, panels: int, order: int = 20):
    """Composite Gauss-Legendre nodes and weights on [0, radius]."""
    x, w = _gl(order)
    edges = np.linspace(0.0, radius, panels + 1)
    half = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def envelope_A(p, channel: Channel, f_cutoff: RadialCutoff, panels: int = 16,
               order: int = 20):
    """Kernel envelopes A(p, l) and A~(p, l) entering the bound on |h|.

    A  = (2p)^l / Gamma(l) * (int |f| r^{2l} (1 + p^2 r^2)(1 + r^2 + r^4) dr)^{1/2}
    A~ = l(l-1)(2p)^{l-2} / Gamma(l) * (int |f| r^{2(l-1)} dr)^{1/2}
    """
    if not isinstance(f_cutoff, RadialCutoff):
        raise InvalidArgument("f_cutoff must be a RadialCutoff with a finite support radius")
    f_cutoff.check_compact()
    p = np.asarray(p, dtype=float)
    ell = channel.ell
    r, w = radial_quadrature(f_cutoff.radius, panels, order)
    fr = np.abs(f_cutoff(r))
    base = fr * r ** (2 * ell) * (1.0 + r**2 + r**4)
    i0 = np.dot(w, base)
    i2 = np.dot(w, base * r**2)
    integral = i0 + p**2 * i2
    A = (2.0 * p) ** ell / gamma_fn(ell) * np.sqrt(integral)
    it = np.dot(w, fr * r ** (2 * (ell - 1)))
    if ell == 1:
        At = np.zeros_like(A)
    else:
        At = ell * (ell - 1) * (2.0 * p) ** (ell - 2) / gamma_fn(ell) * np.sqrt(it)
    return A, At


def _ylm(l: int, m: int, theta, phi):
    if abs(m) > l:
        return np.zeros(np.broadcast(theta, phi).shape, dtype=complex)
    return sph_harm_y(l, m, theta, phi)


def spherical_spinor(j: float, l: int, m: float, theta, phi) -> np.ndarray:
    """Two-component spinor harmonic Omega_{j l m}(theta, phi), shape (2, ...)."""
    mu = int(round(m - 0.5))   # m - 1/2
    nu = int(round(m + 0.5))   # m + 1/2
    den = 2 * l + 1
    if abs(j - (l + 0.5)) < 1e-12:
        c_up = np.sqrt((l + m + 0.5) / den)
        c_dn = np.sqrt((l - m + 0.5) / den)
    elif abs(j - (l - 0.5)) < 1e-12:
        c_up = -np.sqrt((l - m + 0.5) / den)
        c_dn = np.sqrt((l + m + 0.5) / den)
    else:
        raise InvalidArgument(f"l={l} incompatible with j={j}")
    return np.stack([c_up * _ylm(l, mu, theta, phi), c_dn * _ylm(l, nu, theta, phi)])


def channel_spinors(channel: Channel, theta, phi):
    """(Phi^(1), Phi^(2)) for the channel: upper and lower spinor harmonics."""
    up = spherical_spinor(channel.j, channel.l_upper, channel.m_j, theta, phi)
    lo = spherical_spinor(channel.j, channel.l_lower, channel.m_j, theta, phi)
    return up, lo
