"""Filtered time evolution, weighted local decay and relaxation to the ground state."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CoverageError, InvalidArgument, ResolutionError
from .fock import NU, NUBAR, FockBasis, SparseHermitian, dgamma
from .hamiltonian import loglog_slope
from .kernels import smooth_step
from .mourre import (ConjugateOperator, SpectralWindow, apply_fermion, fermion_basis, fermion_function, lift,
                     radial_derivative)


# position weight ------------------------------------------------------------

def position_operator(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """q = |i D| on the radial grid (one-particle, dense)."""
    D = radial_derivative(p, w)
    return fermion_function(1j * D, np.abs)


@dataclass(eq=False)
class PositionWeight:
    q1: np.ndarray
    q2: np.ndarray
    Q_f: np.ndarray = field(repr=False)
    fermion_basis: FockBasis = field(repr=False)
    basis: FockBasis = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def Q(self) -> SparseHermitian:
        return SparseHermitian(lift(self.Q_f, self.basis))

    def bracket_f(self, s: float) -> np.ndarray:
        """<Q>^s on the fermion factor, cached per s."""
        if s not in self._cache:
            self._cache[s] = fermion_function(self.Q_f, lambda x: (1 + x**2) ** (s / 2))
        return self._cache[s]

    def apply(self, X: np.ndarray, s: float) -> np.ndarray:
        return apply_fermion(self.bracket_f(s), X, self.basis)


def build_Q(basis: FockBasis) -> PositionWeight:
    """Q = dGamma(q1) + dGamma(q2) with q_j = |i d/dp_j|."""
    grid = basis.grid
    if grid.n_nu < 2 or grid.n_nubar < 2:
        raise ResolutionError("position weight needs at least 2 radial nodes per fermion species")
    q1 = position_operator(grid.nu_p, grid.nu_w)
    q2 = position_operator(grid.nubar_p, grid.nubar_w)
    fb = fermion_basis(basis)
    Q_f = (dgamma(fb, NU, q1).matrix + dgamma(fb, NUBAR, q2).matrix).toarray()
    return PositionWeight(q1, q2, 0.5 * (Q_f + Q_f.conj().T), fb, basis)


# energy filter and evolution ------------------------------------------------

@dataclass(frozen=True)
class EnergyFilter:
    """Smooth chi: 1 below ``plateau``, 0 above ``stop`` (absolute energies)."""

    plateau: float
    stop: float

    def __call__(self, x):
        return smooth_step(x, self.plateau, self.stop)


def default_filter(E: float, rho: float, sigma0: float, m_z: float) -> EnergyFilter:
    """1 on [E, E + rho sigma_0 / 6], zero above E + m_Z / 4."""
    return EnergyFilter(E + rho * sigma0 / 6, E + m_z / 4)


def _check_coverage(spectrum, chi: EnergyFilter):
    if spectrum.e_max < chi.stop:
        raise CoverageError(f"eigenbasis computed up to {spectrum.e_max:.4g}, filter support reaches {chi.stop:.4g}")


def evolve_filtered(spectrum, chi: EnergyFilter, psi0: np.ndarray, times) -> np.ndarray:
    """e^{-itH} chi(H) psi0 for each t, as rows of an array."""
    _check_coverage(spectrum, chi)
    V, w = spectrum.vectors, spectrum.values
    c = chi(w) * (V.conj().T @ psi0)
    times = np.asarray(times, dtype=float)
    phases = np.exp(-1j * np.outer(times, w))
    return (phases * c) @ V.T


def heisenberg_time(values: np.ndarray) -> float:
    """2 pi / mean level spacing of the given eigenvalues."""
    v = np.sort(values)
    if len(v) < 2 or v[-1] == v[0]:
        return np.inf
    return 2 * np.pi * (len(v) - 1) / (v[-1] - v[0])


def _compressed(X: np.ndarray) -> np.ndarray:
    """R with X = Q R (so ||X D X^*|| = ||R D R^*||)."""
    if X.shape[1] == 0:
        return np.zeros((0, 0))
    return np.linalg.qr(X, mode="r")


def operator_trace(X: np.ndarray, values: np.ndarray, amp: np.ndarray, times) -> np.ndarray:
    """||X diag(amp e^{-itE}) X^*|| for each t."""
    R = _compressed(X)
    out = np.empty(len(times))
    for i, t in enumerate(times):
        d = amp * np.exp(-1j * t * values)
        out[i] = np.linalg.norm((R * d) @ R.conj().T, 2) if R.size else 0.0
    return out


@dataclass
class DecayTrace:
    times: np.ndarray
    r: np.ndarray
    T_H: float
    exponent: float
    target: float
    fit_window: tuple
    usable: int
    status: str
    components: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        keys = list(self.components)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            fh.write("# units: t in GeV^-1, energies in GeV\n")
            w.writerow(["t", "r"] + keys)
            for i, t in enumerate(self.times):
                w.writerow([repr(float(t)), repr(float(self.r[i]))] + [repr(float(self.components[k][i])) for k in keys])


def fit_exponent(times, r, t1: float, t2: float, min_points: int = 10):
    """Log-log slope of r on [t1, t2]; (slope, usable count)."""
    times, r = np.asarray(times), np.asarray(r)
    sel = (times >= t1) & (times <= t2) & (r > 0)
    n = int(sel.sum())
    if n < min_points:
        return float("nan"), n
    return loglog_slope(times[sel], r[sel]), n


def default_times(T_H: float, t_min: float = 1e-3, count: int = 240) -> np.ndarray:
    return np.geomspace(t_min, max(T_H, 10 * t_min), count)


def local_decay_trace(spectrum, weight: PositionWeight, s: float, mu: float, chi: EnergyFilter,
                      times=None, t1: Optional[float] = None, m_z: Optional[float] = None) -> DecayTrace:
    """r(t) = ||<Q>^{-s} e^{-itH} chi(H) <Q>^{-s} - e^{-itE} chi(E) <Q>^{-s} P_gs <Q>^{-s}||.

    Evaluated exactly in the low-energy eigenbasis (the ground state is
    removed from the sum); the power law is fitted on [t1, T_H / 2].
    """
    if not (0 < s <= 1 and 0 < mu < s):
        raise InvalidArgument("need 0 < s <= 1 and 0 < mu < s")
    _check_coverage(spectrum, chi)
    if m_z is not None and chi.stop > spectrum.E + m_z / 3:
        raise InvalidArgument("filter support must lie below E + m_Z/3")
    w = spectrum.values
    amp = chi(w)
    sel = amp > 0
    sel[0] = False
    T_H = heisenberg_time(w[amp > 0])
    times = default_times(T_H) if times is None else np.asarray(times, dtype=float)
    X = weight.apply(spectrum.vectors[:, sel], -s)
    r = operator_trace(X, w[sel], amp[sel], times)
    t1 = (4.0 / (chi.stop - spectrum.E)) if t1 is None else t1
    expo, n = fit_exponent(times, r, t1, T_H / 2)
    status = "ok" if n >= 10 else "insufficient-resolution"
    return DecayTrace(times, r, T_H, expo, -(s - mu), (t1, T_H / 2), n, status)


def relaxation_trace(spectrum, weight: PositionWeight, s: float, chi: EnergyFilter, psi0: np.ndarray,
                     times) -> dict:
    """|<phi_t, O phi_t> - |<phi_gs, phi>|^2 <phi_gs, O phi_gs>| with phi = chi(H) psi0, O = <Q>^{-2s}."""
    states = evolve_filtered(spectrum, chi, psi0, times)
    gs = spectrum.ground
    phi0 = states[0] if times[0] == 0 else evolve_filtered(spectrum, chi, psi0, [0.0])[0]
    O_gs = np.linalg.norm(weight.apply(gs, -s)) ** 2
    limit = abs(np.vdot(gs, phi0)) ** 2 * O_gs
    vals = np.array([np.linalg.norm(weight.apply(st, -s)) ** 2 for st in states])
    return {"times": np.asarray(times), "value": vals, "limit": float(limit), "deviation": np.abs(vals - limit)}


def state_trace(weight: PositionWeight, s: float, spectrum, psi0: np.ndarray, times) -> np.ndarray:
    """||<Q>^{-s} e^{-itH} psi0|| with psi0 expanded in the eigenbasis (no filter)."""
    V, w = spectrum.vectors, spectrum.values
    c = V.conj().T @ psi0
    X = weight.apply(V * c, -s)
    R = _compressed(X)
    return np.array([np.linalg.norm(R @ np.exp(-1j * t * w)) for t in times])


def onset_time(times, r, late_fraction: float = 0.5) -> float:
    """First time at which r has dropped halfway from r(0) to its late-time mean."""
    times, r = np.asarray(times), np.asarray(r)
    late = r[int(len(r) * (1 - late_fraction)):].mean()
    level = late + 0.5 * (r[0] - late)
    below = np.nonzero(r <= level)[0]
    return float(times[below[0]]) if len(below) else float("inf")


def window_state(spectrum, window: SpectralWindow, weight: PositionWeight, s: float, seed: int = 0) -> np.ndarray:
    """Normalized phi_{sigma_n}(H - E) <Q>^{-s} v for a seeded random v."""
    rng = np.random.default_rng(seed)
    dim = spectrum.vectors.shape[0]
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    v = weight.apply(v, -s)
    f = window.phi(spectrum.values - window.E)
    psi = spectrum.vectors @ (f * (spectrum.vectors.conj().T @ v))
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise InvalidArgument(f"window {window.n} contains no eigenvalues")
    return psi / nrm


def a_weighted_trace(spectrum, window: SpectralWindow, conj: ConjugateOperator, s: float, times) -> np.ndarray:
    """||<A_n>^{-s} e^{-itH} phi_{sigma_n}(H - E) <A_n>^{-s}|| for each t."""
    f = window.phi(spectrum.values - window.E)
    sel = f > 0
    X = conj.apply(spectrum.vectors[:, sel], -s)
    return operator_trace(X, spectrum.values[sel], f[sel], times)


def onset_comparison(spectrum, windows: list, conjs: list, weight: PositionWeight, s: float,
                     times, seed: int = 0) -> dict:
    """Onset times of Q-weighted state traces and A-weighted operator traces per window."""
    out = {"levels": [w.n for w in windows], "sigma": [w.sigma for w in windows], "q_onset": [], "a_onset": []}
    for win, conj in zip(windows, conjs):
        psi = window_state(spectrum, win, weight, s, seed)
        out["q_onset"].append(onset_time(times, state_trace(weight, s, spectrum, psi, times)))
        out["a_onset"].append(onset_time(times, a_weighted_trace(spectrum, win, conj, s, times)))
    q, a = np.array(out["q_onset"]), np.array(out["a_onset"])
    out["q_spread"] = float(q.max() / q.min()) if np.all(np.isfinite(q)) and q.min() > 0 else float("inf")
    sig = np.array(out["sigma"])
    with np.errstate(divide="ignore", invalid="ignore"):
        out["a_ratio_per_sigma_ratio"] = (a[1:] / a[:-1] / (sig[:-1] / sig[1:])).tolist()
    return out
