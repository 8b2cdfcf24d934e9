import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import beta, gamma as gamma_fn

from zdecay.errors import InvalidArgument
from zdecay.partialwave import (Channel, bump_cutoff, channel_spinors, confluent_L, default_channels, envelope_A,
                                oscillatory_moment, radial_bounds, radial_wave, zero_cutoff)


def hyp1f1(g, z):
    return complex(mpmath.hyp1f1(g + 1, 2 * g + 1, z))


def series(g, z, terms=80):
    """Truncated Kummer series sum (a)_n z^n / ((b)_n n!)."""
    a, b = g + 1, 2 * g + 1
    total, term = 0j, 1 + 0j
    for n in range(terms):
        total += term
        term *= (a + n) / (b + n) * z / (n + 1)
    return total


def test_L_at_zero_is_one():
    for g in (1, 2, 3, 2.5):
        assert abs(confluent_L(g, 0) - 1) < 1e-14


def test_L_matches_series_small_argument():
    assert abs(confluent_L(1, 2j * 0.5) - series(1, 2j * 0.5)) < 1e-12


def test_L_conjugation_symmetry():
    assert abs(confluent_L(2, 2j) - np.conj(confluent_L(2, -2j))) < 1e-13


@settings(max_examples=40, deadline=None)
@given(g=st.sampled_from([1, 2, 3]), re=st.floats(-20, 20), im=st.floats(-100, 100))
def test_L_against_mpmath(g, re, im):
    z = complex(re, im)
    if abs(z) > 100:
        z *= 100 / abs(z)
    ref = hyp1f1(g, z)
    assert abs(confluent_L(g, z) - ref) <= 1e-10 * max(abs(ref), 1e-300) + 1e-14


@pytest.mark.parametrize("bad", [complex(np.nan, 0), complex(0, np.inf)])
def test_L_rejects_nonfinite(bad):
    with pytest.raises(InvalidArgument):
        confluent_L(1, bad)


def test_L_rejects_small_gamma():
    with pytest.raises(InvalidArgument):
        confluent_L(0.5, 1j)


def test_moment_closed_form_at_zero():
    # int_0^1 u^g (1-u)^(g-1) du = B(g+1, g)
    for g in (1, 2, 3):
        assert abs(oscillatory_moment(g, np.array([0.0]))[0] - beta(g + 1, g)) < 1e-14


def test_moment_against_adaptive_quadrature():
    for g in (1, 2):
        for a in (0.3, 7.0, 40.0):
            re = integrate.quad(lambda u: np.cos(a * (2 * u - 1)) * u**g * (1 - u) ** (g - 1), 0, 1,
                                limit=400, epsabs=1e-14, epsrel=1e-13)[0]
            im = integrate.quad(lambda u: np.sin(a * (2 * u - 1)) * u**g * (1 - u) ** (g - 1), 0, 1,
                                limit=400, epsabs=1e-14, epsrel=1e-13)[0]
            got = oscillatory_moment(g, np.array([a]))[0]
            assert abs(got - complex(re, im)) < 1e-11


def test_small_r_limit():
    # f -> -(2p/sqrt(pi)) B(2, 1) for gamma = 1 as r -> 0; g -> 0
    p = 3.7
    g, f = radial_wave(Channel(), 1, p, 0.0)
    assert abs(g) < 1e-14
    assert abs(f + 2 * p / np.sqrt(np.pi) * 0.5) < 1e-13


def test_branch_symmetry():
    p = np.geomspace(0.1, 50, 7)[:, None]
    r = np.linspace(0.0, 2.0, 9)[None, :]
    plus = Channel(0.5, 0.5, 1)
    minus = Channel(0.5, 0.5, -1)
    g_p, f_p = radial_wave(plus, 1, p, r)
    g_m, f_m = radial_wave(minus, 1, p, r)
    assert np.max(np.abs(f_p + g_m)) < 1e-12
    assert np.max(np.abs(g_p - f_m)) < 1e-12
    # negative-energy branch flips f
    g_n, f_n = radial_wave(plus, -1, p, r)
    assert np.array_equal(g_n, g_p) and np.array_equal(f_n, -f_p)


@pytest.mark.parametrize("gam", [1, 2])
def test_amplitude_bounds(gam):
    ch = Channel(gam - 0.5, 0.5, gam)
    p = np.geomspace(0.05, 40, 15)[:, None]
    r = np.geomspace(1e-3, 3.0, 15)[None, :]
    pr = np.array([[0.3 / 2.0]])  # p r = 0.3 with r = 2
    for P, R in ((p, r), (pr * 0 + 0.15, np.array([[2.0]]))):
        g, f = radial_wave(ch, 1, P, R)
        b = radial_bounds(gam, P, R)
        assert np.all(np.abs(g) <= b["g"] * (1 + 1e-12))
        assert np.all(np.abs(f) <= b["f"] * (1 + 1e-12))


@pytest.mark.parametrize("gam", [1, 2])
def test_derivative_bounds(gam):
    ch = Channel(gam - 0.5, 0.5, gam)
    p = np.geomspace(0.2, 20, 9)[:, None]
    r = np.geomspace(0.05, 2.0, 9)[None, :]
    h = 1e-3 * p
    wave = lambda q: radial_wave(ch, 1, q, r)
    gm, fm = wave(p - h)
    g0, f0 = wave(p)
    gp, fp = wave(p + h)
    d1g, d1f = (gp - gm) / (2 * h), (fp - fm) / (2 * h)
    d2g, d2f = (gp - 2 * g0 + gm) / h**2, (fp - 2 * f0 + fm) / h**2
    b = radial_bounds(gam, p, r)
    for val, key in ((d1g, "dg"), (d1f, "df"), (d2g, "d2g"), (d2f, "d2f")):
        assert np.all(np.abs(val) <= 1.05 * b[key] + 1e-8), key


def test_envelope_zero_cutoff():
    A, At = envelope_A(np.geomspace(0.1, 10, 5), Channel(), zero_cutoff(1.0))
    assert np.all(A == 0) and np.all(At == 0)


def test_envelope_against_adaptive_quadrature():
    f = bump_cutoff(1.0)
    ch = Channel(1.5, 0.5, 2)
    ell = ch.ell
    for p in (0.2, 3.0):
        integrand = lambda r: abs(float(f(r))) * r ** (2 * ell) * (1 + p**2 * r**2) * (1 + r**2 + r**4)
        ref = (2 * p) ** ell / gamma_fn(ell) * np.sqrt(integrate.quad(integrand, 0, 1, epsabs=1e-14)[0])
        A, At = envelope_A(p, ch, f)
        assert abs(A - ref) <= 1e-10 * ref
        it = integrate.quad(lambda r: abs(float(f(r))) * r ** (2 * (ell - 1)), 0, 1, epsabs=1e-14)[0]
        assert abs(At - ell * (ell - 1) * (2 * p) ** (ell - 2) / gamma_fn(ell) * np.sqrt(it)) <= 1e-10 * At


@pytest.mark.parametrize("ch", [Channel(), Channel(1.5, 0.5, 2)])
def test_envelope_small_p_slope(ch):
    p = np.array([1e-4, 1e-3])
    A, _ = envelope_A(p, ch, bump_cutoff(1.0))
    slope = np.log(A[1] / A[0]) / np.log(p[1] / p[0])
    assert abs(slope - ch.ell) < 1e-3


def test_envelope_rejects_noncompact():
    with pytest.raises(InvalidArgument):
        envelope_A(1.0, Channel(), lambda r: np.exp(-r))


@pytest.mark.parametrize("j,m,kappa", [(1.0, 0.5, 1), (0.5, 1.5, 1), (0.5, 0.5, 2), (1.5, 0.0, 2)])
def test_invalid_channels(j, m, kappa):
    with pytest.raises(InvalidArgument):
        Channel(j, m, kappa)


def test_default_channels_cover_mj_and_kappa():
    chans = default_channels(1.5)
    assert len(chans) == 8
    assert {c.kappa for c in chans} == {2, -2}


@pytest.mark.parametrize("ch", default_channels(0.5) + default_channels(1.5))
def test_spinors_orthonormal(ch):
    # integrate |Omega|^2 over the sphere with a product rule
    x, wx = np.polynomial.legendre.leggauss(24)
    phi = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    th = np.arccos(x)[:, None]
    ph = phi[None, :]
    up, lo = channel_spinors(ch, th, ph)
    w = wx[:, None] * (2 * np.pi / 48)
    assert abs(np.sum(w * np.sum(np.abs(up) ** 2, axis=0)) - 1) < 1e-12
    assert abs(np.sum(w * np.sum(np.abs(lo) ** 2, axis=0)) - 1) < 1e-12
    assert abs(np.sum(w * np.sum(np.conj(up) * lo, axis=0))) < 1e-12
