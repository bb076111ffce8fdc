import cmath
import math

import mpmath
import numpy as np
import pytest

from arraylight import (
    ArrayConfig,
    Drive,
    Polarization,
    bessel_j0,
    bessel_j2,
    build_cache,
    calc_G,
    calc_Gbar,
    calc_qm,
    gamma_reference,
    gbar_asymptotic,
    green_fn,
    load_or_build_cache,
    spherical_hankel,
)
from arraylight.core import GAMMA, WAVENUMBER
from arraylight.lattice import SumCache, q2_weights, window_mask

CIRC = ArrayConfig(0.8, polarization=Polarization.DELTA_M_PM1)
LIN = ArrayConfig(0.8, polarization=Polarization.DELTA_M0)


# ------------------------------------------------------------------ spherical Hankel


def test_h0_at_pi():
    # e^{i pi} = -1 and 1/i = -i, so h0(pi) = i/pi
    assert spherical_hankel(0, math.pi) == pytest.approx(1j / math.pi, abs=1e-15)


def test_h2_at_one_closed_form():
    # independent evaluation of (-3i - 3 + i) e^{i} in exact complex arithmetic
    expected = (-3.0 - 2.0j) * cmath.exp(1j)
    assert spherical_hankel(2, 1.0) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("ell", [0, 2])
@pytest.mark.parametrize("s", [0.3, 1.0, 2.7, 17.9, 151.0])
def test_hankel_against_mpmath(ell, s):
    # h_l^(1)(s) = sqrt(pi/2s) (J_{l+1/2}(s) + i Y_{l+1/2}(s))
    ref = mpmath.sqrt(mpmath.pi / (2 * s)) * (
        mpmath.besselj(ell + 0.5, s) + 1j * mpmath.bessely(ell + 0.5, s)
    )
    assert spherical_hankel(ell, s) == pytest.approx(complex(ref), rel=1e-12)


def test_hankel_outgoing_asymptote():
    s = 1e6
    assert s * cmath.exp(-1j * s) * spherical_hankel(2, s) == pytest.approx(1j, abs=1e-5)


def test_hankel_rejects_nonpositive_argument():
    with pytest.raises(ValueError):
        spherical_hankel(0, 0.0)
    with pytest.raises(ValueError):
        spherical_hankel(2, -1.0)


# ------------------------------------------------------------------ Bessel J0 / J2


def test_bessel_accuracy_against_mpmath():
    xs = np.arange(0.0, 160.0, 0.37)
    j0 = bessel_j0(xs)
    j2 = bessel_j2(xs)
    ref0 = np.array([float(mpmath.besselj(0, x)) for x in xs])
    ref2 = np.array([float(mpmath.besselj(2, x)) for x in xs])
    assert np.max(np.abs(j0 - ref0)) <= 1e-10
    assert np.max(np.abs(j2 - ref2)) <= 1e-10


def test_bessel_series_asymptotic_crossover():
    # the two branches must agree through the switch point
    from arraylight.lattice import _A_J0, _A_J2, _bessel_asymptotic, _bessel_series

    xs = np.linspace(11.75, 13.0, 26)
    assert np.max(np.abs(_bessel_series(0, xs) - _bessel_asymptotic(0, xs, _A_J0))) < 1e-11
    assert np.max(np.abs(_bessel_series(2, xs) - _bessel_asymptotic(2, xs, _A_J2))) < 1e-11


def test_bessel_small_argument_values():
    assert bessel_j0(0.0) == pytest.approx(1.0, abs=1e-15)
    assert bessel_j2(0.0) == pytest.approx(0.0, abs=1e-15)


# ------------------------------------------------------------------ dipole propagator


def _green_dyadic_reference(displacement, d_hat):
    """Separately coded propagator: (G/2)[h0 + (3 |R.d|^2.. - 1)/2 h2] via vectors."""
    r = np.asarray(displacement, float)
    dist = math.sqrt(float(np.dot(r, r)))
    rhat = r / dist
    d = np.asarray(d_hat, complex)
    proj = np.dot(rhat, np.conj(d)) * np.dot(rhat, d)
    coeff = 0.5 * (3.0 * proj - 1.0)
    s = WAVENUMBER * dist
    h0 = cmath.exp(1j * s) / (1j * s)
    h2 = (-3j / s**3 - 3.0 / s**2 + 1j / s) * cmath.exp(1j * s)
    return 0.5 * GAMMA * (h0 + coeff * h2)


def test_green_fn_on_dipole_axis():
    # displacement along z with the in-plane dipole channel: coefficient P2(1) = 1
    got = green_fn((0.0, 0.0, 0.8), LIN)
    ref = _green_dyadic_reference((0.0, 0.0, 0.8), (0.0, 0.0, 1.0))
    assert got == pytest.approx(ref, rel=1e-14)
    s = 1.6 * math.pi
    direct = 0.5 * (spherical_hankel(0, s) + spherical_hankel(2, s))
    assert got == pytest.approx(direct, rel=1e-14)


def test_green_fn_angular_node():
    # displacement along (1,1,1): cos^2 = 1/3 kills the h2 coefficient
    r = 0.37 * np.array([1.0, 1.0, 1.0])
    got = green_fn(r, LIN)
    s = WAVENUMBER * 0.37 * math.sqrt(3.0)
    assert got == pytest.approx(0.5 * GAMMA * spherical_hankel(0, s), rel=1e-13)


def test_green_fn_circular_in_plane_coefficient():
    # in-plane separation, circular channel: coefficient is exactly 1/4
    got = green_fn((0.0, 0.8, 0.0), CIRC)
    s = 1.6 * math.pi
    assert got == pytest.approx(
        0.5 * GAMMA * (spherical_hankel(0, s) + 0.25 * spherical_hankel(2, s)), rel=1e-14
    )
    ref = _green_dyadic_reference((0.0, 0.8, 0.0), np.array([0.0, 1.0, 1j]) / math.sqrt(2))
    got_scaled = green_fn((0.0, 0.8, 0.0), CIRC)
    # circular channel uses -P2/2, equal to the dyadic form with d = (y + i z)/sqrt(2)
    assert got_scaled == pytest.approx(ref, rel=1e-13)


def test_green_fn_rejects_zero_displacement():
    with pytest.raises(ValueError):
        green_fn((0.0, 0.0, 0.0), CIRC)


def test_green_fn_vectorized():
    pts = np.array([[0.0, 0.8, 0.0], [0.0, 0.0, 0.8], [0.0, 1.6, 0.8]])
    vals = green_fn(pts, CIRC)
    assert vals.shape == (3,)
    assert vals[0] == pytest.approx(green_fn(pts[0], CIRC))


# ------------------------------------------------------------------ collective sums


def test_collective_sum_matches_paper_convergence_point():
    err = abs(calc_G(CIRC, 125).real - gamma_reference(CIRC)) / abs(gamma_reference(CIRC))
    # published value 1.1e-9 at this cutoff; require agreement within a factor 3
    assert 1.1e-9 / 3 <= err <= 1.1e-9 * 3


def test_collective_sum_real_part_value():
    # (G/2)[(3/4pi)(lambda/a)^2 - 1] = -0.3134903... for a = 0.8 lambda
    g = calc_G(CIRC, 250)
    assert g.real == pytest.approx(-0.3134903, abs=1e-6)


@pytest.mark.parametrize("a,n_cut", [(0.4, 2900), (0.6, 1600), (0.8, 1000)])
def test_gamma_identity_high_cutoff(a, n_cut):
    # convergence is governed by k*a*N, so smaller spacings need larger cutoffs
    cfg = ArrayConfig(a)
    ref = gamma_reference(cfg)
    g = calc_G(cfg, n_cut)
    assert abs(g.real - ref) / abs(ref) <= 1e-12


def test_collective_sum_polarization_independent():
    # the square lattice averages the anisotropy away: same sum in both channels
    assert calc_G(CIRC, 150) == pytest.approx(calc_G(LIN, 150), rel=1e-14)


def test_smooth_cutoff_beats_hard_cutoff():
    ref = gamma_reference(CIRC)
    smooth = abs(calc_G(CIRC, 125).real - ref) / abs(ref)
    hard = abs(calc_G(CIRC, 125, smooth=False).real - ref) / abs(ref)
    assert smooth < hard


def test_collective_sum_requires_reasonable_cutoff():
    with pytest.raises(ValueError):
        calc_G(CIRC, 20)


# ------------------------------------------------------------------ two-array coupling


TWO = ArrayConfig(0.8, num_arrays=2, L_over_lambda=5.01)


def test_inter_array_sum_reaches_asymptote():
    # near-field remainder is ~6e-11 of the total at L = 5.01 lambda
    got = calc_Gbar(TWO, 1000)
    ref = gbar_asymptotic(TWO)
    assert abs(got - ref) / abs(ref) <= 1e-9
    assert ref.real == pytest.approx(0.186510, abs=1e-6)


def test_inter_array_sum_insensitive_to_separation():
    far = ArrayConfig(0.8, num_arrays=2, L_over_lambda=10.02)
    g1 = calc_Gbar(TWO, 1200)
    g2 = calc_Gbar(far, 1200)
    assert abs(g2 - g1) / abs(g1) <= 1e-9


def test_inter_array_asymptote_other_spacing():
    cfg = ArrayConfig(0.6, num_arrays=2, L_over_lambda=5.01)
    got = calc_Gbar(cfg, 1400)
    ref = gbar_asymptotic(cfg)
    assert abs(got - ref) / abs(ref) <= 1e-9
    assert ref.real == pytest.approx(3.0 / (8.0 * math.pi * 0.36), rel=1e-12)


def test_inter_array_sum_refuses_small_cutoff():
    with pytest.raises(ValueError, match="n_cut"):
        calc_Gbar(TWO, 100)


# ------------------------------------------------------------------ scattering kernel


def test_q_kernel_origin_closed_form():
    # integral = 4/3 exactly, so q(0,0) matches the one-atom flux prefactor
    got = calc_qm((0, 0), CIRC)
    ref = 3.0 * math.pi * (GAMMA / CIRC.ka) ** 2
    assert abs(got - ref) / ref <= 1e-10


def test_q_kernel_circular_depends_on_radius_only():
    assert calc_qm((3, 4), CIRC) == pytest.approx(calc_qm((5, 0), CIRC), rel=1e-12)


def test_q_kernel_linear_swap_antisymmetry():
    # cos(2 phi) flips sign under m_y <-> m_z, so the J2 parts cancel in the sum
    q_sum = calc_qm((1, 0), LIN) + calc_qm((0, 1), LIN)
    assert q_sum == pytest.approx(2.0 * calc_qm((1, 0), CIRC), rel=1e-10)


# ------------------------------------------------------------------ cache tables


@pytest.fixture(scope="module")
def small_cache():
    return build_cache(CIRC, n_sum=150, n_window=6)


def test_cache_g_table_point_group(small_cache):
    t = small_cache.g_table
    assert np.array_equal(t, t[::-1, ::-1])
    assert np.array_equal(t, t[::-1, :])
    assert np.array_equal(t, t[:, ::-1])
    # circular channel: value depends on m^2 only
    assert small_cache.g_at(3, 4) == pytest.approx(small_cache.g_at(5, 0), rel=1e-14)
    assert small_cache.g_at(0, 0) == 0.0


def test_cache_q_table_symmetries(small_cache):
    q = small_cache.q_table
    assert np.array_equal(q, q[::-1, ::-1])
    assert np.isrealobj(q)
    assert small_cache.q_at(3, 4) == small_cache.q_at(4, 3)
    mask = window_mask(6)
    assert np.all(q[~mask] == 0.0)
    assert np.all(q[mask] != 0.0)


def test_cache_window_geometry(small_cache):
    assert small_cache.table_radius == 16
    assert small_cache.g_window.shape == (13, 13)
    n = small_cache.n_window
    r = small_cache.table_radius
    assert small_cache.g_window[n, n] == small_cache.g_table[r, r]
    w = q2_weights(6)
    assert w[6 + 1, 6] == pytest.approx(math.exp(-36.0 / 6**4))
    assert w[6, 6] == 0.0


def test_cache_round_trip(tmp_path, small_cache):
    path = str(tmp_path / "cache.npz")
    small_cache.save(path)
    loaded = SumCache.load(path)
    assert loaded.g_big == small_cache.g_big
    assert loaded.config == small_cache.config
    assert np.array_equal(loaded.g_table, small_cache.g_table)
    assert np.array_equal(loaded.q_table, small_cache.q_table)
    assert np.array_equal(loaded.w_table, small_cache.w_table)


def test_load_or_build_cache_hits(tmp_path):
    msgs = []
    kwargs = dict(n_sum=150, cache_dir=str(tmp_path), log=msgs.append)
    first = load_or_build_cache(CIRC, **kwargs)
    second = load_or_build_cache(CIRC, **kwargs)
    assert first.g_big == second.g_big
    assert any("miss" in m for m in msgs) and any("hit" in m for m in msgs)


def test_two_array_cache_uses_asymptotic_coupling():
    cache = build_cache(TWO, n_sum=150)
    assert cache.g_bar == gbar_asymptotic(TWO)
    cache_sum = build_cache(TWO, n_sum=150, gbar_mode="sum")
    assert abs(cache_sum.g_bar - cache.g_bar) / abs(cache.g_bar) < 1e-8
