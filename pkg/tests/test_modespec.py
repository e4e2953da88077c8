import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ioncrystal import ConfigError, InstabilityError, NumericError, TweezerLayout
from ioncrystal.crystal import energy_hessian
from ioncrystal.modespec import (cell_frequencies, coupling_from_positions, coupling_matrix,
                                 lowest_frequency, periodic_sites, pinned_spectrum,
                                 principal_submatrix, spectrum, tweezer_scan)

from conftest import harmonic_three_ion_positions


def test_three_ion_axial_ratios():
    u = harmonic_three_ion_positions(1.0)
    modes = spectrum(coupling_from_positions(u, "z", np.ones(3)))
    np.testing.assert_allclose(modes.omega_k / modes.omega_k[0],
                               [1, np.sqrt(3), np.sqrt(29 / 5)], atol=1e-6)
    assert modes.omega_k[0] == pytest.approx(1.0, abs=1e-12)


def test_three_ion_transverse_modes():
    u = harmonic_three_ion_positions(1.0)
    nu_t = 10.0
    modes = spectrum(coupling_from_positions(u, "x", np.full(3, nu_t**2)))
    # centre-of-mass at the trap frequency; tilt and zigzag below it
    np.testing.assert_allclose(modes.omega_k[-1], nu_t, atol=1e-10)
    np.testing.assert_allclose(modes.omega_k**2, nu_t**2 - np.array([12 / 5, 1, 0]), atol=1e-9)


def test_longitudinal_matrix_is_energy_hessian(small_crystal):
    A = coupling_matrix(small_crystal, "z").A
    np.testing.assert_allclose(A, energy_hessian(small_crystal.u, small_crystal.config),
                               rtol=1e-13)


@pytest.mark.parametrize("axis", ["x", "y", "z"])
def test_modes_orthonormal_and_reconstruct(small_crystal, axis):
    A = coupling_matrix(small_crystal, axis).A
    m = spectrum(A)
    assert np.abs(m.G.T @ m.G - np.eye(m.N)).max() <= 1e-10
    np.testing.assert_allclose((m.G * m.omega_k**2) @ m.G.T, A, atol=1e-9 * np.abs(A).max())
    assert np.all(np.diff(m.omega_k) >= 0)


def test_transverse_sum_rule(small_crystal, config, units):
    # the x-row sums of A equal the bare trap frequency squared
    A = coupling_matrix(small_crystal, "x").A
    np.testing.assert_allclose(A.sum(axis=1), (config.omega_rf_x / units.omega0) ** 2)


@settings(max_examples=20, deadline=None)
@given(sites=st.lists(st.integers(0, 29), min_size=1, max_size=6, unique=True),
       nu=st.floats(0.1, 20.0), axis=st.sampled_from(["y", "z"]))
def test_tweezers_never_lower_eigenvalues(small_crystal, sites, nu, axis):
    base = spectrum(coupling_matrix(small_crystal, axis, TweezerLayout.none())).omega_k
    more = spectrum(coupling_matrix(small_crystal, axis, TweezerLayout.at(sites, nu))).omega_k
    assert np.all(more >= base - 1e-10)


def test_x_incident_tweezers_leave_x_modes(small_crystal):
    lay = TweezerLayout.at([3, 13, 23], 7.0)
    a = coupling_matrix(small_crystal, "x", TweezerLayout.none()).A
    b = coupling_matrix(small_crystal, "x", lay).A
    np.testing.assert_array_equal(a, b)


def test_strong_tweezers_approach_pinned_limit(small_crystal):
    sites = [4, 14, 24]
    pinned = pinned_spectrum(small_crystal, "z", sites).omega_k
    strong = spectrum(coupling_matrix(small_crystal, "z", TweezerLayout.at(sites, 1e4)))
    # the free modes converge to the pinned spectrum, the pinned ones run off
    np.testing.assert_allclose(strong.omega_k[:len(pinned)], pinned, rtol=1e-6)


def test_principal_submatrix_and_errors():
    A = np.arange(16.0).reshape(4, 4)
    sub, keep = principal_submatrix(A, [1, 1, 3])
    np.testing.assert_array_equal(keep, [0, 2])
    np.testing.assert_array_equal(sub, [[0, 2], [8, 10]])
    with pytest.raises(NumericError):
        principal_submatrix(A, range(4))
    with pytest.raises(ConfigError):
        principal_submatrix(A, [7])


def test_unstable_and_degenerate_inputs():
    with pytest.raises(InstabilityError):
        spectrum(np.diag([1.0, -1.0]))
    clamped = spectrum(np.diag([-1e-12, 4.0]))
    assert clamped.omega_k[0] == 0.0
    with pytest.raises(NumericError):
        coupling_from_positions([0.0, 1.0, 1.0], "z", np.ones(3))
    with pytest.raises(ConfigError):
        coupling_from_positions([0.0, 1.0], "w", np.ones(2))


def test_transverse_instability_when_trap_too_weak():
    u = np.arange(10.0)
    with pytest.raises(InstabilityError):
        spectrum(coupling_from_positions(u, "x", np.full(10, 0.5)))


def test_periodic_sites_anchor():
    s = periodic_sites(100, 10, anchor=47)
    assert 47 in s and np.all(np.diff(s) == 10) and s[0] == 7
    with pytest.raises(ConfigError):
        periodic_sites(100, 1)


def test_cell_zeta_sums_match_truncated():
    exact = cell_frequencies(9, "z")
    trunc = cell_frequencies(9, "z", n_outside=200000)
    np.testing.assert_allclose(exact.omega_k, trunc.omega_k, rtol=1e-9)


def test_cell_matches_pinned_uniform_chain():
    # a long unit-spaced chain with two pinned ions holds a cell that looks infinite
    u = np.arange(2001.0)
    A = coupling_from_positions(u, "z", np.zeros(2001)).A
    sub, _ = principal_submatrix(A, [i for i in range(2001) if not 996 <= i <= 1004])
    cell = cell_frequencies(9, "z")
    np.testing.assert_allclose(np.sqrt(np.linalg.eigvalsh(sub)), cell.omega_k, rtol=5e-6)  # 1000-ion tails omitted


def test_tweezer_scan_pinned_rows(small_crystal):
    rows, fit = tweezer_scan(small_crystal, "z", [3, 4, 5, 6], [1.0], middle_fraction=None)
    pinned = [r for r in rows if np.isinf(r.strength)]
    assert len(pinned) == 4 and fit is not None
    finite = {r.period: r.omega_L for r in rows if np.isfinite(r.strength)}
    for r in pinned:
        assert r.omega_L >= finite[r.period]
    # the pinned lowest mode of a smaller cell is stiffer
    assert pinned[0].omega_L > pinned[-1].omega_L
    base = coupling_matrix(small_crystal, "z").A
    sub, _ = principal_submatrix(base, periodic_sites(30, 3))
    assert pinned[0].omega_L == pytest.approx(lowest_frequency(sub))
