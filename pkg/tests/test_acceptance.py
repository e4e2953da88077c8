"""Acceptance criteria, one test per criterion.

Each test records a single ``PASS``/``FAIL`` line with the measured values;
the lines are printed together at the end of the pytest run (see
``conftest.py``) and also when this file is executed directly.
Criteria 1-7 take about ten minutes in total on one core; criterion 8 is
the fast property suite.
"""

from __future__ import annotations

import sys
import time

import numpy as np
import pytest
from scipy import integrate

from ioncrystal import TrapConfig, TweezerLayout, derive_units
from ioncrystal.cooling import (BathAssignment, build_scenario, discretize, drift_diffusion,
                                local_cell_layout, mid_pf_scaling, periodic_cell_layout,
                                relaxation, steady_state, thermal_covariance)
from ioncrystal.crystal import calibrate_count, energy_gradient, solve_equilibrium, spacing_stats
from ioncrystal.fitting import fit_power_law, fit_relaxation
from ioncrystal.gatedesign import (GateSpec, PulseShape, anharmonic_infidelity, beam_infidelity,
                                   computational_infidelity, evaluate_pulse, optimize_pulse,
                                   segment_integrals, segment_phase_kernel,
                                   thermal_errors_from_pf)
from ioncrystal.modespec import (cell_frequencies, coupling_from_positions, coupling_matrix,
                                 lowest_frequency, spectrum, tweezer_scan)

RESULTS: list[str] = []

CONFIG = TrapConfig()
UNITS = derive_units(CONFIG)
T_D = CONFIG.T_doppler / UNITS.temp_unit
TWEEZER_1MHZ = 2 * np.pi * 1e6 / UNITS.omega0


def within(value, target, rel):
    return abs(value - target) <= rel * abs(target)


def same_order(value, target, decades):
    return abs(np.log10(value) - np.log10(target)) <= decades


class Report:
    """Collects sub-checks for one criterion and emits one line."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.parts: list[tuple[bool, str]] = []
        self.start = time.perf_counter()

    def check(self, ok: bool, text: str) -> bool:
        self.parts.append((bool(ok), text))
        return bool(ok)

    @property
    def ok(self) -> bool:
        return all(ok for ok, _ in self.parts)

    def emit(self):
        status = "PASS" if self.ok else "FAIL"
        detail = "; ".join(("" if ok else "[x] ") + text for ok, text in self.parts)
        line = (f"criterion {self.number} {status} ({self.title}, "
                f"{time.perf_counter() - self.start:.0f}s): {detail}")
        RESULTS.append(line)
        print(line)
        failed = [text for ok, text in self.parts if not ok]
        assert not failed, "; ".join(failed)


@pytest.fixture(scope="module")
def crystal_1795():
    return solve_equilibrium(CONFIG)


@pytest.fixture(scope="module")
def crystal_1018():
    return solve_equilibrium(CONFIG.with_length(1190, N=1018))


# ------------------------------------------------------------------ 1
@pytest.mark.slow
def test_criterion_1_uniformity():
    rep = Report(1, "uniform spacing")
    N = calibrate_count(2000, CONFIG)
    rep.check(abs(N - 1795) <= 10, f"N(L=2000)={N} vs 1795+-10")
    rel = spacing_stats(solve_equilibrium(CONFIG.with_length(2000, N))).relative_sigma
    rep.check(rel < 0.04, f"sigma/mean(L=2000)={rel:.2%} < 4%")
    worst = (0.0, None)
    for q in range(5, 21):
        L = 100.0 * q
        n = calibrate_count(L, CONFIG)
        r = spacing_stats(solve_equilibrium(CONFIG.with_length(L, n))).relative_sigma
        worst = max(worst, (r, q))
    rep.check(worst[0] < 0.04, f"max sigma/mean over q=5..20 = {worst[0]:.2%} at q={worst[1]}")
    rep.emit()


# ------------------------------------------------------------------ 2
def test_criterion_2_tweezer_pinning(crystal_1795):
    rep = Report(2, "tweezer pinning")
    L = 1200.0
    cr = solve_equilibrium(CONFIG.with_length(L, calibrate_count(L, CONFIG)))
    free = lowest_frequency(coupling_matrix(cr, "z").A)
    nu500 = 2 * np.pi * 500e3 / UNITS.omega0
    rows, _ = tweezer_scan(cr, "z", [10], [nu500], include_pinned=False, middle_fraction=None)
    gain = rows[0].omega_L / free
    rep.check(10 <= gain <= 100,
              f"N={cr.N}: omega_L(500 kHz)/omega_L(free) = {gain:.1f} in [10, 100]")
    periods = [5, 6, 7, 8, 10, 12, 15, 20, 25, 30, 40, 50]
    _, fit = tweezer_scan(crystal_1795, "z", periods, [], include_pinned=True)
    rep.check(abs(fit.exponent + 0.77) <= 0.05,
              f"pinned fit {fit.prefactor:.2f} P^{fit.exponent:.3f} (r2={fit.r_squared:.4f}), "
              f"exponent -0.77+-0.05")
    rep.emit()


# ------------------------------------------------------------------ 3
def test_criterion_3_gate_design(crystal_1795):
    rep = Report(3, "gate design")
    nu2 = (CONFIG.omega_rf_x / UNITS.omega0) ** 2
    cell = cell_frequencies(9, "x", nu2)
    full = spectrum(coupling_matrix(crystal_1795, "x"), "x")
    T = 10 * T_D
    t_list = [1, 2, 5, 10, 20, 50]
    best, ratios, power = np.inf, [], []
    for tg_us in t_list:
        tg = float(UNITS.from_si_time(tg_us * 1e-6))
        spec = GateSpec(2, 5, tg, M=7, T=T, n_mu=2000)
        pulse, budget = optimize_pulse(spec, cell, UNITS)
        on_full = evaluate_pulse(pulse, GateSpec(627, 630, tg, M=7, T=T), full, UNITS).dF_c
        best = min(best, budget.dF_c)
        ratios.append(max(on_full / budget.dF_c, budget.dF_c / on_full))
        power.append((tg_us, budget.eta_omega_max))
    rep.check(best < 1e-5, f"best cell dF_c={best:.2e} < 1e-5")
    rep.check(max(ratios) < 2, f"full/cell dF_c ratio max {max(ratios):.2f} < 2 "
                               f"(ions 628/631)")
    fit = fit_power_law(power)
    rep.check(abs(fit.exponent + 1.53) <= 0.15,
              f"eta*Omega_max ~ t_g^{fit.exponent:.3f} vs -1.53+-0.15")
    rep.emit()


# ------------------------------------------------------------------ 4
def test_criterion_4_thermal_error_channels():
    rep = Report(4, "thermal error channels")
    nu_x = CONFIG.omega_rf_x / UNITS.omega0
    th = thermal_errors_from_pf(5.1e-4, nu_x, UNITS, CONFIG.delta_k, 5e-6, "x")
    rep.check(within(th.dF_LD, 7.0e-4, 0.10), f"dF_LD={th.dF_LD:.3e} vs 7.0e-4+-10%")
    rep.check(same_order(th.dF_a, 1e-7, 0.5), f"transverse dF_a={th.dF_a:.2e} ~ 1e-7")
    dFa_z = anharmonic_infidelity(0.02)
    dFb_z = beam_infidelity(0.02, 5e-6 / UNITS.d0)
    rep.check(2e-4 <= dFa_z <= 8e-4, f"longitudinal dF_a={dFa_z:.2e} in [2e-4, 8e-4]")
    rep.check(same_order(dFb_z, 1e-5, 1.0), f"dF_b(w=5um)={dFb_z:.2e} ~ 1e-5")
    # the model's own transverse thermal PF that feeds the numbers above
    cell = cell_frequencies(9, "x", nu_x**2)
    from ioncrystal.cooling import position_fluctuations

    pf = position_fluctuations(thermal_covariance(cell, T_D, UNITS.eps))[4]
    rep.check(within(pf, 5.1e-4, 0.10), f"model dx_th(T_D)={pf:.3e} vs 5.1e-4")
    rep.emit()


# ------------------------------------------------------------------ 5
def test_criterion_5_pf_scaling():
    rep = Report(5, "PF scaling")
    points, fit = mid_pf_scaling(CONFIG, [200, 300, 400, 500, 600, 700, 800, 900], T_D)
    Ns = [n for n, _ in points]
    rep.check(min(Ns) >= 50 and max(Ns) <= 800, f"N range {min(Ns)}..{max(Ns)}")
    rep.check(abs(fit.exponent - 0.42) <= 0.05, f"exponent {fit.exponent:.3f} vs 0.42+-0.05")
    rep.check(within(fit.prefactor, 4.3e-3, 0.30),
              f"prefactor {fit.prefactor:.3e} vs 4.3e-3+-30%")
    rep.emit()


# ------------------------------------------------------------------ 6
def _periodic_run(crystal, axis, n_cool):
    layout, cool = periodic_cell_layout(crystal.N, TWEEZER_1MHZ, 10, 4, n_cool)
    sc = build_scenario(crystal, axis, layout, cool, UNITS.eps, T_D)
    return relaxation(sc, 20 * T_D, 219).fit


@pytest.mark.slow
def test_criterion_6_cooling_relaxation(crystal_1018):
    rep = Report(6, "sympathetic cooling, N=1018, P=10")
    targets = {1: (4900, 0.016), 2: (2590, 0.015), 4: (677, 0.014)}
    for n_cool, (tau, xs) in targets.items():
        fit = _periodic_run(crystal_1018, "z", n_cool)
        rep.check(within(fit.tau_R, tau, 0.20), f"#{n_cool} tau_z={fit.tau_R:.0f} vs {tau}+-20%")
        rep.check(within(fit.x_s, xs, 0.15), f"#{n_cool} dz_s={fit.x_s:.4f} vs {xs}+-15%")
    for axis, tau in (("x", 113), ("y", 302)):
        fit = _periodic_run(crystal_1018, axis, 1)
        rep.check(within(fit.tau_R, tau, 0.20),
                  f"tau_{axis}={fit.tau_R:.0f} vs {tau}+-20% (d{axis}_s={fit.x_s:.2e})")
    rep.emit()


# ------------------------------------------------------------------ 7
@pytest.mark.slow
def test_criterion_7_local_cell(crystal_1018):
    rep = Report(7, "local cell cooling, N=1018")
    tau_z = {1: 3.9e4, 2: 2.4e4, 3: 1.7e4}
    xs_z = {1: 0.031, 2: 0.025, 3: 0.021}
    tau_y = {1: 658, 2: 698, 3: 709}
    outside = (189, 249)
    for wall in (1, 2, 3):
        layout, cool = local_cell_layout(crystal_1018.N, TWEEZER_1MHZ, 215, 223, wall)
        for axis in ("z", "y"):
            sc = build_scenario(crystal_1018, axis, layout, cool, UNITS.eps, T_D)
            run = relaxation(sc, 20 * T_D, 219, ions=outside)
            if axis == "z":
                rep.check(within(run.fit.tau_R, tau_z[wall], 0.25),
                          f"w{wall} tau_z={run.fit.tau_R:.3g} vs {tau_z[wall]:.2g}+-25%")
                rep.check(within(run.fit.x_s, xs_z[wall], 0.15),
                          f"w{wall} dz_s={run.fit.x_s:.4f} vs {xs_z[wall]}+-15%")
            else:
                rep.check(within(run.fit.tau_R, tau_y[wall], 0.20),
                          f"w{wall} tau_y={run.fit.tau_R:.0f} vs {tau_y[wall]}+-20%")
            for ion in outside:
                y = run.series.of(ion)
                grows = bool(np.all(np.diff(y) >= 0))
                rep.check(grows, f"w{wall} {axis} ion {ion + 1} PF {y[0]:.4g}->{y[-1]:.4g} "
                                 f"monotone growth")
    rep.emit()


# ------------------------------------------------------------------ 8
def test_criterion_8_property_suites():
    rep = Report(8, "property suites")
    cfg = CONFIG.with_length(40, N=30)
    cr = solve_equilibrium(cfg)
    g = np.max(np.abs(energy_gradient(cr.u, cfg)))
    rep.check(g <= 1e-10, f"equilibrium |grad|={g:.1e}")

    worst = 0.0
    for axis in "xyz":
        m = spectrum(coupling_matrix(cr, axis))
        worst = max(worst, np.abs(m.G.T @ m.G - np.eye(m.N)).max())
    rep.check(worst <= 1e-10, f"G orthogonality {worst:.1e}")

    base = spectrum(coupling_matrix(cr, "z")).omega_k
    more = spectrum(coupling_matrix(cr, "z", TweezerLayout.at([4, 14, 24], 3.0))).omega_k
    rep.check(np.all(more >= base - 1e-12), "eigenvalues non-decreasing with tweezers")

    u = (5 / 4) ** (1 / 3) * np.array([-1.0, 0.0, 1.0])
    w = spectrum(coupling_from_positions(u, "z", np.ones(3))).omega_k
    err = np.abs(w / w[0] - [1, np.sqrt(3), np.sqrt(29 / 5)]).max()
    rep.check(err <= 1e-6, f"3-ion ratios err {err:.1e}")

    nu, mu, t_g, M = 3.1, 2.7, 5.0, 5
    B = segment_integrals([nu], mu, t_g, M)[0]
    edges = np.linspace(0, t_g, M + 1)
    q = [integrate.quad(lambda t: np.sin(mu * t) * np.cos(nu * t), a, b, epsabs=1e-14)[0]
         + 1j * integrate.quad(lambda t: np.sin(mu * t) * np.sin(nu * t), a, b, epsabs=1e-14)[0]
         for a, b in zip(edges[:-1], edges[1:])]
    I = segment_phase_kernel([nu], mu, t_g, M)[0]
    f = lambda tp, t: np.sin(mu * t) * np.sin(mu * tp) * np.sin(nu * (tp - t))  # noqa: E731
    qd = integrate.dblquad(f, edges[1], edges[2], lambda t: t, lambda t: edges[2],
                           epsabs=1e-13)[0]
    qo = integrate.dblquad(f, edges[0], edges[1], edges[3], edges[4], epsabs=1e-13)[0]
    err = max(np.abs(B - q).max() / np.abs(q).max(), abs(I[1, 1] - qd) / abs(qd),
              abs(I[0, 3] - qo) / abs(qo))
    rep.check(err <= 1e-8, f"alpha/phi closed forms vs quadrature {err:.1e}")

    modes = cell_frequencies(9, "x", 1214.0)
    dF0 = computational_infidelity(np.zeros(9), np.zeros(9), modes, 10 * T_D)
    rep.check(dF0 == 0.0, "dF_c(alpha=0)=0")

    A = coupling_matrix(cr, "z").A
    zm = spectrum(A, "z")
    T_hot = 1e4 * zm.omega_k.max()
    Mx, D = drift_diffusion(A, BathAssignment.uniform(30, T_hot), zm, UNITS.eps)
    ss = steady_state(Mx, D).Sigma
    th = thermal_covariance(zm, T_hot, UNITS.eps).Sigma
    err = np.abs(ss - th).max() / np.abs(th).max()
    rep.check(err <= 1e-6, f"uniform-bath Lyapunov vs thermal {err:.1e}")

    M0, D0 = drift_diffusion(A, BathAssignment.build(30, [], 1.0, background_gamma_T=None), zm, UNITS.eps)
    E, _ = discretize(M0, D0, 0.01 / zm.omega_k.max())
    S = thermal_covariance(zm, 20.0, UNITS.eps).Sigma
    S[:30, :30] *= 1.5
    energy = lambda S: 0.5 * np.trace(S[30:, 30:]) + 0.5 * np.trace(A @ S[:30, :30])  # noqa
    e0 = energy(S)
    for _ in range(10_000):
        S = E @ S @ E.T
    err = abs(energy(S) / e0 - 1)
    rep.check(err <= 1e-8, f"energy drift at gamma=0 over 1e4 steps {err:.1e}")

    t = np.linspace(0, 3000, 100)
    rf = fit_relaxation(t, 0.04 * np.exp(-t / 500) + 0.013)
    pf = fit_power_law([(x, 4.3e-3 * x**0.42) for x in (50, 100, 200, 400, 800)])
    err = max(abs(rf.tau_R / 500 - 1), abs(rf.a / 0.04 - 1), abs(rf.x_s / 0.013 - 1),
              abs(pf.exponent - 0.42), abs(pf.prefactor / 4.3e-3 - 1))
    rep.check(err <= 1e-6, f"fit recovery {err:.1e}")
    elapsed = time.perf_counter() - rep.start
    rep.check(elapsed < 60, f"suite time {elapsed:.1f}s < 60s")
    rep.emit()


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(RESULTS))
    sys.exit(code)
