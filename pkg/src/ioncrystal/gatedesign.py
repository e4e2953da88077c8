"""Segmented-pulse two-qubit phase gates on transverse modes.

Time is in units of ``1/omega0``, frequencies and Rabi amplitudes in units of
``omega0``. The spin-dependent force on each target ion is
``Omega_0(t) sin(mu t)`` with ``Omega_0`` piecewise constant over ``M`` equal
segments, so every time integral below has a closed form per segment.

The thermal weight of the computational infidelity is
``coth(nu_k / T)`` as written in the source model (no factor 1/2 in the
argument); thermal state variances elsewhere use the conventional
``coth(nu_k / 2T)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from ioncrystal.errors import ConfigError, NumericError
from ioncrystal.modespec import ModeSpectrum
from ioncrystal.physmodel import UnitSystem

# below |x h| = SMALL the closed forms switch to their Taylor limits
SMALL = 1e-4
TARGET_PHASE = np.pi / 4


class InfeasibleGateError(NumericError):
    pass


@dataclass
class GateSpec:
    ion_i: int
    ion_j: int
    t_g: float
    M: int = 7
    axis: str = "x"
    delta_k: float = 2 * np.pi / 355e-9
    mu_range: tuple[float, float] | None = None
    T: float = 0.0
    n_mu: int = 2000

    def __post_init__(self):
        if self.ion_i == self.ion_j:
            raise ConfigError("gate ions must differ")
        if not self.t_g > 0:
            raise ConfigError("gate time must be positive")
        if self.M < 1:
            raise ConfigError("need at least one segment")
        if not self.delta_k > 0:
            raise ConfigError("delta_k must be positive")
        if self.axis not in ("x", "y"):
            raise ConfigError("gates use the transverse x or y modes")
        if self.n_mu < 1:
            raise ConfigError("empty mu grid")


@dataclass
class PulseShape:
    omega_m: np.ndarray
    mu: float
    phi_ij: float

    def to_dict(self) -> dict:
        return {"omega_m": [float(x) for x in self.omega_m], "mu": float(self.mu),
                "phi_ij": float(self.phi_ij)}


@dataclass
class GateErrorBudget:
    dF_c: float
    dF_LD: float | None = None
    dF_a: float | None = None
    dF_b: float | None = None
    eta_omega_max: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def lamb_dicke(nu, units: UnitSystem, delta_k: float):
    """``eta_k = |dk| sqrt(hbar / (m omega_k))`` for dimensionless mode frequencies."""
    return units.lamb_dicke_scale(delta_k) / np.sqrt(np.asarray(nu, dtype=float))


def _phi1(w):
    """``(exp(w) - 1) / w`` with the removable singularity at 0."""
    w = np.asarray(w, dtype=complex)
    small = np.abs(w) < 1e-8
    safe = np.where(small, 1.0, w)
    return np.where(small, 1 + w / 2, np.expm1(safe) / safe)


def _exp_integral(x, h):
    """``int_0^h exp(i x s) ds``."""
    return h * _phi1(1j * np.asarray(x) * h)


def _moment(x, h, k):
    """``int_0^h s^k exp(i x s) ds``."""
    x = np.asarray(x, dtype=float)
    w = x * h
    out = np.empty(np.broadcast(x, h).shape, dtype=complex)
    small = np.abs(w) <= 1.0
    if np.any(small):
        ws = np.broadcast_to(w, out.shape)[small]
        acc = np.zeros(ws.shape, dtype=complex)
        term = np.ones(ws.shape, dtype=complex)
        for n in range(40):
            acc += term / (n + k + 1)
            term = term * (1j * ws) / (n + 1)
        out[small] = acc
    if np.any(~small):
        wl = np.broadcast_to(w, out.shape)[~small]
        ew = np.exp(1j * wl)
        m = (ew - 1) / (1j * wl)
        for j in range(1, k + 1):
            m = (ew - j * m) / (1j * wl)
        out[~small] = m
    return out * np.broadcast_to(h, out.shape) ** (k + 1)


def _nested(x, y, h):
    """``int_0^h exp(i x s) int_0^s exp(i y r) dr ds``."""
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    out = np.empty(x.shape, dtype=complex)
    small = np.abs(y * h) < SMALL
    big = ~small
    if np.any(big):
        xb, yb = x[big], y[big]
        out[big] = (_exp_integral(xb + yb, h) - _exp_integral(xb, h)) / (1j * yb)
    if np.any(small):
        xs, ys = x[small], y[small]
        acc = np.zeros(xs.shape, dtype=complex)
        coef = np.ones(xs.shape, dtype=complex)
        for n in range(4):
            acc += coef * _moment(xs, h, n + 1) / (n + 1)
            coef = coef * (1j * ys) / (n + 1)
        out[small] = acc
    return out


def _segment_edges(t_g, M):
    return np.linspace(0.0, t_g, M + 1)


def segment_integrals(nu, mu, t_g, M):
    """``B[k, m] = int_{seg m} sin(mu t) exp(i nu_k t) dt``."""
    nu = np.atleast_1d(np.asarray(nu, dtype=float))[:, None]
    edges = _segment_edges(t_g, M)
    a = edges[:-1][None, :]
    h = t_g / M
    plus = np.exp(1j * (nu + mu) * a) * _exp_integral(nu + mu, h)
    minus = np.exp(1j * (nu - mu) * a) * _exp_integral(nu - mu, h)
    return (plus - minus) / 2j


def segment_phase_kernel(nu, mu, t_g, M):
    """``I[k, m, n] = int int_{t<t'} f_m(t) f_n(t') sin(nu_k (t' - t))``.

    ``f_m`` is ``sin(mu t)`` restricted to segment ``m``; entries with
    ``m > n`` vanish.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    B = segment_integrals(nu, mu, t_g, M)
    I = np.imag(B[:, None, :] * np.conj(B[:, :, None]))
    I = np.triu(np.ones((M, M)), 1)[None] * I

    edges = _segment_edges(t_g, M)
    a = edges[:-1][None, :]
    h = t_g / M
    nuc = nu[:, None]
    tri = np.zeros((len(nu), M), dtype=complex)
    # sin(mu t') e^{i nu t'} = (e^{i(nu+mu)t'} - e^{i(nu-mu)t'}) / 2i
    # sin(mu t) e^{-i nu t} = (e^{i(mu-nu)t} - e^{-i(mu+nu)t}) / 2i
    for sx, x in ((1, nuc + mu), (-1, nuc - mu)):
        for sy, y in ((1, mu - nuc), (-1, -mu - nuc)):
            xb = np.broadcast_to(x, tri.shape)
            yb = np.broadcast_to(y, tri.shape)
            tri += sx * sy * np.exp(1j * (xb + yb) * a) * _nested(xb, yb, h)
    tri = np.imag(-tri / 4)
    idx = np.arange(M)
    I[:, idx, idx] = tri
    return I


def _weights(modes: ModeSpectrum, ions, units: UnitSystem, delta_k):
    eta = lamb_dicke(modes.omega_k, units, delta_k)
    return eta[None, :] * modes.G[list(ions), :]


def displacement_alpha(pulse: PulseShape, spec: GateSpec, modes: ModeSpectrum,
                       units: UnitSystem, ions=None) -> np.ndarray:
    """Final spin-motion displacements ``alpha_i^k(t_g)``; rows follow ``ions``."""
    ions = (spec.ion_i, spec.ion_j) if ions is None else ions
    B = segment_integrals(modes.omega_k, pulse.mu, spec.t_g, spec.M)
    w = _weights(modes, ions, units, spec.delta_k)
    return w * (B @ np.asarray(pulse.omega_m, dtype=float))[None, :]


def phase_matrix(spec: GateSpec, modes: ModeSpectrum, units: UnitSystem, mu: float):
    """Symmetric ``Phi`` with ``phi_ij = Omega^T Phi Omega``."""
    I = segment_phase_kernel(modes.omega_k, mu, spec.t_g, spec.M)
    eta = lamb_dicke(modes.omega_k, units, spec.delta_k)
    c = eta**2 * modes.G[spec.ion_i] * modes.G[spec.ion_j]
    K = np.tensordot(c, I, axes=(0, 0))
    return K + K.T


def accumulated_phase(pulse: PulseShape, spec: GateSpec, modes: ModeSpectrum,
                      units: UnitSystem) -> float:
    om = np.asarray(pulse.omega_m, dtype=float)
    return float(om @ phase_matrix(spec, modes, units, pulse.mu) @ om)


def thermal_weight(nu, T):
    """``coth(nu / T)``; 1 at zero temperature."""
    nu = np.asarray(nu, dtype=float)
    if T <= 0:
        return np.ones_like(nu)
    return 1.0 / np.tanh(nu / T)


def computational_infidelity(alpha_i, alpha_j, modes: ModeSpectrum, T: float) -> float:
    """Infidelity from residual spin-motion entanglement after the gate."""
    beta = thermal_weight(modes.omega_k, T)
    ai = np.asarray(alpha_i)
    aj = np.asarray(alpha_j)
    # 1 - Gamma via expm1 keeps very small infidelities accurate
    loss = [-np.expm1(-np.sum(np.abs(v) ** 2 * beta) / 2) for v in (ai, aj, ai + aj, ai - aj)]
    dF = (2 * (loss[0] + loss[1]) + loss[2] + loss[3]) / 8
    return float(dF)


def residual_matrix(spec: GateSpec, modes: ModeSpectrum, units: UnitSystem, mu: float):
    """``Q`` with ``Omega^T Q Omega = sum_k beta_k (|alpha_i^k|^2 + |alpha_j^k|^2)``."""
    B = segment_integrals(modes.omega_k, mu, spec.t_g, spec.M)
    beta = thermal_weight(modes.omega_k, spec.T)
    w = _weights(modes, (spec.ion_i, spec.ion_j), units, spec.delta_k)
    scale = beta * (w**2).sum(axis=0)
    return np.real(np.conj(B).T @ (scale[:, None] * B))


def _best_direction(Q, Phi):
    """Pulse maximising ``|phi| / residual``, normalised to ``|phi| = pi/4``.

    Either sign of the phase gives the same entangling gate up to local
    rotations, so both ends of the generalised spectrum are candidates.
    """
    M = Q.shape[0]
    ridge = 1e-13 * max(np.trace(Q), 1e-300) / M
    lam, vec = linalg.eigh(Phi, Q + ridge * np.eye(M))
    k = int(np.argmax(np.abs(lam)))
    if lam[k] == 0:
        return None
    v = vec[:, k]
    phase = float(v @ Phi @ v)
    if phase == 0:
        return None
    v = v * np.sqrt(TARGET_PHASE / abs(phase))
    # fix the global sign so that the result is deterministic
    pivot = np.argmax(np.abs(v))
    return v if v[pivot] >= 0 else -v


def default_mu_grid(spec: GateSpec, modes: ModeSpectrum) -> np.ndarray:
    if spec.mu_range is not None:
        lo, hi = spec.mu_range
    else:
        lo, hi = float(modes.omega_k.min()), float(modes.omega_k.max())
    if not hi >= lo:
        raise ConfigError("mu_range upper bound below lower bound")
    return np.linspace(lo, hi, spec.n_mu)


def band_lamb_dicke(modes: ModeSpectrum, units: UnitSystem, delta_k: float) -> float:
    """Lamb-Dicke parameter at the centre of the mode band."""
    return float(lamb_dicke(np.mean(modes.omega_k), units, delta_k))


def optimize_pulse(spec: GateSpec, modes: ModeSpectrum, units: UnitSystem, mu_grid=None):
    """Best segment amplitudes and beat note for a target phase of pi/4.

    For each beat note the thermally weighted displacement residual is
    minimised relative to the phase quadratic form (a generalised symmetric
    eigenproblem), the optimum is rescaled to ``phi = pi/4`` and its
    computational infidelity evaluated; the beat note with the lowest
    infidelity wins.
    """
    mu_grid = default_mu_grid(spec, modes) if mu_grid is None else np.asarray(mu_grid, float)
    if mu_grid.size == 0:
        raise ConfigError("empty mu grid")
    best = None
    for mu in mu_grid:
        Q = residual_matrix(spec, modes, units, mu)
        Phi = phase_matrix(spec, modes, units, mu)
        om = _best_direction(Q, Phi)
        if om is None:
            continue
        pulse = PulseShape(omega_m=om, mu=float(mu), phi_ij=float(om @ Phi @ om))
        alpha = displacement_alpha(pulse, spec, modes, units)
        dF = computational_infidelity(alpha[0], alpha[1], modes, spec.T)
        if best is None or dF < best[1]:
            best = (pulse, dF)
    if best is None:
        raise InfeasibleGateError("phase form has no positive direction for any beat note")
    pulse, dF = best
    eta = band_lamb_dicke(modes, units, spec.delta_k)
    budget = GateErrorBudget(dF_c=dF, eta_omega_max=float(eta * np.max(np.abs(pulse.omega_m))))
    return pulse, budget


def evaluate_pulse(pulse: PulseShape, spec: GateSpec, modes: ModeSpectrum, units: UnitSystem
                   ) -> GateErrorBudget:
    """Apply an existing pulse to another mode structure (e.g. the full crystal)."""
    alpha = displacement_alpha(pulse, spec, modes, units)
    dF = computational_infidelity(alpha[0], alpha[1], modes, spec.T)
    eta = band_lamb_dicke(modes, units, spec.delta_k)
    return GateErrorBudget(dF_c=dF, eta_omega_max=float(eta * np.max(np.abs(pulse.omega_m))))


def power_scaling(spec: GateSpec, t_gates, modes: ModeSpectrum, units: UnitSystem):
    """Fit ``eta Omega_max`` against gate time; returns the fit and the per-``t_g`` results."""
    from ioncrystal.fitting import fit_power_law

    t_gates = np.asarray(list(t_gates), dtype=float)
    if len(t_gates) < 4:
        raise ConfigError("need at least 4 gate times")
    if t_gates.max() < 10 * t_gates.min() * (1 - 1e-12):
        raise ConfigError("gate times must span at least one decade")
    results = []
    for tg in t_gates:
        s = GateSpec(**{**asdict(spec), "t_g": float(tg)})
        pulse, budget = optimize_pulse(s, modes, units)
        results.append((float(tg), pulse, budget))
    fit = fit_power_law([(tg, b.eta_omega_max) for tg, _, b in results])
    return fit, results


@dataclass
class ThermalErrors:
    dF_LD: float | None
    dF_a: float
    dF_b: float | None
    pf: float
    nbar: float
    eta: float

    def to_dict(self) -> dict:
        return asdict(self)


def lamb_dicke_infidelity(eta: float, nbar: float) -> float:
    return float(np.pi**2 * eta**4 * (nbar**2 + nbar + 1 / 8))


def anharmonic_infidelity(pf: float) -> float:
    """``pf`` in units of ``d0``."""
    return float(pf**2)


def beam_infidelity(pf_z: float, w: float) -> float:
    """Gaussian-beam non-uniformity; ``pf_z`` and ``w`` in the same length unit."""
    if not w > 0:
        raise ConfigError("beam waist must be positive")
    return float(np.pi**2 / 4 * (pf_z / w) ** 4)


def thermal_errors_from_pf(pf: float, nu: float, units: UnitSystem, delta_k: float,
                           w: float, axis: str) -> ThermalErrors:
    """Thermal error channels for a given position fluctuation ``pf`` (units of ``d0``).

    The phonon number follows from the thermal-state relation
    ``pf^2 = eps (nbar + 1/2) / nu`` of a mode at frequency ``nu``.
    ``w`` is the beam waist in metres.
    """
    if not w > 0:
        raise ConfigError("beam waist must be positive")
    nbar = max(pf**2 * nu / units.eps - 0.5, 0.0)
    eta = float(lamb_dicke(nu, units, delta_k))
    transverse = axis in ("x", "y")
    return ThermalErrors(
        dF_LD=lamb_dicke_infidelity(eta, nbar) if transverse else None,
        dF_a=anharmonic_infidelity(pf),
        dF_b=None if transverse else beam_infidelity(pf, w / units.d0),
        pf=float(pf), nbar=float(nbar), eta=eta,
    )


def thermal_errors(modes: ModeSpectrum, T: float, delta_k: float, w: float, axis: str,
                   units: UnitSystem, ion: int | None = None, mu: float | None = None,
                   nbar_mode: str = "nearest") -> ThermalErrors:
    """Lamb-Dicke, anharmonic and beam-profile infidelities at temperature ``T``.

    The position fluctuation is that of ``ion`` (default: the middle ion) in
    the thermal state of ``modes``. The phonon number and Lamb-Dicke
    parameter are those of the mode nearest ``mu`` (default: band centre),
    or band averages with ``nbar_mode="band"``.
    """
    from ioncrystal.cooling import position_fluctuations, thermal_covariance

    if not w > 0:
        raise ConfigError("beam waist must be positive")
    ion = modes.N // 2 if ion is None else ion
    pf = float(position_fluctuations(thermal_covariance(modes, T, units.eps))[ion])
    nu = modes.omega_k
    if nbar_mode == "nearest":
        target = np.mean(nu) if mu is None else mu
        k = int(np.argmin(np.abs(nu - target)))
        nbar = float(bose(nu[k], T))
        eta = float(lamb_dicke(nu[k], units, delta_k))
    elif nbar_mode == "band":
        nbar = float(np.mean(bose(nu, T)))
        eta = float(np.mean(lamb_dicke(nu, units, delta_k)))
    else:
        raise ConfigError(f"unknown nbar_mode {nbar_mode!r}")
    transverse = axis in ("x", "y")
    return ThermalErrors(
        dF_LD=lamb_dicke_infidelity(eta, nbar) if transverse else None,
        dF_a=anharmonic_infidelity(pf),
        dF_b=None if transverse else beam_infidelity(pf, w / units.d0),
        pf=pf, nbar=nbar, eta=eta,
    )


def bose(nu, T):
    """Thermal occupation ``1 / (exp(nu/T) - 1)``; zero at ``T = 0``."""
    nu = np.asarray(nu, dtype=float)
    if T <= 0:
        return np.zeros_like(nu)
    return 1.0 / np.expm1(nu / T)
