"""Second-moment dynamics of the Coulomb-coupled, per-ion-bathed Langevin model.

For one axis the state is ``(x_1..x_N, p_1..p_N)`` with ``x`` in ``d0`` and
``p`` in ``m omega0 d0``. The drift is ``M = [[0, I], [-A, -Gamma]]`` and the
noise enters the momenta only, so the covariance obeys

    dSigma/dt = M Sigma + Sigma M^T + D.

Quantum thermal variances carry the factor ``eps = hbar / (m omega0 d0^2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ioncrystal.errors import ConfigError, NumericError
from ioncrystal.modespec import ModeSpectrum

log = logging.getLogger(__name__)

COOLANT_GAMMA = 0.01
BACKGROUND_GAMMA_T = 1e-4
SYMMETRY_TOL = 1e-12
VARIANCE_FLOOR = -1e-12
BLOWUP_LIMIT = 1e6
ZERO_MODE = 1e-12


class IntegratorError(NumericError):
    pass


class NoSteadyStateError(NumericError):
    pass


def half_coth(nu, T):
    """``nbar(nu, T) + 1/2`` as ``coth(nu / 2T) / 2``; ``T = 0`` gives the zero-point value."""
    nu = np.asarray(nu, dtype=float)
    if T == 0:
        return np.full_like(nu, 0.5)
    return 0.5 / np.tanh(nu / (2.0 * T))


def _mode_energy(nu, T):
    """``nu (nbar + 1/2)``, continuous through ``nu = 0`` where it tends to ``T``."""
    nu = np.asarray(nu, dtype=float)
    if T == 0:
        return 0.5 * nu
    x = nu / (2.0 * T)
    small = np.abs(x) < 1e-6
    safe = np.where(small, 1.0, x)
    return np.where(small, T * (1 + x * x / 3), T * safe / np.tanh(safe))


@dataclass
class BathAssignment:
    """Per-ion damping and bath temperature.

    Coolant ions have finite ``T``. Background ions are in the worst-case
    heating limit ``T -> inf`` with ``gamma T`` fixed, so they add noise
    ``2 gamma_T eps`` but no damping.
    """

    gamma: np.ndarray
    T: np.ndarray
    gamma_T: np.ndarray
    roles: tuple[str, ...]

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        self.gamma_T = np.asarray(self.gamma_T, dtype=float)
        n = len(self.roles)
        if not (self.gamma.shape == self.T.shape == self.gamma_T.shape == (n,)):
            raise ConfigError("bath arrays must all have one entry per ion")
        if np.any(self.gamma < 0) or np.any(self.gamma_T < 0):
            raise ConfigError("damping rates must be non-negative")
        if np.any(self.T < 0):
            raise ConfigError("bath temperatures must be non-negative")
        bad = set(self.roles) - {"coolant", "background"}
        if bad:
            raise ConfigError(f"unknown bath roles {sorted(bad)}")

    @property
    def N(self) -> int:
        return len(self.roles)

    @property
    def coolants(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.roles) == "coolant")

    @classmethod
    def build(cls, N: int, coolants, T_cool: float, gamma: float = COOLANT_GAMMA,
              background_gamma_T: float | None = BACKGROUND_GAMMA_T) -> "BathAssignment":
        """Coolants at ``T_cool`` with damping ``gamma``; everyone else is background.

        ``background_gamma_T=None`` leaves the background ions isolated.
        """
        coolants = np.unique(np.asarray(list(coolants), dtype=int))
        if coolants.size and (coolants.min() < 0 or coolants.max() >= N):
            raise ConfigError(f"coolant index out of range for N={N}")
        is_cool = np.zeros(N, dtype=bool)
        is_cool[coolants] = True
        bg = 0.0 if background_gamma_T is None else float(background_gamma_T)
        return cls(
            gamma=np.where(is_cool, gamma, 0.0),
            T=np.where(is_cool, T_cool, np.inf),
            gamma_T=np.where(is_cool, gamma * T_cool, bg),
            roles=tuple("coolant" if c else "background" for c in is_cool),
        )

    @classmethod
    def uniform(cls, N: int, T: float, gamma: float = COOLANT_GAMMA) -> "BathAssignment":
        return cls.build(N, range(N), T, gamma)


@dataclass
class CovarianceState:
    """Covariance of ``(x, p)`` for one axis at time ``time`` (units ``1/omega0``)."""

    axis: str
    Sigma: np.ndarray
    time: float = 0.0

    @property
    def N(self) -> int:
        return self.Sigma.shape[0] // 2

    def check(self, tol: float = 1e-10) -> None:
        S = self.Sigma
        scale = max(np.abs(S).max(), 1e-300)
        if np.abs(S - S.T).max() > SYMMETRY_TOL * scale:
            raise NumericError("covariance lost symmetry")
        n = self.N
        for block in (S[:n, :n], S[n:, n:]):
            if linalg.eigvalsh(block)[0] < -tol * scale:
                raise NumericError("covariance block is not positive semidefinite")


def drift_diffusion(A, baths: BathAssignment, modes: ModeSpectrum, eps: float):
    """Drift ``M`` and momentum diffusion ``D`` for one axis.

    Coolant ``i`` gets ``D_ii = 2 gamma_i eps sum_k nu_k G_ik^2 (nbar_k(T_i) + 1/2)``;
    a background ion gets ``2 gamma_T eps``, the ``T -> inf`` limit of the same
    sum since ``sum_k G_ik^2 = 1``.
    """
    A = np.asarray(getattr(A, "A", A), dtype=float)
    N = A.shape[0]
    if baths.N != N or modes.N != N:
        raise ConfigError(f"bath ({baths.N}) / mode ({modes.N}) sizes do not match A ({N})")
    M = np.zeros((2 * N, 2 * N))
    M[:N, N:] = np.eye(N)
    M[N:, :N] = -A
    M[N:, N:] = -np.diag(baths.gamma)

    noise = 2.0 * baths.gamma_T * eps
    G2 = modes.G**2
    finite = np.isfinite(baths.T) & (baths.gamma > 0)
    for T in np.unique(baths.T[finite]):
        rows = finite & (baths.T == T)
        weight = G2[rows] @ _mode_energy(modes.omega_k, T)
        noise[rows] = 2.0 * baths.gamma[rows] * eps * weight
    D = np.zeros_like(M)
    D[N:, N:] = np.diag(noise)
    return M, D


def thermal_covariance(modes: ModeSpectrum, T: float, eps: float) -> CovarianceState:
    """Covariance of independent thermal modes at temperature ``T`` (units ``hbar omega0 / k_B``)."""
    nu = np.asarray(modes.omega_k, dtype=float)
    zero = np.flatnonzero(nu <= ZERO_MODE)
    if zero.size:
        raise NumericError(f"mode {int(zero[0])} has zero frequency; its thermal variance diverges")
    f = half_coth(nu, T)
    G = modes.G
    N = len(nu)
    S = np.zeros((2 * N, 2 * N))
    S[:N, :N] = (G * (eps * f / nu)) @ G.T
    S[N:, N:] = (G * (eps * f * nu)) @ G.T
    S = 0.5 * (S + S.T)
    return CovarianceState(axis=modes.axis, Sigma=S)


def position_fluctuations(Sigma) -> np.ndarray:
    """Per-ion root position variance (means vanish in the linear model)."""
    S = Sigma.Sigma if isinstance(Sigma, CovarianceState) else np.asarray(Sigma)
    var = np.diag(S)[: S.shape[0] // 2]
    return _checked_sqrt(var)


def _checked_sqrt(var):
    var = np.asarray(var, dtype=float)
    scale = max(float(np.abs(var).max(initial=0.0)), 1e-300)
    if np.any(var < VARIANCE_FLOOR * max(scale, 1.0)):
        raise NumericError(f"negative position variance {var.min():.3e}")
    return np.sqrt(np.clip(var, 0.0, None))


def is_hurwitz(M) -> bool:
    return bool(np.max(linalg.eigvals(M).real) < 0)


def steady_state(M, D, axis: str = "?", check_hurwitz: bool = True) -> CovarianceState:
    """Solve ``M S + S M^T + D = 0``.

    Raises :class:`NoSteadyStateError` when some mode is undamped (``M`` not
    Hurwitz) and :class:`NumericError` if the residual exceeds ``1e-8 |D|``.
    """
    M = np.asarray(M, dtype=float)
    D = np.asarray(D, dtype=float)
    if check_hurwitz:
        lam = linalg.eigvals(M)
        top = float(np.max(lam.real))
        if not top < 0:
            raise NoSteadyStateError(
                f"drift has an undamped mode (max Re lambda = {top:.3e}); no steady state")
    S = linalg.solve_continuous_lyapunov(M, -D)
    S = 0.5 * (S + S.T)
    res = linalg.norm(M @ S + S @ M.T + D)
    if res > 1e-8 * max(linalg.norm(D), 1e-300):
        raise NumericError(f"Lyapunov residual {res:.3e} too large")
    return CovarianceState(axis=axis, Sigma=S, time=np.inf)


def discretize(M, D, dt: float):
    """Exact one-step propagator ``E = exp(M dt)`` and noise ``int_0^dt e^{Ms} D e^{M^T s} ds``.

    Uses the block-exponential construction of Van Loan, which needs no
    steady state and so also covers undamped (heated) modes.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = -M
    block[:n, n:] = D
    block[n:, n:] = M.T
    F = linalg.expm(block * dt)
    E = F[n:, n:].T
    Q = E @ F[:n, n:]
    return E, 0.5 * (Q + Q.T)


@dataclass
class PFSeries:
    """Position fluctuations of selected ions at sampled times."""

    t: np.ndarray
    ions: np.ndarray
    pf: np.ndarray  # shape (len(t), len(ions))

    def of(self, ion: int) -> np.ndarray:
        hit = np.flatnonzero(self.ions == ion)
        if not hit.size:
            raise ConfigError(f"ion {ion} was not tracked")
        return self.pf[:, hit[0]]


def _sample_grid(t_final: float, sample_every: float) -> int:
    if not (t_final > 0 and sample_every > 0):
        raise ConfigError("t_final and sample_every must be positive")
    n = int(round(t_final / sample_every))
    if n < 1 or not np.isclose(n * sample_every, t_final, rtol=1e-9):
        raise ConfigError("t_final must be a whole multiple of sample_every")
    return n


def evolve(Sigma0, M, D, t_final: float, sample_every: float, axis: str = "?",
           step=None) -> list[CovarianceState]:
    """Full covariance at ``0, sample_every, ..., t_final``.

    Each sample is one exact step ``S <- E S E^T + D_step``; ``step`` may pass
    a precomputed ``(E, D_step)``. Symmetry is re-imposed after every step.
    """
    S = np.array(getattr(Sigma0, "Sigma", Sigma0), dtype=float)
    n_steps = _sample_grid(t_final, sample_every)
    E, Q = step if step is not None else discretize(M, D, sample_every)
    limit = BLOWUP_LIMIT * max(np.abs(np.diag(S)).max(), np.abs(np.diag(Q)).max(), 1e-300)
    out = [CovarianceState(axis, S.copy(), 0.0)]
    for k in range(1, n_steps + 1):
        S = E @ S @ E.T + Q
        S = 0.5 * (S + S.T)
        if not np.all(np.isfinite(S)) or np.abs(np.diag(S)).max() > limit:
            raise IntegratorError(f"covariance blew up at step {k}")
        out.append(CovarianceState(axis, S, k * sample_every))
    return out


def evolve_positions(Sigma0, M, D, t_final: float, sample_every: float, ions,
                     step=None) -> PFSeries:
    """Position fluctuations of ``ions`` only, without forming the full covariance.

    With ``R_n`` the tracked rows of ``E^n``,
    ``var(t_n) = diag(R_n S0 R_n^T) + sum_{m<n} diag(R_m Q R_m^T)``,
    which costs ``O(len(ions) N^2)`` per sample instead of ``O(N^3)``.
    """
    S0 = np.asarray(getattr(Sigma0, "Sigma", Sigma0), dtype=float)
    ions = np.asarray(list(ions), dtype=int)
    n = S0.shape[0]
    if ions.size == 0 or ions.min() < 0 or ions.max() >= n // 2:
        raise ConfigError("tracked ions out of range")
    n_steps = _sample_grid(t_final, sample_every)
    E, Q = step if step is not None else discretize(M, D, sample_every)
    R = np.zeros((len(ions), n))
    R[np.arange(len(ions)), ions] = 1.0
    noise = np.zeros(len(ions))
    var = np.empty((n_steps + 1, len(ions)))
    var[0] = S0[ions, ions]
    limit = BLOWUP_LIMIT * max(var[0].max(), np.abs(np.diag(Q)).max(), 1e-300)
    for k in range(1, n_steps + 1):
        noise += np.einsum("ij,ij->i", R @ Q, R)
        R = R @ E
        var[k] = np.einsum("ij,ij->i", R @ S0, R) + noise
        if not np.all(np.isfinite(var[k])) or var[k].max() > limit:
            raise IntegratorError(f"variance blew up at step {k}")
    t = np.arange(n_steps + 1) * sample_every
    return PFSeries(t=t, ions=ions, pf=_checked_sqrt(var))


class StepLadder:
    """Exact propagators for integer multiples of a base step ``h``.

    One block exponential gives ``(E_h, Q_h)``; longer steps follow from
    ``E_{a+b} = E_a E_b`` and ``Q_{a+b} = E_a Q_b E_a^T + Q_a`` without any
    further matrix exponentials.
    """

    def __init__(self, M, D, h: float):
        if not h > 0:
            raise ConfigError("base step must be positive")
        self.h = float(h)
        self._pow2 = [discretize(M, D, h)]
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {1: self._pow2[0]}

    @staticmethod
    def _compose(a, b):
        Ea, Qa = a
        Eb, Qb = b
        Q = Ea @ Qb @ Ea.T + Qa
        return Ea @ Eb, 0.5 * (Q + Q.T)

    def multiple(self, dt: float) -> int:
        n = int(round(dt / self.h))
        if n < 1 or not np.isclose(n * self.h, dt, rtol=1e-9):
            raise ConfigError(f"step {dt} is not a whole multiple of the base step {self.h}")
        return n

    def step(self, dt: float):
        n = self.multiple(dt)
        if n in self._cache:
            return self._cache[n]
        while (1 << (len(self._pow2) - 1)) < n:
            last = self._pow2[-1]
            self._pow2.append(self._compose(last, last))
        out = None
        for bit, block in enumerate(self._pow2):
            if n >> bit & 1:
                out = block if out is None else self._compose(block, out)
        self._cache[n] = out
        return out


@dataclass
class CoolingScenario:
    """Everything needed to propagate one axis: couplings, modes and baths."""

    axis: str
    A: np.ndarray
    modes: ModeSpectrum
    baths: BathAssignment
    eps: float
    tweezer_sites: tuple[int, ...] = ()

    @property
    def N(self) -> int:
        return self.A.shape[0]

    def drift_diffusion(self):
        return drift_diffusion(self.A, self.baths, self.modes, self.eps)

    def thermal(self, T: float) -> CovarianceState:
        return thermal_covariance(self.modes, T, self.eps)


def build_scenario(crystal, axis: str, tweezers, coolants, eps: float, T_cool: float,
                   gamma: float = COOLANT_GAMMA,
                   background_gamma_T: float | None = BACKGROUND_GAMMA_T) -> CoolingScenario:
    """Coupling matrix with finite tweezers plus per-ion baths for one axis.

    Raises :class:`ConfigError` if an ion is both tweezered and a coolant.
    """
    from ioncrystal.modespec import coupling_matrix, spectrum

    sites = tuple(tweezers.indices)
    overlap = set(sites) & {int(i) for i in coolants}
    if overlap:
        raise ConfigError(f"ions {sorted(overlap)} are assigned both a tweezer and a coolant")
    A = coupling_matrix(crystal, axis, tweezers).A
    return CoolingScenario(
        axis=axis, A=A, modes=spectrum(A, axis),
        baths=BathAssignment.build(crystal.N, coolants, T_cool, gamma, background_gamma_T),
        eps=eps, tweezer_sites=sites)


def periodic_cell_layout(N: int, nu_ot: float, period: int = 10, first: int = 4,
                         n_coolants: int = 1):
    """Tweezers on every ``period``-th ion from ``first``; coolants beside them.

    One coolant per cell sits just after each tweezer; two use both
    neighbours; four use the two nearest ions on each side.
    """
    from ioncrystal.physmodel import TweezerLayout

    offsets = {1: (1,), 2: (-1, 1), 4: (-2, -1, 1, 2)}
    if n_coolants not in offsets:
        raise ConfigError(f"coolants per cell must be 1, 2 or 4, got {n_coolants}")
    sites = np.arange(first % period, N, period)
    cool = np.unique(np.concatenate([sites + o for o in offsets[n_coolants]]))
    cool = cool[(cool >= 0) & (cool < N)]
    return TweezerLayout.at(sites, nu_ot), cool


def local_cell_layout(N: int, nu_ot: float, first: int, last: int, wall_thickness: int,
                      coolants=None):
    """Tweezer walls of ``wall_thickness`` ions bracketing the cell ``first..last``.

    Default coolants are the two outermost ions at each end of the cell.
    """
    from ioncrystal.physmodel import TweezerLayout

    if wall_thickness < 1:
        raise ConfigError("wall thickness must be at least 1")
    if not 0 <= first < last < N:
        raise ConfigError("cell span out of range")
    walls = [first - 1 - k for k in range(wall_thickness)] + \
            [last + 1 + k for k in range(wall_thickness)]
    if min(walls) < 0 or max(walls) >= N:
        raise ConfigError("cell walls extend beyond the crystal")
    if coolants is None:
        coolants = [first, first + 1, last - 1, last]
    return TweezerLayout.at(sorted(walls), nu_ot), np.asarray(sorted(coolants), dtype=int)


@dataclass
class RelaxationRun:
    """Fit of one ion's PF plus the series it came from."""

    ion: int
    fit: object
    series: PFSeries
    dt: float

    def to_dict(self) -> dict:
        return {"ion": int(self.ion), "dt": self.dt, "t_final": float(self.series.t[-1]),
                "samples": int(len(self.series.t)), **self.fit.to_dict()}


def relaxation(scenario: CoolingScenario, T0: float, target: int, ions=None,
               ladder: StepLadder | None = None, base_step: float = 1.0,
               e_folds: float = 6.0, samples: int = 200, max_time: float = 1e7) -> RelaxationRun:
    """Relax from a thermal state at ``T0`` and fit the PF of ``target``.

    The fit window grows (doubling) from ``samples`` base steps until it spans
    at least ``e_folds`` fitted relaxation times; a final run then samples
    that window with about ``samples`` points.
    """
    from ioncrystal.fitting import FitDegenerateError, fit_relaxation

    if ladder is None:
        M, D = scenario.drift_diffusion()
        ladder = StepLadder(M, D, base_step)
    S0 = scenario.thermal(T0)
    ions = np.unique(np.append(np.asarray([] if ions is None else list(ions), dtype=int), target))
    h = ladder.h

    def run(dt, n):
        series = evolve_positions(S0, None, None, n * dt, dt, ions, step=ladder.step(dt))
        return series, fit_relaxation(series.t, series.of(target))

    dt = h
    while True:
        try:
            series, fit = run(dt, samples)
            if series.t[-1] >= e_folds * fit.tau_R:
                break
        except FitDegenerateError:
            pass
        dt *= 2
        if dt * samples > max_time:
            raise NumericError(f"no relaxation of ion {target} within t = {max_time:g}")
    window = e_folds * fit.tau_R
    k = max(int(np.floor(np.log2(window / samples / h))), 0)
    dt = h * 2**k
    n = int(np.ceil(window / dt))
    series, fit = run(dt, n)
    log.info("relaxation ion=%d dt=%g window=%g tau=%g", target, dt, n * dt, fit.tau_R)
    return RelaxationRun(ion=int(target), fit=fit, series=series, dt=dt)


def mid_pf_scaling(config, lengths, T: float, middle: str = "centre"):
    """Steady longitudinal PF of the centre ion under all-ion coolant baths.

    For each trap length (units of ``d0``) the ion number is calibrated to
    unit central spacing, then the uniform-bath Lyapunov steady state is
    solved. Returns the ``(N, pf)`` points and their power-law fit.
    """
    from ioncrystal.crystal import calibrate_count, solve_equilibrium
    from ioncrystal.fitting import fit_power_law
    from ioncrystal.modespec import coupling_matrix, spectrum
    from ioncrystal.physmodel import derive_units

    eps = derive_units(config).eps
    points = []
    for L in lengths:
        N = calibrate_count(L, config)
        crystal = solve_equilibrium(config.with_length(L, N))
        A = coupling_matrix(crystal, "z").A
        modes = spectrum(A, "z")
        M, D = drift_diffusion(A, BathAssignment.uniform(N, T), modes, eps)
        pf = position_fluctuations(steady_state(M, D, "z", check_hurwitz=False))
        points.append((N, float(pf[N // 2])))
    return points, fit_power_law(points)
