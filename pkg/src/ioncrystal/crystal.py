"""Classical equilibrium of a linear ion array in a bookend trap.

Positions are in units of ``d0`` and energies in ``m omega0^2 d0^2``, so the
Coulomb energy of a pair at distance ``r`` is simply ``1/r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ioncrystal.errors import ConfigError, ConvergenceError, InstabilityError
from ioncrystal.physmodel import TrapConfig, TweezerLayout

log = logging.getLogger(__name__)

GRAD_TOL = 1e-10
MAX_ITER = 500
COLLISION_SPACING = 0.01


def bookend_potential(z, config: TrapConfig):
    """Bookend potential and its first two derivatives.

    Uses the branch-continuous form ``k [pi + atan((z - L/2)/h) - atan((z + L/2)/h)]``,
    which equals the piecewise arctan expression on both sides of the walls.

    Parameters
    ----------
    z : array_like
        Axial positions in units of ``d0``.
    config : TrapConfig

    Returns
    -------
    U, dU, d2U : ndarray
        Energy, slope and curvature in units of ``m omega0^2 d0^2``.
    """
    z = np.asarray(z, dtype=float)
    k = config.bookend_strength
    h = config.h / config.d0
    half = config.L_d0 / 2
    a = z - half
    b = z + half
    U = k * (np.pi + np.arctan(a / h) - np.arctan(b / h))
    dU = k * (h / (a * a + h * h) - h / (b * b + h * h))
    d2U = k * (-2 * h * a / (a * a + h * h) ** 2 + 2 * h * b / (b * b + h * h) ** 2)
    return U, dU, d2U


def _inverse_distances(u):
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, 1.0)
    inv = 1.0 / np.abs(diff)
    np.fill_diagonal(inv, 0.0)
    return diff, inv


def total_energy(u, config: TrapConfig) -> float:
    """Bookend plus pairwise Coulomb energy of the configuration ``u``."""
    u = np.asarray(u, dtype=float)
    _, inv = _inverse_distances(u)
    U, _, _ = bookend_potential(u, config)
    return float(U.sum() + 0.5 * inv.sum())


def energy_gradient(u, config: TrapConfig) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    diff, inv = _inverse_distances(u)
    _, dU, _ = bookend_potential(u, config)
    return dU - (np.sign(diff) * inv**2).sum(axis=1)


def coulomb_hessian_terms(u) -> np.ndarray:
    """Matrix of ``1/|u_i - u_j|^3`` with zero diagonal."""
    _, inv = _inverse_distances(np.asarray(u, dtype=float))
    return inv**3


def energy_hessian(u, config: TrapConfig) -> np.ndarray:
    """Analytic Hessian; identical to the tweezer-free longitudinal coupling matrix."""
    u = np.asarray(u, dtype=float)
    c3 = coulomb_hessian_terms(u)
    _, _, d2U = bookend_potential(u, config)
    H = -2.0 * c3
    H[np.diag_indices_from(H)] = d2U + 2.0 * c3.sum(axis=1)
    return H


@dataclass
class Crystal:
    """Equilibrium axial positions (units of ``d0``, ascending)."""

    u: np.ndarray
    grad_norm: float
    config: TrapConfig
    tweezers: TweezerLayout = field(default_factory=TweezerLayout.none)
    iterations: int = 0

    @property
    def N(self) -> int:
        return len(self.u)

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.u)


@dataclass
class SpacingStats:
    mean_spacing: float
    sigma_d: float
    middle_fraction: float
    histogram: list[tuple[float, int]]

    @property
    def relative_sigma(self) -> float:
        return self.sigma_d / self.mean_spacing

    def to_dict(self) -> dict:
        return {
            "mean_spacing": self.mean_spacing,
            "sigma_d": self.sigma_d,
            "relative_sigma": self.relative_sigma,
            "middle_fraction": self.middle_fraction,
            "histogram": [[c, n] for c, n in self.histogram],
        }


def uniform_guess(N: int) -> np.ndarray:
    return np.arange(N, dtype=float) - (N - 1) / 2


def solve_equilibrium(config: TrapConfig, tweezers: TweezerLayout | None = None,
                      initial_guess=None, tol: float = GRAD_TOL,
                      max_iter: int = MAX_ITER) -> Crystal:
    """Find the force-balanced axial configuration by damped Newton iteration.

    Tweezers are taken to be centred on the equilibrium they pin, so they do
    not enter the axial force balance; the layout is only carried along.
    """
    tweezers = tweezers or TweezerLayout.none()
    N = int(config.N)
    tweezers.validate_for(N)
    u = uniform_guess(N) if initial_guess is None else np.sort(np.asarray(initial_guess, float))
    if len(u) != N:
        raise ConfigError(f"initial guess has {len(u)} positions, expected N={N}")

    energy = total_energy(u, config)
    g = energy_gradient(u, config)
    gnorm = float(np.max(np.abs(g)))
    it = 0
    while gnorm > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"equilibrium solve did not converge in {max_iter} iterations "
                f"(max |grad| = {gnorm:.3e})", residual=gnorm)
        it += 1
        H = energy_hessian(u, config)
        try:
            step = -linalg.solve(H, g, assume_a="pos")
            descent = float(g @ step)
            if not descent < 0:
                raise linalg.LinAlgError("non-descent Newton step")
        except (linalg.LinAlgError, ValueError):
            # indefinite Hessian (ions beyond a wall): shift it positive definite
            lam_min = linalg.eigvalsh(H, subset_by_index=[0, 0])[0]
            H[np.diag_indices_from(H)] += abs(lam_min) + 1.0
            step = -linalg.solve(H, g, assume_a="pos")
            descent = float(g @ step)

        t = 1.0
        while True:
            trial = u + t * step
            spacing = np.diff(trial)
            if N < 2 or spacing.min() > COLLISION_SPACING:
                e_trial = total_energy(trial, config)
                g_trial = energy_gradient(trial, config)
                gn_trial = float(np.max(np.abs(g_trial)))
                if e_trial <= energy + 1e-4 * t * descent or gn_trial < gnorm:
                    break
            t *= 0.5
            if t < 1e-12:
                if N >= 2 and np.diff(u + 1e-6 * step).min() <= COLLISION_SPACING:
                    raise InstabilityError("ions collided during equilibrium search")
                raise ConvergenceError(
                    f"line search failed (max |grad| = {gnorm:.3e})", residual=gnorm)
        u, energy, g, gnorm = trial, e_trial, g_trial, gn_trial
        log.debug("newton it=%d t=%.3g |g|=%.3e", it, t, gnorm)

    return Crystal(u=u, grad_norm=gnorm, config=config, tweezers=tweezers, iterations=it)


def spacing_stats(crystal: Crystal, middle_fraction: float = 0.8, bins: int = 40) -> SpacingStats:
    """Mean and standard deviation of the spacings of the central ions.

    ``round((1 - middle_fraction) N / 2)`` ions are dropped from each end.
    """
    u = np.asarray(crystal.u if isinstance(crystal, Crystal) else crystal, dtype=float)
    N = len(u)
    if not 0 < middle_fraction <= 1:
        raise ConfigError("middle_fraction must lie in (0, 1]")
    trim = int(round((1 - middle_fraction) * N / 2))
    block = u[trim:N - trim]
    if len(block) < 3:
        raise ConfigError(f"only {len(block)} ions left after trimming; need at least 3")
    d = np.diff(block)
    counts, edges = np.histogram(d, bins=bins)
    centres = 0.5 * (edges[1:] + edges[:-1])
    return SpacingStats(
        mean_spacing=float(d.mean()),
        sigma_d=float(d.std()),
        middle_fraction=middle_fraction,
        histogram=[(float(c), int(n)) for c, n in zip(centres, counts)],
    )


def _mean_spacing(config: TrapConfig, N: int, middle_fraction: float, cache: dict) -> float:
    if N not in cache:
        cache[N] = spacing_stats(solve_equilibrium(config.with_length(config.L_d0, N)),
                                 middle_fraction).mean_spacing
    return cache[N]


def calibrate_count(L_d0: float, config: TrapConfig, middle_fraction: float = 0.8,
                    bracket: float = 0.15, max_bracket: float = 0.8) -> int:
    """Ion number whose central mean spacing is closest to ``d0`` for a trap of length ``L_d0``.

    The mean spacing decreases monotonically with ``N``, so the search is a
    bisection over an integer bracket of relative width ``bracket`` next to
    ``N = L``. Short traps pack far fewer than ``L`` ions, so the lower side is
    widened (doubling, up to ``max_bracket``) until it contains unit spacing.
    """
    if L_d0 < 100:
        raise ConfigError("calibrate_count needs L >= 100 d0")
    config = config.with_length(L_d0)
    cache: dict[int, float] = {}
    # short traps hold far fewer than L ions, so widen the lower side as needed
    n_mid = int(round(L_d0))
    if _mean_spacing(config, n_mid, middle_fraction, cache) >= 1.0:
        lo, hi = n_mid, int(np.ceil(L_d0 * (1 + bracket)))
        if _mean_spacing(config, hi, middle_fraction, cache) >= 1.0:
            raise ConvergenceError(f"spacing bracket exhausted above N={hi}")
    else:
        hi, width = n_mid, bracket
        while True:
            lo = max(int(np.floor(L_d0 * (1 - width))), 5)
            if _mean_spacing(config, lo, middle_fraction, cache) >= 1.0:
                break
            if width >= max_bracket:
                raise ConvergenceError(
                    f"spacing bracket exhausted: N={lo} still has mean spacing "
                    f"{cache[lo]:.4f} < 1")
            hi, width = lo, min(2 * width, max_bracket)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _mean_spacing(config, mid, middle_fraction, cache) >= 1.0:
            lo = mid
        else:
            hi = mid
    return lo if abs(cache[lo] - 1) <= abs(cache[hi] - 1) else hi
