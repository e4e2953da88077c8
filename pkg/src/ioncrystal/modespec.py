"""Harmonic coupling matrices and normal-mode spectra, with tweezer pinning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ioncrystal.crystal import Crystal, bookend_potential, coulomb_hessian_terms
from ioncrystal.errors import ConfigError, InstabilityError, NumericError
from ioncrystal.physmodel import AXES, TrapConfig, TweezerLayout, derive_units

# Coulomb sign constants per axis
C_XI = {"x": -1.0, "y": -1.0, "z": 2.0}
NEGATIVE_FLOOR = -1e-9


@dataclass
class CouplingMatrix:
    axis: str
    A: np.ndarray
    c_xi: float

    @property
    def N(self) -> int:
        return self.A.shape[0]


@dataclass
class ModeSpectrum:
    """Mode frequencies (units of ``omega0``, ascending); column ``k`` of ``G`` is mode ``k``."""

    axis: str
    omega_k: np.ndarray
    G: np.ndarray

    @property
    def N(self) -> int:
        return len(self.omega_k)

    @property
    def lowest(self) -> float:
        return float(self.omega_k[0])


def trap_frequencies(crystal: Crystal, axis: str) -> np.ndarray:
    """Squared single-ion trap frequencies ``nu_{xi,i}^2`` at the equilibrium positions."""
    cfg = crystal.config
    if axis == "z":
        return bookend_potential(crystal.u, cfg)[2]
    omega0 = derive_units(cfg).omega0
    omega = cfg.omega_rf_x if axis == "x" else cfg.omega_rf_y
    return np.full(crystal.N, (omega / omega0) ** 2)


def coupling_from_positions(u, axis: str, nu2, nu_ot=None) -> CouplingMatrix:
    """Coupling matrix from positions and per-ion on-site terms.

    Parameters
    ----------
    u : array_like
        Positions in units of ``d0`` (need not be sorted).
    axis : {'x', 'y', 'z'}
    nu2 : array_like
        Squared trap frequencies ``nu_{xi,i}^2``.
    nu_ot : array_like, optional
        Tweezer frequencies; their squares are added to the diagonal.
    """
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")
    u = np.asarray(u, dtype=float)
    if len(np.unique(u)) != len(u):
        raise NumericError("singular geometry: two ions share a position")
    c = C_XI[axis]
    c3 = coulomb_hessian_terms(u)
    A = -c * c3
    diag = np.asarray(nu2, dtype=float) + c * c3.sum(axis=1)
    if nu_ot is not None:
        diag = diag + np.asarray(nu_ot, dtype=float) ** 2
    A[np.diag_indices_from(A)] = diag
    return CouplingMatrix(axis=axis, A=A, c_xi=c)


def coupling_matrix(crystal: Crystal, axis: str, tweezers: TweezerLayout | None = None
                    ) -> CouplingMatrix:
    """Coupling matrix ``A^xi`` of a crystal; ``tweezers`` defaults to the crystal's own."""
    tweezers = crystal.tweezers if tweezers is None else tweezers
    nu_ot = tweezers.nu_ot(axis, crystal.N) if tweezers.pinned else None
    return coupling_from_positions(crystal.u, axis, trap_frequencies(crystal, axis), nu_ot)


def spectrum(A, axis: str | None = None) -> ModeSpectrum:
    """Diagonalise a coupling matrix into ascending frequencies and an orthogonal ``G``.

    Eigenvalues in ``[-1e-9, 0)`` are clamped to zero; anything lower means the
    crystal is not a local minimum and raises :class:`InstabilityError`.
    """
    if isinstance(A, CouplingMatrix):
        axis = A.axis if axis is None else axis
        A = A.A
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError("coupling matrix must be square")
    if A.shape[0] == 0:
        raise NumericError("empty spectrum")
    try:
        lam, G = linalg.eigh(A)
    except linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    if lam[0] < NEGATIVE_FLOOR:
        raise InstabilityError(
            f"coupling matrix has negative eigenvalue {lam[0]:.3e}; crystal is unstable")
    return ModeSpectrum(axis=axis or "?", omega_k=np.sqrt(np.clip(lam, 0.0, None)), G=G)


def principal_submatrix(A: np.ndarray, pinned) -> tuple[np.ndarray, np.ndarray]:
    """Delete pinned rows/columns; returns the submatrix and the kept indices."""
    N = A.shape[0]
    pinned = np.unique(np.asarray(list(pinned), dtype=int))
    if pinned.size and (pinned.min() < 0 or pinned.max() >= N):
        raise ConfigError("pinned index out of range")
    keep = np.setdiff1d(np.arange(N), pinned)
    if keep.size == 0:
        raise NumericError("empty spectrum: every ion is pinned")
    return A[np.ix_(keep, keep)], keep


def pinned_spectrum(crystal: Crystal, axis: str, pinned_indices) -> ModeSpectrum:
    """Spectrum in the infinite-tweezer limit, with pinned ions frozen in place."""
    pinned_indices = list(pinned_indices)
    if not pinned_indices:
        raise ConfigError("pinned set must be non-empty")
    A = coupling_matrix(crystal, axis, TweezerLayout.none()).A
    sub, _ = principal_submatrix(A, pinned_indices)
    return spectrum(sub, axis)


def lowest_frequency(A: np.ndarray) -> float:
    lam = linalg.eigvalsh(A, subset_by_index=[0, 0])[0]
    if lam < NEGATIVE_FLOOR:
        raise InstabilityError(f"negative eigenvalue {lam:.3e}")
    return float(np.sqrt(max(lam, 0.0)))


def periodic_sites(N: int, period: int, anchor: int | None = None) -> np.ndarray:
    """Every ``period``-th ion, phased so that one tweezer sits at ``anchor`` (default: centre)."""
    if period < 2:
        raise ConfigError("tweezer period must be >= 2")
    anchor = N // 2 if anchor is None else anchor
    return np.arange(anchor % period, N, period)


@dataclass
class ScanRow:
    period: int
    strength: float
    omega_L: float


def tweezer_scan(crystal: Crystal, axis: str, periods, strengths, anchor: int | None = None,
                 include_pinned: bool = True, middle_fraction: float | None = 0.8):
    """Lowest frequency for tweezers on every ``P``-th ion, over periods and strengths.

    A strength of ``inf`` (added automatically when ``include_pinned``) means the
    pinned limit. With ``middle_fraction`` set, the ``round((1 - f) N / 2)`` ions
    at each end are frozen and tweezers are only placed between them, so the
    soft, unevenly spaced edge segments do not set the lowest frequency.
    Returns the rows and a power-law fit of the pinned-limit ``omega_L``
    against ``P`` (``None`` if fewer than four periods).
    """
    from ioncrystal.fitting import fit_power_law

    N = crystal.N
    base = coupling_matrix(crystal, axis, TweezerLayout.none()).A
    frozen = np.array([], dtype=int)
    lo, hi = 0, N
    if middle_fraction is not None:
        if not 0 < middle_fraction <= 1:
            raise ConfigError("middle_fraction must lie in (0, 1]")
        trim = int(round((1 - middle_fraction) * N / 2))
        lo, hi = trim, N - trim
        frozen = np.r_[np.arange(lo), np.arange(hi, N)]
    strengths = list(strengths)
    if include_pinned and np.inf not in strengths:
        strengths.append(np.inf)
    rows: list[ScanRow] = []
    for P in periods:
        P = int(P)
        sites = periodic_sites(N, P, anchor)
        sites = sites[(sites >= lo) & (sites < hi)]
        for s in strengths:
            if np.isinf(s):
                sub, _ = principal_submatrix(base, np.r_[sites, frozen])
            else:
                A = base.copy()
                if axis != "x":
                    A[sites, sites] += float(s) ** 2
                sub = principal_submatrix(A, frozen)[0] if frozen.size else A
            rows.append(ScanRow(P, float(s), lowest_frequency(sub)))
    pinned = [(r.period, r.omega_L) for r in rows if np.isinf(r.strength)]
    fit = fit_power_law(pinned) if len(pinned) >= 4 else None
    return rows, fit


def cell_frequencies(n_cell: int, axis: str, trap_nu2: float = 0.0, n_outside: int | None = None
                     ) -> ModeSpectrum:
    """Modes of ``n_cell`` free ions cut from an infinite uniform chain of unit spacing.

    All ions outside the cell are frozen; their Coulomb curvature still enters
    the diagonal. ``n_outside`` truncates the frozen chain (default: exact
    infinite sums via the Hurwitz zeta function).
    """
    from scipy.special import zeta

    c = C_XI[axis]
    idx = np.arange(n_cell)
    diff = np.abs(idx[:, None] - idx[None, :]).astype(float)
    np.fill_diagonal(diff, 1.0)
    c3 = 1.0 / diff**3
    np.fill_diagonal(c3, 0.0)
    # distance to the nearest frozen ion on each side
    left = idx + 1.0
    right = n_cell - idx
    if n_outside is None:
        outside = zeta(3, left) + zeta(3, right)
    else:
        k = np.arange(n_outside)
        outside = np.array([(1 / (l + k) ** 3).sum() + (1 / (r + k) ** 3).sum()
                            for l, r in zip(left, right)])
    A = -c * c3
    A[np.diag_indices_from(A)] = trap_nu2 + c * (c3.sum(axis=1) + outside)
    return spectrum(A, axis)
