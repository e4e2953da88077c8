"""Power-law and exponential-relaxation fits shared by the analysis scenarios."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares

from ioncrystal.errors import ConfigError, NumericError


@dataclass
class PowerLawFit:
    """``y = prefactor * x**exponent``."""

    prefactor: float
    exponent: float
    r_squared: float

    def __call__(self, x):
        return self.prefactor * np.asarray(x, dtype=float) ** self.exponent

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RelaxationFit:
    """``y = a exp(-t / tau_R) + x_s``."""

    a: float
    tau_R: float
    x_s: float
    rms_residual: float

    def __call__(self, t):
        return self.a * np.exp(-np.asarray(t, dtype=float) / self.tau_R) + self.x_s

    def to_dict(self) -> dict:
        return asdict(self)


class FitDegenerateError(NumericError):
    pass


def fit_power_law(points) -> PowerLawFit:
    """Least squares line through ``(log x, log y)``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ConfigError("points must be a sequence of (x, y) pairs")
    if len(pts) < 4:
        raise ConfigError(f"power-law fit needs at least 4 points, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x <= 0) or np.any(y <= 0):
        raise ConfigError("power-law fit needs strictly positive data")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    # flat data: ss_tot is pure rounding noise, the fit is exact
    flat = ss_tot <= len(ly) * (1e-12 * max(1.0, float(np.abs(ly).max()))) ** 2
    r2 = 1.0 if flat else 1.0 - float((resid**2).sum()) / ss_tot
    return PowerLawFit(prefactor=float(np.exp(intercept)), exponent=float(slope), r_squared=r2)


def fit_relaxation(t, y) -> RelaxationFit:
    """Fit ``a exp(-t/tau) + x_s`` by nonlinear least squares.

    The starting point takes ``x_s`` from the last sample, ``a`` from the
    first-minus-last difference and ``tau`` from a log-linear fit of the
    early, clearly decaying part of ``y - x_s``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ConfigError("t and y must be 1-D arrays of equal length")
    if len(t) < 10:
        raise ConfigError(f"relaxation fit needs at least 10 samples, got {len(t)}")
    a0 = y[0] - y[-1]
    scale = max(np.abs(y).max(), 1e-300)
    if abs(a0) <= 1e-12 * scale:
        raise FitDegenerateError("series does not decay; cannot fit a relaxation time")

    x_s0 = y[-1]
    excess = (y - x_s0) / a0
    usable = excess > 0.05
    usable[0] = True
    stop = np.argmin(usable) if not usable.all() else len(t)
    if stop >= 2:
        slope = np.polyfit(t[:stop] - t[0], np.log(excess[:stop]), 1)[0]
    else:
        slope = 0.0
    tau0 = -1.0 / slope if slope < 0 else (t[-1] - t[0]) / 3

    t_ref = t[0]
    span = t[-1] - t[0]

    def residual(p):
        a, log_tau, xs = p
        return (a * np.exp(-(t - t_ref) / np.exp(log_tau)) + xs - y) / scale

    sol = least_squares(residual, [a0, np.log(tau0), x_s0], method="lm",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    a, log_tau, xs = sol.x
    tau = float(np.exp(log_tau))
    if not np.isfinite(tau) or tau > 1e6 * span:
        raise FitDegenerateError("relaxation time is unbounded; series does not decay")
    a = float(a * np.exp(t_ref / tau))
    rms = float(np.sqrt(np.mean((sol.fun * scale) ** 2)))
    return RelaxationFit(a=a, tau_R=tau, x_s=float(xs), rms_residual=rms)
