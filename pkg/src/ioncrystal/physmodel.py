"""Physical constants, trap configuration and the dimensionless unit system.

All simulation code works in units where lengths are measured in the target
spacing ``d0``, frequencies in ``omega0 = sqrt(e^2 / (4 pi eps0 m d0^3))``,
momenta in ``m omega0 d0`` and temperatures in ``hbar omega0 / k_B``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import yaml
from scipy import constants as sc

from ioncrystal.errors import ConfigError

YB171_MASS = 170.936323 * sc.atomic_mass
YB_COOLING_LINEWIDTH = 2 * np.pi * 19.6e6
# Effective Raman wavevector difference; see README for the convention.
DEFAULT_DELTA_K = 2 * np.pi / 355e-9

AXES = ("x", "y", "z")


def doppler_temperature(linewidth: float) -> float:
    """Doppler cooling limit ``hbar * linewidth / (2 k_B)`` in kelvin."""
    if not linewidth > 0:
        raise ConfigError(f"linewidth must be positive, got {linewidth!r}")
    return sc.hbar * linewidth / (2 * sc.k)


@dataclass(frozen=True)
class TrapConfig:
    """Ion species, trap geometry and cooling parameters in SI units.

    ``L`` is the bookend separation in metres; :meth:`L_d0` gives it in
    units of the target spacing.
    """

    N: int = 1795
    L: float = 2000 * 10e-6
    ion_mass: float = YB171_MASS
    ion_charge: float = sc.e
    d0: float = 10e-6
    h: float = 30e-6
    V_dc: float = 0.1
    omega_rf_x: float = 2 * np.pi * 5e6
    omega_rf_y: float = 2 * np.pi * 5e6
    T_doppler: float = field(default_factory=lambda: doppler_temperature(YB_COOLING_LINEWIDTH))
    delta_k: float = DEFAULT_DELTA_K

    def __post_init__(self):
        for name in ("ion_mass", "ion_charge", "d0", "h", "L", "omega_rf_x", "omega_rf_y",
                     "T_doppler", "delta_k"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be positive and finite, got {value!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N!r}")
        if self.V_dc < 0:
            raise ConfigError(f"V_dc must be non-negative, got {self.V_dc!r}")

    @property
    def L_d0(self) -> float:
        return self.L / self.d0

    def with_length(self, L_d0: float, N: int | None = None) -> "TrapConfig":
        """Copy with the bookend separation given in units of ``d0``."""
        return replace(self, L=L_d0 * self.d0, N=self.N if N is None else int(N))

    @property
    def bookend_strength(self) -> float:
        """Prefactor ``e V_dc / pi`` of the bookend potential in units of ``m omega0^2 d0^2``."""
        coulomb_energy = self.ion_charge**2 / (4 * np.pi * sc.epsilon_0 * self.d0)
        return self.ion_charge * self.V_dc / np.pi / coulomb_energy

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class UnitSystem:
    """Scales converting between SI and the dimensionless simulation units."""

    omega0: float
    eps: float
    t_unit: float
    temp_unit: float
    d0: float
    mass: float

    def to_si_length(self, x):
        return np.asarray(x) * self.d0

    def from_si_length(self, x):
        return np.asarray(x) / self.d0

    def to_si_frequency(self, nu):
        return np.asarray(nu) * self.omega0

    def from_si_frequency(self, omega):
        return np.asarray(omega) / self.omega0

    def to_si_time(self, t):
        return np.asarray(t) * self.t_unit

    def from_si_time(self, t):
        return np.asarray(t) / self.t_unit

    def to_kelvin(self, T):
        return np.asarray(T) * self.temp_unit

    def from_kelvin(self, T):
        return np.asarray(T) / self.temp_unit

    def khz(self, nu):
        """Dimensionless angular frequency expressed as ordinary frequency in kHz."""
        return np.asarray(nu) * self.omega0 / (2 * np.pi) / 1e3

    def lamb_dicke_scale(self, delta_k: float) -> float:
        """``|dk| d0 sqrt(eps)``; the Lamb-Dicke parameter of a mode is this over ``sqrt(nu)``."""
        return delta_k * self.d0 * np.sqrt(self.eps)


def derive_units(config: TrapConfig) -> UnitSystem:
    """Characteristic frequency and dimensionless quantum scale of a trap."""
    if not (config.ion_mass > 0 and config.ion_charge > 0 and config.d0 > 0):
        raise ConfigError("mass, charge and d0 must be positive")
    m, d0 = config.ion_mass, config.d0
    omega0 = np.sqrt(config.ion_charge**2 / (4 * np.pi * sc.epsilon_0 * m * d0**3))
    eps = sc.hbar / (m * omega0 * d0**2)
    return UnitSystem(
        omega0=float(omega0),
        eps=float(eps),
        t_unit=float(1 / omega0),
        temp_unit=float(sc.hbar * omega0 / sc.k),
        d0=d0,
        mass=m,
    )


@dataclass(frozen=True)
class TweezerLayout:
    """Optical tweezers as per-ion pinning frequencies (units of ``omega0``).

    ``pinned`` holds ``(ion_index, nu_y, nu_z, nu_x)`` tuples. For beams
    incident along ``x`` the transverse-``x`` term vanishes and the ``y`` and
    ``z`` terms are equal.
    """

    pinned: tuple[tuple[int, float, float, float], ...] = ()
    incident_axis: str = "x"

    def __post_init__(self):
        if self.incident_axis not in AXES:
            raise ConfigError(f"incident_axis must be one of {AXES}, got {self.incident_axis!r}")
        pinned = tuple((int(i), float(ny), float(nz), float(nx)) for i, ny, nz, nx in self.pinned)
        object.__setattr__(self, "pinned", pinned)
        indices = [p[0] for p in pinned]
        if len(set(indices)) != len(indices):
            raise ConfigError("tweezer ion indices must be unique")
        for i, ny, nz, nx in pinned:
            if i < 0:
                raise ConfigError(f"negative tweezer index {i}")
            if min(ny, nz, nx) < 0:
                raise ConfigError(f"tweezer frequencies must be non-negative (ion {i})")
            if self.incident_axis == "x" and (nx != 0 or not np.isclose(ny, nz)):
                raise ConfigError(
                    f"x-incident tweezer on ion {i} must have nu_x = 0 and nu_y = nu_z"
                )

    @classmethod
    def none(cls) -> "TweezerLayout":
        return cls(())

    @classmethod
    def at(cls, indices: Iterable[int], nu: float) -> "TweezerLayout":
        """x-incident tweezers of strength ``nu`` on the given (0-based) ions."""
        return cls(tuple((int(i), nu, nu, 0.0) for i in indices))

    @classmethod
    def periodic(cls, N: int, period: int, nu: float, offset: int = 0) -> "TweezerLayout":
        if period < 1:
            raise ConfigError("tweezer period must be >= 1")
        return cls.at(range(offset % period, N, period), nu)

    @property
    def indices(self) -> list[int]:
        return [p[0] for p in self.pinned]

    def validate_for(self, N: int) -> None:
        bad = [i for i in self.indices if i >= N]
        if bad:
            raise ConfigError(f"tweezer indices {bad} out of range for N={N}")

    def nu_ot(self, axis: str, N: int) -> np.ndarray:
        """Per-ion tweezer frequency on ``axis`` as a length-``N`` array."""
        self.validate_for(N)
        col = {"y": 1, "z": 2, "x": 3}[axis]
        out = np.zeros(N)
        for p in self.pinned:
            out[p[0]] = p[col]
        return out


def _coerce_si(name: str, value: Any) -> float:
    if isinstance(value, str):
        value = value.strip()
        if value.startswith("2pi*"):
            return 2 * np.pi * float(value[4:])
        return float(value)
    return value


def config_from_mapping(data: Mapping[str, Any]) -> tuple[TrapConfig, TweezerLayout]:
    """Build a trap config and tweezer layout from a plain mapping.

    ``L_d0`` may be given instead of ``L``; frequencies accept the string
    form ``"2pi*5e6"``. Unknown trap keys raise :class:`ConfigError`.
    """
    trap = dict(data.get("trap", {}))
    known = {f.name for f in fields(TrapConfig)}
    kwargs: dict[str, Any] = {}
    if "L_d0" in trap:
        d0 = float(trap.get("d0", TrapConfig.d0))
        kwargs["L"] = float(trap.pop("L_d0")) * d0
    for key, value in trap.items():
        if key not in known:
            raise ConfigError(f"trap.{key}: unknown field")
        try:
            kwargs[key] = int(value) if key == "N" else float(_coerce_si(key, value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"trap.{key}: cannot parse {value!r}") from exc
    config = TrapConfig(**kwargs)

    tw = data.get("tweezers") or {}
    incident = tw.get("incident_axis", "x")
    nu = tw.get("nu")
    if "nu_hz" in tw:
        nu = 2 * np.pi * float(tw["nu_hz"]) / derive_units(config).omega0
    pinned: list[tuple[int, float, float, float]] = []
    if "period" in tw:
        layout = TweezerLayout.periodic(config.N, int(tw["period"]), float(nu),
                                        int(tw.get("offset", 0)))
        pinned.extend(layout.pinned)
    for i in tw.get("indices", []):
        pinned.append((int(i), float(nu), float(nu), 0.0))
    for entry in tw.get("pinned", []):
        pinned.append(tuple(entry))
    layout = TweezerLayout(tuple(pinned), incident_axis=incident)
    layout.validate_for(config.N)
    return config, layout


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a YAML config file into a dict."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return data
