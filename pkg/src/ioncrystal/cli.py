"""Command-line front end: one scenario per invocation, deterministic CSV/JSON outputs.

Exit codes: 0 success, 2 configuration error, 3 numeric or convergence error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import yaml

from ioncrystal import __version__
from ioncrystal.errors import ConfigError, NumericError
from ioncrystal.physmodel import config_from_mapping, derive_units, load_config

log = logging.getLogger("ioncrystal")

KINDS = ("equilibrium", "modes", "gate", "cool", "localcool")
PRESETS = ("fig1c", "fig2a", "fig2b", "fig3a", "fig3b", "fig3cd", "fig4", "fig5")
SLOW_N = 500


# ---------------------------------------------------------------- config plumbing

def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("ioncrystal.presets").joinpath(f"{name}.yaml").read_text("utf-8")
    return yaml.safe_load(text) or {}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as YAML so numbers and lists work."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"--set has an empty key in {assignment!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: cannot parse {raw!r}") from exc
    node = data
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
        node = child
    node[parts[-1]] = value


def resolve_config(preset: str | None, config_path: str | None, overrides) -> dict:
    data: dict = {}
    if preset:
        data = load_preset(preset)
    if config_path:
        data = _deep_merge(data, load_config(config_path))
    for item in overrides or ():
        apply_override(data, item)
    return data


def config_hash(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(data: dict, name: str) -> dict:
    sec = data.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    return sec


def _get(sec: dict, key: str, default=None, cast=None, where: str = ""):
    value = sec.get(key, default)
    if value is None:
        raise ConfigError(f"{where}{key}: required")
    if cast is None:
        return value
    try:
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{key}: cannot interpret {value!r}") from exc


def _check_keys(sec: dict, allowed, where: str) -> None:
    extra = set(sec) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


# ---------------------------------------------------------------- output helpers

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    return obj


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- scenarios

def _base(data: dict):
    config, tweezers = config_from_mapping(data)
    return config, tweezers, derive_units(config)


def _index_base(data: dict) -> int:
    base = data.get("index_base", 0)
    if base not in (0, 1):
        raise ConfigError("index_base must be 0 or 1")
    return int(base)


def run_equilibrium(data: dict, out: Path) -> dict:
    from ioncrystal.crystal import calibrate_count, solve_equilibrium, spacing_stats

    sec = _section(data, "equilibrium")
    _check_keys(sec, {"calibrate", "middle_fraction", "bins", "sweep_q"}, "equilibrium")
    config, tweezers, _ = _base(data)
    frac = float(sec.get("middle_fraction", 0.8))
    bins = int(sec.get("bins", 40))
    summary: dict[str, Any] = {}
    if sec.get("calibrate", False):
        N = calibrate_count(config.L_d0, config, frac)
        config = config.with_length(config.L_d0, N)
        summary["calibrated_N"] = N
    crystal = solve_equilibrium(config, tweezers)
    stats = spacing_stats(crystal, frac, bins)
    write_csv(out / "positions.csv", ["i", "u"], enumerate(crystal.u))
    write_csv(out / "spacing_histogram.csv", ["spacing", "count"], stats.histogram)
    summary.update(N=crystal.N, L_d0=config.L_d0, grad_norm=crystal.grad_norm,
                   iterations=crystal.iterations, **stats.to_dict())
    summary.pop("histogram")
    sweep = sec.get("sweep_q")
    if sweep:
        rows = []
        for q in sweep:
            L = 100.0 * int(q)
            N = calibrate_count(L, config, frac)
            st = spacing_stats(solve_equilibrium(config.with_length(L, N)), frac, bins)
            rows.append((int(q), L, N, st.mean_spacing, st.sigma_d, st.relative_sigma))
        write_csv(out / "uniformity.csv",
                  ["q", "L_d0", "N", "mean_spacing", "sigma_d", "relative_sigma"], rows)
    write_json(out / "equilibrium.json", summary)
    return summary


def run_modes(data: dict, out: Path) -> dict:
    from ioncrystal.crystal import calibrate_count, solve_equilibrium
    from ioncrystal.modespec import coupling_matrix, spectrum, tweezer_scan

    sec = _section(data, "modes")
    _check_keys(sec, {"axes", "calibrate", "scan"}, "modes")
    config, tweezers, units = _base(data)
    if sec.get("calibrate", False):
        config = config.with_length(config.L_d0, calibrate_count(config.L_d0, config))
    crystal = solve_equilibrium(config, tweezers)
    summary: dict[str, Any] = {"N": crystal.N}
    for axis in sec.get("axes", ["z"]):
        modes = spectrum(coupling_matrix(crystal, axis, tweezers), axis)
        write_csv(out / f"modes_{axis}.csv", ["k", "omega_k", "freq_khz"],
                  ((k, w, units.khz(w)) for k, w in enumerate(modes.omega_k)))
        summary[f"lowest_{axis}_khz"] = float(units.khz(modes.lowest))
    scan = sec.get("scan")
    if scan:
        _check_keys(scan, {"axis", "periods", "strengths_hz", "anchor", "middle_fraction",
                           "include_pinned"}, "modes.scan")
        axis = scan.get("axis", "z")
        strengths = [2 * np.pi * float(f) / units.omega0 for f in scan.get("strengths_hz", [])]
        anchor = scan.get("anchor")
        if anchor is not None:
            anchor = int(anchor) - _index_base(data)
        rows, fit = tweezer_scan(crystal, axis, _get(scan, "periods", where="modes.scan."),
                                 strengths, anchor=anchor,
                                 include_pinned=bool(scan.get("include_pinned", True)),
                                 middle_fraction=scan.get("middle_fraction", 0.8))
        free = spectrum(coupling_matrix(crystal, axis, type(tweezers).none())).lowest
        write_csv(out / "tweezer_scan.csv",
                  ["period", "strength_khz", "omega_L", "omega_L_khz", "gain"],
                  ((r.period, units.khz(r.strength) if np.isfinite(r.strength) else np.inf,
                    r.omega_L, units.khz(r.omega_L), r.omega_L / free) for r in rows))
        summary["tweezer_free_lowest_khz"] = float(units.khz(free))
        if fit is not None:
            write_json(out / "pinned_fit.json", fit.to_dict())
            summary["pinned_fit"] = fit.to_dict()
    write_json(out / "modes.json", summary)
    return summary


def run_gate(data: dict, out: Path) -> dict:
    from ioncrystal.crystal import solve_equilibrium
    from ioncrystal.fitting import fit_power_law
    from ioncrystal.gatedesign import (GateSpec, anharmonic_infidelity, beam_infidelity,
                                       evaluate_pulse, optimize_pulse, thermal_errors)
    from ioncrystal.modespec import cell_frequencies, coupling_matrix, spectrum

    sec = _section(data, "gate")
    _check_keys(sec, {"axis", "cell_size", "ions", "full_ions", "t_g_us", "segments",
                      "T_over_TD", "n_mu", "full_crystal", "beam_waist_um", "pf_z"}, "gate")
    config, _, units = _base(data)
    base = _index_base(data)
    axis = sec.get("axis", "x")
    n_cell = int(sec.get("cell_size", 9))
    i, j = (int(v) - base for v in sec.get("ions", [2 + base, 5 + base]))
    T_D = config.T_doppler / units.temp_unit
    T = float(sec.get("T_over_TD", 10.0)) * T_D
    M = int(sec.get("segments", 7))
    n_mu = int(sec.get("n_mu", 2000))
    t_list = [float(t) for t in _get(sec, "t_g_us", where="gate.")]
    omega = config.omega_rf_x if axis == "x" else config.omega_rf_y
    if axis == "z":
        raise ConfigError("gate.axis must be transverse (x or y)")
    cell = cell_frequencies(n_cell, axis, (omega / units.omega0) ** 2)

    full = None
    if sec.get("full_crystal", False):
        crystal = solve_equilibrium(config)
        full = spectrum(coupling_matrix(crystal, axis), axis)
        fi, fj = (int(v) - base for v in _get(sec, "full_ions", where="gate."))

    rows, pulses = [], []
    for tg_us in t_list:
        tg = float(units.from_si_time(tg_us * 1e-6))
        spec = GateSpec(i, j, tg, M=M, axis=axis, delta_k=config.delta_k, T=T, n_mu=n_mu)
        pulse, budget = optimize_pulse(spec, cell, units)
        row = [tg_us, tg, pulse.mu, budget.dF_c, units.khz(budget.eta_omega_max), pulse.phi_ij]
        if full is not None:
            fspec = GateSpec(fi, fj, tg, M=M, axis=axis, delta_k=config.delta_k, T=T,
                             n_mu=n_mu)
            row.append(evaluate_pulse(pulse, fspec, full, units).dF_c)
        rows.append(row)
        pulses.append({"t_g_us": tg_us, **pulse.to_dict(), **budget.to_dict()})
    header = ["t_g_us", "t_g", "mu", "dF_c", "eta_omega_max_khz", "phi_ij"]
    if full is not None:
        header.append("dF_c_full")
    write_csv(out / "gate_scan.csv", header, rows)
    write_json(out / "pulses.json", pulses)
    summary: dict[str, Any] = {"T": T, "best_dF_c": min(r[3] for r in rows)}
    if len(rows) >= 4:
        fit = fit_power_law([(r[0], r[4]) for r in rows])
        write_json(out / "power_fit.json", fit.to_dict())
        summary["power_fit"] = fit.to_dict()
    w = float(sec.get("beam_waist_um", 5.0)) * 1e-6
    th = thermal_errors(cell, T_D, config.delta_k, w, axis, units, ion=i)
    pf_z = float(sec.get("pf_z", 0.02))
    summary["thermal_transverse"] = th.to_dict()
    summary["thermal_longitudinal"] = {"pf": pf_z, "dF_a": anharmonic_infidelity(pf_z),
                                       "dF_b": beam_infidelity(pf_z, w / units.d0)}
    write_json(out / "gate.json", summary)
    return summary


def _crystal_for_cooling(data: dict):
    from ioncrystal.crystal import solve_equilibrium

    config, _, units = _base(data)
    return solve_equilibrium(config), config, units


def _series_rows(series_by_axis: dict, base: int):
    """Rows ``(t, i, dx, dy, dz)`` on the common grid; axes not run stay empty."""
    any_series = next(iter(series_by_axis.values()))
    for n, t in enumerate(any_series.t):
        for col, ion in enumerate(any_series.ions):
            vals = [series_by_axis[a].pf[n, col] if a in series_by_axis else None
                    for a in ("x", "y", "z")]
            yield [t, int(ion) + base, *vals]


def _cooling_runs(data: dict, out: Path, layouts: dict, sec: dict, crystal, config, units,
                  tag: str = "") -> dict:
    """Fit and series for each axis of one layout; writes ``pf{tag}.csv``."""
    from ioncrystal.cooling import StepLadder, build_scenario, evolve_positions, relaxation

    base = _index_base(data)
    T_D = config.T_doppler / units.temp_unit
    T0 = float(sec.get("T0_over_TD", 20.0)) * T_D
    target = int(_get(sec, "target", where=f"{sec.get('_name', 'cooling')}.")) - base
    refs = [int(r) - base for r in sec.get("references", [])]
    lo, hi = (int(v) - base for v in sec.get("track", [target - 20 + base, target + 20 + base]))
    track = np.arange(max(lo, 0), min(hi, crystal.N - 1) + 1)
    grid = sec.get("series", {}) or {}
    fits, series = {}, {}
    for axis in sec.get("axes", ["z"]):
        tweezers, coolants = layouts[axis]
        sc = build_scenario(crystal, axis, tweezers, coolants, units.eps, T_D,
                            gamma=float(sec.get("gamma", 0.01)),
                            background_gamma_T=float(sec.get("background_gamma_T", 1e-4)))
        M, D = sc.drift_diffusion()
        ladder = StepLadder(M, D, float(sec.get("base_step", 1.0)))
        run = relaxation(sc, T0, target, ions=refs, ladder=ladder,
                         e_folds=float(sec.get("e_folds", 6.0)),
                         samples=int(sec.get("samples", 200)))
        fit = {"target": run.to_dict()}
        for r in refs:
            y = run.series.of(r)
            fit[f"ion_{r + base}"] = {"pf_start": y[0], "pf_end": y[-1],
                                      "monotone_increasing": bool(np.all(np.diff(y) >= 0))}
        fits[axis] = fit
        dt = float(grid.get("sample_every", run.dt))
        t_final = float(grid.get("t_final", run.series.t[-1]))
        series[axis] = evolve_positions(sc.thermal(T0), None, None, t_final, dt, track,
                                        step=ladder.step(dt))
    if len({len(s.t) for s in series.values()}) > 1 or \
            len({float(s.t[-1]) for s in series.values()}) > 1:
        # axes relaxed on different windows: write one file per axis
        for axis, s in series.items():
            write_csv(out / f"pf{tag}_{axis}.csv", ["t", "i", "dx", "dy", "dz"],
                      _series_rows({axis: s}, base))
    else:
        write_csv(out / f"pf{tag}.csv", ["t", "i", "dx", "dy", "dz"], _series_rows(series, base))
    return fits


def run_cool(data: dict, out: Path) -> dict:
    from ioncrystal.cooling import mid_pf_scaling, periodic_cell_layout

    sec = _section(data, "cooling")
    _check_keys(sec, {"axes", "period", "first", "coolants_per_cell", "tweezer_hz",
                      "T0_over_TD", "target", "references", "track", "base_step", "e_folds",
                      "samples", "series", "gamma", "background_gamma_T", "pf_scaling"},
                "cooling")
    summary: dict[str, Any] = {}
    scaling = sec.get("pf_scaling")
    if scaling:
        config, _, units = _base(data)
        T_D = config.T_doppler / units.temp_unit
        points, fit = mid_pf_scaling(config, [float(L) for L in scaling["lengths"]], T_D)
        write_csv(out / "pf_scaling.csv", ["N", "pf_mid"], points)
        write_json(out / "pf_scaling_fit.json", fit.to_dict())
        summary["pf_scaling_fit"] = fit.to_dict()
    if "target" in sec:
        crystal, config, units = _crystal_for_cooling(data)
        if crystal.N >= SLOW_N:
            log.warning("N=%d cooling run is slow (dense 2N x 2N propagators)", crystal.N)
        base = _index_base(data)
        nu = 2 * np.pi * float(sec.get("tweezer_hz", 1e6)) / units.omega0
        per_count = sec.get("coolants_per_cell", 1)
        counts = per_count if isinstance(per_count, list) else [per_count]
        for count in counts:
            layout = periodic_cell_layout(crystal.N, nu, int(sec.get("period", 10)),
                                          int(sec.get("first", 5)) - base, int(count))
            layouts = {a: layout for a in ("x", "y", "z")}
            tag = f"_c{count}" if len(counts) > 1 else ""
            summary[f"coolants_{count}"] = _cooling_runs(data, out, layouts, sec, crystal,
                                                         config, units, tag)
    write_json(out / "fits.json", summary)
    return summary


def run_localcool(data: dict, out: Path) -> dict:
    from ioncrystal.cooling import local_cell_layout

    sec = _section(data, "localcool")
    _check_keys(sec, {"axes", "cell", "walls", "coolants", "tweezer_hz", "T0_over_TD",
                      "target", "references", "track", "base_step", "e_folds", "samples",
                      "series", "gamma", "background_gamma_T"}, "localcool")
    sec = {**sec, "_name": "localcool"}
    crystal, config, units = _crystal_for_cooling(data)
    if crystal.N >= SLOW_N:
        log.warning("N=%d cooling run is slow (dense 2N x 2N propagators)", crystal.N)
    base = _index_base(data)
    first, last = (int(v) - base for v in _get(sec, "cell", where="localcool."))
    coolants = sec.get("coolants")
    if coolants is not None:
        coolants = [int(c) - base for c in coolants]
    nu = 2 * np.pi * float(sec.get("tweezer_hz", 1e6)) / units.omega0
    walls = sec.get("walls", [2])
    walls = walls if isinstance(walls, list) else [walls]
    summary: dict[str, Any] = {}
    for w in walls:
        layout = local_cell_layout(crystal.N, nu, first, last, int(w), coolants)
        layouts = {a: layout for a in ("x", "y", "z")}
        tag = f"_w{w}" if len(walls) > 1 else ""
        summary[f"wall_{w}"] = _cooling_runs(data, out, layouts, sec, crystal, config, units,
                                             tag)
    write_json(out / "fits.json", summary)
    return summary


RUNNERS = {"equilibrium": run_equilibrium, "modes": run_modes, "gate": run_gate,
           "cool": run_cool, "localcool": run_localcool}


def run_scenario(kind: str, data: dict, out: Path) -> dict:
    """Run one scenario and write its outputs plus ``manifest.json`` into ``out``."""
    if kind not in RUNNERS:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    start = time.perf_counter()
    summary = RUNNERS[kind](data, out)
    manifest = {
        "kind": kind,
        "config": data,
        "config_hash": config_hash(data),
        "versions": {"ioncrystal": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "wall_time_s": time.perf_counter() - start,
    }
    write_json(out / "manifest.json", manifest)
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ioncrystal",
                                     description="Long ion-chain crystal, gate and cooling scenarios.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="YAML scenario file")
        p.add_argument("--preset", help=f"bundled scenario ({', '.join(PRESETS)})")
        p.add_argument("--out", default=f"out_{kind}", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted key, YAML value)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.config and not args.preset:
            raise ConfigError("give --config and/or --preset")
        data = resolve_config(args.preset, args.config, args.set)
        declared = data.pop("kind", args.kind)
        if declared != args.kind:
            raise ConfigError(f"config is for scenario {declared!r}, not {args.kind!r}")
        summary = run_scenario(args.kind, data, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
